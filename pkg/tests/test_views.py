import numpy as np
import pytest

from tilt_pricing.trainer import EvaluationResult
from tilt_pricing.views import pricing_table, response_table, summary_table


def _result(peak_hours=(2, 3)) -> EvaluationResult:
    prices = np.array([[4.0, 5.0], [8.0, 9.0], [10.0, 11.0], [3.0, 3.0]])
    return EvaluationResult(
        episode_rewards=np.array([-10.0, -14.0]),
        prices=prices,
        load_reduction=np.array([[0.0, 0.5], [2.0, 3.0], [4.0, 5.0], [0.0, 0.0]]),
        unit_profit=prices - 3.0,
        peak_hours=peak_hours,
    )


def test_pricing_table_has_one_row_per_hour() -> None:
    df = pricing_table(_result())
    assert list(df.columns) == ["hour", "customer_1", "customer_2"]
    assert df["hour"].tolist() == [1, 2, 3, 4]
    assert df.loc[2, "customer_2"] == 11.0


def test_response_table_is_long_format() -> None:
    df = response_table(_result())
    assert list(df.columns) == ["hour", "customer", "load_reduction", "unit_profit"]
    assert len(df) == 8
    row = df[(df["hour"] == 3) & (df["customer"] == 2)].iloc[0]
    assert row["load_reduction"] == 5.0
    assert row["unit_profit"] == 8.0


def test_summary_splits_peak_and_off_peak_hours() -> None:
    summary = dict(summary_table(_result()).itertuples(index=False))
    assert summary["mean_reward"] == pytest.approx(-12.0)
    assert summary["std_reward"] == pytest.approx(2.0)
    assert summary["episodes"] == 2.0
    assert summary["peak_mean_price"] == pytest.approx(9.5)
    assert summary["offpeak_mean_price"] == pytest.approx(3.75)
    assert summary["peak_mean_load_reduction"] == pytest.approx(3.5)
    assert summary["offpeak_mean_load_reduction"] == pytest.approx(0.125)


def test_summary_without_peak_hours_has_no_split() -> None:
    metrics = summary_table(_result(peak_hours=()))["metric"].tolist()
    assert metrics == ["mean_reward", "std_reward", "episodes", "mean_price"]
