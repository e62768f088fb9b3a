# Tilt Pricing - Nonparametric KL trust-region pricing for demand response
# Copyright (c) 2025 Maxence Bernard (maxencebernardhub)
# Licensed under the MIT License. See LICENSE file for details.

"""
View utilities for Tilt Pricing.

This module turns an ``EvaluationResult`` into plot-ready tables:

- pricing:  one row per hour, one ``customer_n`` column per customer holding
            the mean retail price,
- response: long format (hour, customer, load_reduction, unit_profit),
- summary:  (metric, value) pairs, including peak vs off-peak averages over
            the configured peak hours.

The tables carry no plotting logic; they are written as CSV by the CLI.
"""

import numpy as np
import pandas as pd

from .trainer import EvaluationResult


def pricing_table(result: EvaluationResult) -> pd.DataFrame:
    """Mean price per hour (rows) and customer (columns)."""
    horizon, n = result.prices.shape
    df = pd.DataFrame(result.prices, columns=[f"customer_{i + 1}" for i in range(n)])
    df.insert(0, "hour", np.arange(1, horizon + 1))
    return df


def response_table(result: EvaluationResult) -> pd.DataFrame:
    """Long format: one row per (hour, customer)."""
    horizon, n = result.load_reduction.shape
    return pd.DataFrame(
        {
            "hour": np.repeat(np.arange(1, horizon + 1), n),
            "customer": np.tile(np.arange(1, n + 1), horizon),
            "load_reduction": result.load_reduction.reshape(-1),
            "unit_profit": result.unit_profit.reshape(-1),
        }
    )


def _peak_split(values: np.ndarray, peak_hours) -> tuple[float, float]:
    """Mean over peak-hour rows and over the remaining rows (NaN when empty)."""
    horizon = values.shape[0]
    mask = np.zeros(horizon, dtype=bool)
    mask[[h - 1 for h in peak_hours if 1 <= h <= horizon]] = True
    peak = float(values[mask].mean()) if mask.any() else float("nan")
    off = float(values[~mask].mean()) if (~mask).any() else float("nan")
    return peak, off


def summary_table(result: EvaluationResult) -> pd.DataFrame:
    """Scalar metrics of an evaluation as (metric, value) rows."""
    rows = [
        ("mean_reward", result.mean_reward),
        ("std_reward", result.std_reward),
        ("episodes", float(len(result.episode_rewards))),
        ("mean_price", float(result.prices.mean())),
    ]
    if result.peak_hours:
        for name, table in (
            ("price", result.prices),
            ("load_reduction", result.load_reduction),
            ("unit_profit", result.unit_profit),
        ):
            peak, off = _peak_split(table, result.peak_hours)
            rows.append((f"peak_mean_{name}", peak))
            rows.append((f"offpeak_mean_{name}", off))
    return pd.DataFrame(rows, columns=["metric", "value"])
