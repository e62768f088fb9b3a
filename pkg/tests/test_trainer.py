from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

import tilt_pricing.trainer as trainer_module
from tilt_pricing.advantage import ValueTable, advantage_values, value_update
from tilt_pricing.baselines import RandomPolicy, WholesalePolicy, train_qlearning
from tilt_pricing.config import load_settings
from tilt_pricing.counterfactual import counterfactual_batch
from tilt_pricing.dual import TrustRegionSpec, solve_beta
from tilt_pricing.market import MarketConfig
from tilt_pricing.policy import (
    CategoricalPolicy,
    ParticlePolicy,
    expected_advantage,
    expected_kl,
    tilt,
)
from tilt_pricing.trainer import (
    TrainConfig,
    TrainingError,
    episode_streams,
    evaluate,
    initial_policy,
    rollout,
    train,
)

BASE_DIR = Path(__file__).resolve().parents[1]


def _market(**overrides) -> MarketConfig:
    rng = np.random.default_rng(3)
    horizon = 4
    params = dict(
        n_customers=2,
        horizon=horizon,
        wholesale=rng.uniform(2.0, 8.0, horizon),
        elasticity=rng.uniform(-0.9, -0.2, horizon),
        crit_demand=rng.uniform(0.5, 4.0, (2, horizon)),
        curt_demand=rng.uniform(1.0, 8.0, (2, horizon)),
        alpha=[6.0, 5.0],
        beta=[0.4, 0.5],
        price_grid_step=1.0,
        peak_hours=(3,),
    )
    params.update(overrides)
    return MarketConfig(**params)


def _cfg(**overrides) -> TrainConfig:
    params = dict(
        iterations=3,
        episodes_per_iteration=2,
        seed=7,
        record_wall_clock=False,
    )
    params.update(overrides)
    return TrainConfig(**params)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def test_training_is_deterministic_for_a_seed() -> None:
    market = _market()
    pi_a, metrics_a = train(market, _cfg())
    pi_b, metrics_b = train(market, _cfg())
    assert metrics_a == metrics_b
    assert set(pi_a.table) == set(pi_b.table)
    for key in pi_a.table:
        np.testing.assert_array_equal(pi_a.probs(key), pi_b.probs(key))

    _, other = train(market, _cfg(seed=8))
    assert [m.mean_reward for m in other] != [m.mean_reward for m in metrics_a]


def test_metrics_have_one_finite_record_per_iteration() -> None:
    _, metrics = train(_market(), _cfg(iterations=4, record_wall_clock=True))
    assert [m.iteration for m in metrics] == [1, 2, 3, 4]
    for m in metrics:
        values = [m.mean_reward, m.std_reward, m.beta_star, m.expected_kl]
        assert np.all(np.isfinite(values + [m.value_loss, m.seconds]))
    seconds = [m.seconds for m in metrics]
    assert seconds == sorted(seconds)


def test_every_iteration_respects_the_trust_region() -> None:
    cfg = _cfg(iterations=5, trust=TrustRegionSpec(delta=0.02))
    _, metrics = train(_market(), cfg)
    for m in metrics:
        assert m.expected_kl <= cfg.trust.delta + 1e-6
        assert m.beta_star >= cfg.trust.beta_min


def test_each_update_improves_the_surrogate() -> None:
    """Replays the loop body and checks the tilt never lowers E[A]."""
    market = _market()
    cfg = _cfg()
    policy = initial_policy(market, cfg)
    values = ValueTable(learning_rate=cfg.value_lr)
    root = np.random.SeedSequence(cfg.seed)
    for iteration_ss in root.spawn(4):
        episode_ss, _ = iteration_ss.spawn(2)
        trajs = [
            rollout(policy, market, cfg.scheme, seed, rng)
            for seed, rng in episode_streams(episode_ss, 3)
        ]
        adv = [
            advantage_values(t, values, cfg.discount, cfg.scheme, "mc") for t in trajs
        ]
        values = value_update(values, trajs, cfg.discount, cfg.scheme)
        batch = counterfactual_batch(trajs, adv, policy, market, cfg.scheme)
        sol = solve_beta(batch, cfg.trust)
        new = tilt(policy, batch, sol.beta_star)
        before = expected_advantage(policy, batch)
        assert expected_advantage(new, batch) >= before - 1e-12
        visits = {k: g.visits for k, g in batch.groups.items()}
        assert expected_kl(new, policy, visits) <= cfg.trust.delta + 1e-6
        policy = new


def test_constant_advantages_leave_the_policy_unchanged() -> None:
    """Zero demand: every price earns 0, so the tilt is a no-op."""
    market = _market(crit_demand=np.zeros((2, 4)), curt_demand=np.zeros((2, 4)))
    cfg = _cfg(iterations=1)
    start = initial_policy(market, cfg)
    final, metrics = train(market, cfg)
    assert metrics[0].beta_star == cfg.trust.beta_min
    assert metrics[0].expected_kl == pytest.approx(0.0, abs=1e-12)
    for key in final.table:
        np.testing.assert_allclose(final.probs(key), start.probs(key), atol=1e-12)


@pytest.mark.parametrize("estimator", ["gae", "nstep"])
def test_other_estimators_train(estimator: str) -> None:
    _, metrics = train(_market(), _cfg(estimator=estimator, td_n=2))
    assert len(metrics) == 3


def test_joint_mode_trains() -> None:
    market = _market(price_grid_step=4.0)
    policy, metrics = train(market, _cfg(policy_mode="joint"))
    assert policy.mode == "joint"
    assert len(metrics) == 3


def test_continuous_mode_trains_particles() -> None:
    cfg = _cfg(action_mode="continuous", particles_per_state=16)
    policy, metrics = train(_market(price_grid_step=None), cfg)
    assert isinstance(policy, ParticlePolicy)
    assert len(policy.table) == 4
    for m in metrics:
        assert m.expected_kl <= cfg.trust.delta + 1e-6


def test_non_finite_rewards_abort_with_the_iteration(monkeypatch) -> None:
    monkeypatch.setattr(trainer_module, "episode_reward", lambda traj: float("nan"))
    with pytest.raises(TrainingError) as excinfo:
        train(_market(), _cfg())
    assert excinfo.value.iteration == 1
    assert "non-finite" in str(excinfo.value)


def test_module_errors_carry_the_iteration(monkeypatch) -> None:
    calls = {"n": 0}
    real = trainer_module.solve_beta

    def failing(batch, spec, seed=None):
        calls["n"] += 1
        if calls["n"] == 2:
            raise ValueError("dual blew up")
        return real(batch, spec, seed=seed)

    monkeypatch.setattr(trainer_module, "solve_beta", failing)
    with pytest.raises(TrainingError) as excinfo:
        train(_market(), _cfg())
    assert excinfo.value.iteration == 2
    assert isinstance(excinfo.value.cause, ValueError)
    assert "iteration 2" in str(excinfo.value)


def test_train_config_validation_lists_fields() -> None:
    with pytest.raises(ValueError) as excinfo:
        train(_market(), _cfg(iterations=0, episodes_per_iteration=0, estimator="td"))
    message = str(excinfo.value)
    for name in ("iterations:", "episodes_per_iteration:", "advantage_estimator:"):
        assert name in message


def test_discrete_mode_needs_a_grid() -> None:
    with pytest.raises(ValueError, match="price_grid_step"):
        initial_policy(_market(price_grid_step=None), _cfg())


def test_episode_streams_are_reproducible_and_distinct() -> None:
    a = episode_streams(np.random.SeedSequence(5), 3)
    b = episode_streams(np.random.SeedSequence(5), 3)
    assert [s for s, _ in a] == [s for s, _ in b]
    assert len({s for s, _ in a}) == 3
    assert a[0][1].random() == b[0][1].random()


def test_value_rate_must_contract_over_an_iteration() -> None:
    with pytest.raises(ValueError, match="value_lr \\* episodes_per_iteration"):
        train(_market(), _cfg(episodes_per_iteration=40))
    assert _cfg(episodes_per_iteration=40, value_lr=0.02).problems() == []


def test_many_episodes_per_iteration_stay_in_the_trust_region() -> None:
    cfg = _cfg(iterations=8, episodes_per_iteration=40, value_lr=0.02)
    _, metrics = train(_market(), cfg)
    for m in metrics:
        assert m.expected_kl <= cfg.trust.delta + 1e-6
        assert np.isfinite(m.value_loss)
    assert metrics[-1].value_loss < metrics[0].value_loss


def test_discrete_training_rejects_off_grid_policies() -> None:
    market = _market()
    off_grid = CategoricalPolicy(grid=[0.5, 1.5, 2.5], n_customers=2)
    with pytest.raises(TrainingError) as excinfo:
        train(market, _cfg(), policy=off_grid)
    assert excinfo.value.iteration == 1
    assert "price grid" in str(excinfo.value)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def test_uniform_policy_evaluates_at_the_grid_midpoint() -> None:
    market = _market(price_grid_step=0.5)
    policy = CategoricalPolicy(grid=market.price_grid, n_customers=2)
    result = evaluate(policy, market, episodes=3, seed=0)
    assert result.prices.shape == (4, 2)
    np.testing.assert_allclose(result.prices, 6.0)
    assert result.episode_rewards.shape == (3,)
    assert result.peak_hours == (3,)


def test_wholesale_pricing_has_no_response_and_no_margin() -> None:
    market = _market()
    result = evaluate(WholesalePolicy(market), market, episodes=2, seed=1)
    np.testing.assert_allclose(result.load_reduction, 0.0, atol=1e-9)
    np.testing.assert_allclose(result.unit_profit, 0.0, atol=1e-12)
    np.testing.assert_allclose(result.prices, np.tile(market.wholesale[:, None], 2))


def test_stochastic_evaluation_samples() -> None:
    market = _market()
    policy = CategoricalPolicy(grid=market.price_grid, n_customers=2)
    greedy = evaluate(policy, market, episodes=5, seed=0)
    sampled = evaluate(policy, market, episodes=5, seed=0, stochastic=True)
    assert not np.allclose(greedy.prices, sampled.prices)
    again = evaluate(policy, market, episodes=5, seed=0, stochastic=True)
    np.testing.assert_array_equal(sampled.prices, again.prices)


def test_evaluate_rejects_zero_episodes() -> None:
    with pytest.raises(ValueError, match="episodes"):
        evaluate(WholesalePolicy(_market()), _market(), episodes=0, seed=0)


# ---------------------------------------------------------------------------
# Acceptance runs
# ---------------------------------------------------------------------------

SEEDS = (1, 2, 3)


def _shipped(name: str, *overrides: str):
    path = BASE_DIR / "config" / f"{name}.toml"
    return load_settings(path, ["record_wall_clock=false", *overrides], environ={})


def _last_ten(metrics) -> float:
    return float(np.mean([m.mean_reward for m in metrics[-10:]]))


def _random_floor(market: MarketConfig, cfg: TrainConfig) -> float:
    """Random-pricing mean plus three sample standard deviations."""
    rewards = evaluate(
        RandomPolicy.for_market(market, discrete=cfg.action_mode == "discrete"),
        market,
        episodes=200,
        seed=cfg.seed + 1,
        stochastic=True,
    ).episode_rewards
    return float(rewards.mean() + 3 * rewards.std(ddof=1))


@pytest.fixture(scope="module")
def discrete_runs() -> list[dict]:
    settings = _shipped("dr3_discrete")
    market = settings.market
    runs = []
    for seed in SEEDS:
        cfg = replace(settings.train, seed=seed)
        policy, metrics = train(market, cfg)
        _, q_metrics = train_qlearning(market, cfg)
        runs.append(
            dict(
                market=market,
                final=_last_ten(metrics),
                qlearning=_last_ten(q_metrics),
                floor=_random_floor(market, cfg),
                result=evaluate(policy, market, episodes=5, seed=seed),
            )
        )
    return runs


@pytest.mark.slow
def test_discrete_learner_beats_random_and_qlearning(discrete_runs) -> None:
    wins = [
        run["final"] > run["floor"] and run["final"] >= run["qlearning"]
        for run in discrete_runs
    ]
    assert sum(wins) >= 2


@pytest.mark.slow
def test_trained_prices_and_response_peak_in_peak_hours(discrete_runs) -> None:
    wins = []
    for run in discrete_runs:
        market, result = run["market"], run["result"]
        peak = np.array(market.peak_hours) - 1
        off_peak = np.setdiff1d(np.arange(market.horizon), peak)
        wins.append(
            result.prices[peak].mean() > result.prices[off_peak].mean()
            and result.load_reduction[peak].mean()
            > result.load_reduction[off_peak].mean()
        )
    assert sum(wins) >= 2


@pytest.mark.slow
def test_continuous_learner_beats_random_inside_the_trust_region() -> None:
    settings = _shipped("dr3_continuous")
    wins = []
    for seed in SEEDS:
        cfg = replace(settings.train, seed=seed)
        _, metrics = train(settings.market, cfg)
        for m in metrics:
            assert m.expected_kl <= cfg.trust.delta + 1e-6
        wins.append(_last_ten(metrics) > _random_floor(settings.market, cfg))
    assert sum(wins) >= 2


@pytest.mark.slow
def test_continuous_scale_up_respects_the_trust_region() -> None:
    settings = _shipped("dr30_continuous", "iterations=50")
    cfg = settings.train
    policy, metrics = train(settings.market, cfg)
    assert policy.n_customers == 30
    assert len(metrics) == 50
    for m in metrics:
        values = [m.mean_reward, m.std_reward, m.beta_star, m.value_loss]
        assert np.all(np.isfinite(values))
        assert m.expected_kl <= cfg.trust.delta + 1e-6
