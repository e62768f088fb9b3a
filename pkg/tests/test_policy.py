import numpy as np
import pytest
from scipy.optimize import minimize
from scipy.special import rel_entr

from tilt_pricing.advantage import ActionFactor, AdvantageBatch, AdvantageGroup
from tilt_pricing.dual import TrustRegionSpec, achieved_kl, dual_objective, solve_beta
from tilt_pricing.mdp import Observation
from tilt_pricing.policy import (
    CategoricalPolicy,
    ParticlePolicy,
    ParticleSet,
    expected_advantage,
    expected_kl,
    greedy_action,
    likelihood_ratio,
    reweight_particles,
    sample_action,
    systematic_resample,
    tilt,
    tilt_categorical,
    tilt_particles,
)
from tilt_pricing.state_key import StateKey

KEY = StateKey(1)


def _factored(grid, probs=None, n=1) -> CategoricalPolicy:
    table = {} if probs is None else {KEY: np.atleast_2d(probs)}
    return CategoricalPolicy(grid=grid, n_customers=n, mode="factored", table=table)


def _factored_batch(pi: CategoricalPolicy, rows, key=KEY) -> AdvantageBatch:
    p = pi.probs(key)
    factors = tuple(
        ActionFactor(actions=pi.grid, advantages=row, probs=p[n])
        for n, row in enumerate(rows)
    )
    return AdvantageBatch({key: AdvantageGroup(factors=factors)})


def _joint_batch(pi: CategoricalPolicy, adv, key=KEY) -> AdvantageBatch:
    factor = ActionFactor(
        actions=pi.joint_actions(), advantages=adv, probs=pi.probs(key)
    )
    return AdvantageBatch({key: AdvantageGroup(factors=(factor,))})


def _particles(locations, weights=None, **kwargs) -> ParticlePolicy:
    loc = np.asarray(locations, dtype=float)
    w = np.full(len(loc), 1.0 / len(loc)) if weights is None else np.asarray(weights)
    params = dict(
        n_customers=loc.shape[1],
        price_min=0.0,
        price_max=12.0,
        particles_per_state=len(loc),
    )
    params.update(kwargs)
    return ParticlePolicy(table={KEY: ParticleSet(loc, w)}, **params)


def _particle_batch(pi: ParticlePolicy, adv, key=KEY) -> AdvantageBatch:
    ps = pi.particles(key)
    factor = ActionFactor(actions=ps.locations, advantages=adv, probs=ps.weights)
    return AdvantageBatch({key: AdvantageGroup(factors=(factor,))})


OBS = Observation(t=1, base_demand=[[1.0, 1.0]], prev_consumption=[[0.0, 0.0]])


# ---------------------------------------------------------------------------
# Categorical tilt
# ---------------------------------------------------------------------------


def test_tilt_two_actions_example() -> None:
    """Uniform over 2 actions, A = (beta ln 2, 0) -> (2/3, 1/3)."""
    beta = 0.7
    pi = _factored([1.0, 2.0])
    new = tilt_categorical(pi, _factored_batch(pi, [[beta * np.log(2.0), 0.0]]), beta)
    np.testing.assert_allclose(new.probs(KEY)[0], [2 / 3, 1 / 3], atol=1e-12)
    # the source policy is left untouched
    np.testing.assert_allclose(pi.probs(KEY)[0], [0.5, 0.5])


def test_tilt_is_shift_invariant_and_constant_advantage_is_a_no_op() -> None:
    rng = np.random.default_rng(0)
    pi = _factored(np.arange(5.0), rng.dirichlet(np.ones(5)))
    adv = rng.uniform(-1, 1, 5)
    a = tilt_categorical(pi, _factored_batch(pi, [adv]), 0.3)
    b = tilt_categorical(pi, _factored_batch(pi, [adv + 17.0]), 0.3)
    np.testing.assert_allclose(a.probs(KEY), b.probs(KEY), atol=1e-9)

    same = tilt_categorical(pi, _factored_batch(pi, [np.full(5, -4.0)]), 0.3)
    np.testing.assert_allclose(same.probs(KEY), pi.probs(KEY), atol=1e-12)


def test_tilt_invariants_on_random_instances() -> None:
    """Normalization, ratio law, importance-ratio mean and improvement."""
    rng = np.random.default_rng(1)
    for _ in range(20):
        grid = np.arange(6.0)
        p = rng.dirichlet(np.ones(6), size=2)
        pi = _factored(grid, p, n=2)
        rows = rng.uniform(-1, 1, (2, 6))
        beta = float(np.exp(rng.uniform(-3, 2)))
        batch = _factored_batch(pi, rows)
        new = tilt_categorical(pi, batch, beta)
        q = new.probs(KEY)

        np.testing.assert_allclose(q.sum(axis=1), 1.0, atol=1e-9)
        log_ratio = np.log(q) - np.log(p) - rows / beta
        np.testing.assert_allclose(log_ratio - log_ratio[:, :1], 0.0, atol=1e-9)
        ratio = likelihood_ratio(new, pi, KEY)
        np.testing.assert_allclose((p * ratio).sum(axis=1), 1.0, atol=1e-9)
        assert expected_advantage(new, batch) > expected_advantage(pi, batch)


def test_unvisited_keys_are_unchanged() -> None:
    pi = _factored([1.0, 2.0, 3.0])
    other = StateKey(2)
    new = tilt_categorical(pi, _factored_batch(pi, [[1.0, 0.0, 0.0]]), 1.0)
    np.testing.assert_allclose(new.probs(other), pi.probs(other))
    assert other not in new.table


def test_joint_tilt_requires_full_grid_coverage() -> None:
    pi = CategoricalPolicy(grid=[1.0, 2.0, 3.0], n_customers=2, mode="joint")
    partial = ActionFactor(
        actions=pi.joint_actions()[:4], advantages=np.zeros(4), probs=np.full(4, 0.25)
    )
    batch = AdvantageBatch({KEY: AdvantageGroup(factors=(partial,))})
    with pytest.raises(ValueError, match="cover"):
        tilt_categorical(pi, batch, 1.0)


def test_factored_tilt_requires_one_factor_per_customer() -> None:
    pi = _factored([1.0, 2.0], n=2)
    with pytest.raises(ValueError, match="per-customer"):
        tilt_categorical(pi, _factored_batch(pi, [[0.0, 1.0]]), 1.0)


def test_tilt_rejects_invalid_beta() -> None:
    pi = _factored([1.0, 2.0])
    with pytest.raises(ValueError, match="beta_star"):
        tilt_categorical(pi, _factored_batch(pi, [[0.0, 1.0]]), 0.0)


def test_factored_and_joint_tilts_agree() -> None:
    """Separable advantages: per-customer tilt equals the joint tilt."""
    rng = np.random.default_rng(2)
    grid = np.array([1.0, 2.0, 3.0])
    spec = TrustRegionSpec(delta=0.05)
    for _ in range(10):
        p = rng.dirichlet(np.ones(3), size=2)
        rows = rng.uniform(-1, 1, (2, 3))
        fact = _factored(grid, p, n=2)
        joint = CategoricalPolicy(
            grid=grid,
            n_customers=2,
            mode="joint",
            table={KEY: fact.joint_probs(KEY)},
        )
        joint_adv = (rows[0][:, None] + rows[1][None, :]).reshape(-1)
        fb = _factored_batch(fact, rows)
        jb = _joint_batch(joint, joint_adv)

        beta = float(np.exp(rng.uniform(-2, 1)))
        assert achieved_kl(beta, fb) == pytest.approx(achieved_kl(beta, jb), abs=1e-9)
        assert dual_objective(beta, fb, spec) == pytest.approx(
            dual_objective(beta, jb, spec), abs=1e-9
        )

        sol = solve_beta(fb, spec)
        qf = tilt_categorical(fact, fb, sol.beta_star).joint_probs(KEY)
        qj = tilt_categorical(joint, jb, sol.beta_star).probs(KEY)
        assert 0.5 * np.abs(qf - qj).sum() <= 1e-9


def _simplex_oracle(adv: np.ndarray, p: np.ndarray, delta: float) -> np.ndarray:
    """max E_q[A] subject to KL(q || p) <= delta on the simplex (SLSQP)."""
    floor = 1e-12

    def kl_slack(q):
        return delta - float(np.sum(rel_entr(q, p)))

    def kl_slack_jac(q):
        return -(np.log(np.maximum(q, floor) / p) + 1.0)

    result = minimize(
        lambda q: -float(q @ adv),
        x0=p.copy(),
        jac=lambda q: -adv,
        method="SLSQP",
        bounds=[(floor, 1.0)] * len(p),
        constraints=[
            {"type": "eq", "fun": lambda q: q.sum() - 1.0, "jac": np.ones_like},
            {"type": "ineq", "fun": kl_slack, "jac": kl_slack_jac},
        ],
        options={"ftol": 1e-14, "maxiter": 1000},
    )
    return result.x / result.x.sum()


def test_closed_form_update_matches_simplex_maximization() -> None:
    rng = np.random.default_rng(3)
    grid = np.arange(4.0)
    for i in range(20):
        delta = (0.01, 0.05, 0.2)[i % 3]
        p = rng.dirichlet(2.0 * np.ones(4))
        adv = rng.uniform(-1, 1, 4)
        pi = _factored(grid, p)
        batch = _factored_batch(pi, [adv])
        sol = solve_beta(batch, TrustRegionSpec(delta=delta), seed=i)
        q = tilt_categorical(pi, batch, sol.beta_star).probs(KEY)[0]
        oracle = _simplex_oracle(adv, p, delta)
        assert 0.5 * np.abs(q - oracle).sum() <= 1e-3


def test_weak_duality_bound() -> None:
    """Any policy inside the trust region scores at most the dual value."""
    rng = np.random.default_rng(4)
    delta = 0.05
    spec = TrustRegionSpec(delta=delta)
    p = rng.dirichlet(np.ones(5))
    adv = rng.uniform(-1, 1, 5)
    pi = _factored(np.arange(5.0), p)
    batch = _factored_batch(pi, [adv])
    checked = 0
    for _ in range(200):
        q = rng.dirichlet(np.ones(5))
        q = p + 0.3 * (q - p)
        if np.sum(rel_entr(q, p)) > delta:
            continue
        checked += 1
        candidate = _factored(np.arange(5.0), q)
        for beta in (0.05, 0.3, 1.0, 10.0):
            assert expected_advantage(candidate, batch) <= dual_objective(
                beta, batch, spec
            ) + 1e-12
    assert checked > 0


# ---------------------------------------------------------------------------
# Particle tilt
# ---------------------------------------------------------------------------


def test_particle_tilt_example() -> None:
    """Two equal particles, A = (beta ln 3, 0) -> weights (0.75, 0.25)."""
    beta = 2.0
    pi = _particles([[3.0], [9.0]])
    new = tilt_particles(pi, _particle_batch(pi, [beta * np.log(3.0), 0.0]), beta)
    np.testing.assert_allclose(new.particles(KEY).weights, [0.75, 0.25], atol=1e-12)
    np.testing.assert_allclose(new.particles(KEY).locations, [[3.0], [9.0]])


def test_particle_tilt_constant_and_monotone() -> None:
    pi = _particles([[1.0], [4.0], [7.0]], weights=[0.2, 0.5, 0.3])
    same = reweight_particles(pi, _particle_batch(pi, [2.0, 2.0, 2.0]), 0.5)
    np.testing.assert_allclose(same.particles(KEY).weights, [0.2, 0.5, 0.3])

    new = reweight_particles(pi, _particle_batch(pi, [1.0, 0.0, 0.0]), 0.5)
    w_old, w_new = pi.particles(KEY).weights, new.particles(KEY).weights
    assert w_new[0] / w_new[1] > w_old[0] / w_old[1]


def test_particle_tilt_rejects_other_locations() -> None:
    pi = _particles([[1.0], [4.0]])
    factor = ActionFactor(
        actions=[[1.0], [5.0]], advantages=[0.0, 1.0], probs=[0.5, 0.5]
    )
    batch = AdvantageBatch({KEY: AdvantageGroup(factors=(factor,))})
    with pytest.raises(ValueError, match="particles"):
        tilt_particles(pi, batch, 1.0)


def test_degenerate_particles_are_resampled() -> None:
    pi = _particles([[1.0], [4.0], [7.0], [10.0]], weights=[0.97, 0.01, 0.01, 0.01])
    batch = _particle_batch(pi, [0.0, 0.0, 0.0, 0.0])

    # no generator: deterministic offset and no rejuvenation
    new = tilt_particles(pi, batch, 1.0)
    ps = new.particles(KEY)
    np.testing.assert_allclose(ps.weights, 0.25)
    np.testing.assert_allclose(ps.locations, 1.0)

    moved = tilt_particles(pi, batch, 1.0, rng=np.random.default_rng(0))
    locs = moved.particles(KEY).locations
    assert len(np.unique(locs)) > 1
    assert (locs >= 0.0).all() and (locs <= 12.0).all()


def test_systematic_resample_counts_follow_weights() -> None:
    rng = np.random.default_rng(5)
    weights = np.array([0.5, 0.3, 0.15, 0.05])
    m = 100
    w = np.repeat(weights / (m // 4), m // 4)
    idx = systematic_resample(w, rng)
    counts = np.bincount(idx // (m // 4), minlength=4)
    np.testing.assert_allclose(counts, weights * m, atol=1)


def test_initial_particles_span_the_price_box() -> None:
    pi = ParticlePolicy(
        n_customers=2, price_min=0.0, price_max=12.0, particles_per_state=64
    )
    ps = pi.particles(KEY)
    assert ps.locations.shape == (64, 2)
    assert (ps.locations >= 0.0).all() and (ps.locations <= 12.0).all()
    np.testing.assert_allclose(ps.weights, 1 / 64)
    assert ps.ess == pytest.approx(64.0)
    # deterministic lazy initialization
    np.testing.assert_array_equal(ps.locations, pi.particles(StateKey(9)).locations)


# ---------------------------------------------------------------------------
# Acting
# ---------------------------------------------------------------------------


def test_degenerate_categorical_always_samples_its_action() -> None:
    pi = _factored([1.0, 2.0, 3.0], [0.0, 1.0, 0.0])
    rng = np.random.default_rng(6)
    for _ in range(50):
        assert sample_action(pi, KEY, rng).prices.tolist() == [2.0]


def test_sampling_frequencies() -> None:
    pi = _factored([1.0, 2.0], [2 / 3, 1 / 3])
    rng = np.random.default_rng(7)
    draws = np.array([sample_action(pi, KEY, rng).prices[0] for _ in range(100_000)])
    assert np.mean(draws == 1.0) == pytest.approx(2 / 3, abs=0.01)


def test_joint_sampling_unravels_in_customer_order() -> None:
    pi = CategoricalPolicy(grid=[1.0, 2.0, 3.0], n_customers=2, mode="joint")
    p = np.zeros(9)
    p[5] = 1.0  # (index 1, index 2)
    pi = pi.with_table({KEY: p})
    action = sample_action(pi, KEY, np.random.default_rng(0))
    assert action.prices.tolist() == [2.0, 3.0]
    np.testing.assert_allclose(pi.joint_actions()[5], [2.0, 3.0])


def test_particle_sampling_without_bandwidth_returns_particles() -> None:
    pi = _particles([[2.0, 3.0], [8.0, 9.0]], weights=[0.25, 0.75], bandwidth=0.0)
    rng = np.random.default_rng(8)
    draws = np.array([sample_action(pi, KEY, rng).prices for _ in range(4000)])
    assert set(map(tuple, draws)) <= {(2.0, 3.0), (8.0, 9.0)}
    assert np.mean(draws[:, 0] == 8.0) == pytest.approx(0.75, abs=0.03)


def test_particle_sampling_is_clipped_to_bounds() -> None:
    pi = _particles([[0.0], [12.0]], bandwidth=2.0)
    rng = np.random.default_rng(9)
    draws = np.array([sample_action(pi, KEY, rng).prices[0] for _ in range(500)])
    assert draws.min() >= 0.0 and draws.max() <= 12.0


def test_greedy_actions() -> None:
    grid = np.linspace(0.0, 12.0, 25)
    uniform = CategoricalPolicy(grid=grid, n_customers=3)
    assert greedy_action(uniform, KEY).prices.tolist() == [6.0, 6.0, 6.0]

    ties = _factored([1.0, 2.0, 3.0, 4.0], [0.4, 0.1, 0.4, 0.1])
    # tied maxima at indices 0 and 2 -> middle of the tied set is index 2
    assert greedy_action(ties, KEY).prices.tolist() == [3.0]

    pi = _particles([[2.0], [10.0]], weights=[0.25, 0.75])
    assert greedy_action(pi, KEY).prices[0] == pytest.approx(8.0)
    assert pi.act(OBS, KEY, rng=None).prices[0] == pytest.approx(8.0)


# ---------------------------------------------------------------------------
# Diagnostics
# ---------------------------------------------------------------------------


def test_expected_kl_examples() -> None:
    old = _factored([1.0, 2.0], [0.5, 0.5])
    new = _factored([1.0, 2.0], [2 / 3, 1 / 3])
    expected = (2 / 3) * np.log(4 / 3) + (1 / 3) * np.log(2 / 3)
    assert expected_kl(new, old, {KEY: 1}) == pytest.approx(expected)
    assert expected_kl(new, old, {KEY: 1}) == pytest.approx(0.05663, abs=1e-5)
    assert expected_kl(old, old, {KEY: 3}) == pytest.approx(0.0)


def test_expected_kl_rejects_support_mismatch() -> None:
    a = _factored([1.0, 2.0], [0.5, 0.5])
    b = _factored([1.0, 3.0], [0.5, 0.5])
    with pytest.raises(ValueError):
        expected_kl(a, b, {KEY: 1})
    p1 = _particles([[1.0], [2.0]])
    p2 = _particles([[1.0], [5.0]])
    with pytest.raises(ValueError, match="support"):
        expected_kl(p1, p2, {KEY: 1})


def test_tilt_at_solved_beta_spends_the_trust_region() -> None:
    rng = np.random.default_rng(10)
    spec = TrustRegionSpec(delta=0.05)
    keys = [StateKey(t) for t in (1, 2, 3)]
    pi = CategoricalPolicy(grid=np.arange(5.0), n_customers=2)
    groups = {}
    for key in keys:
        factors = tuple(
            ActionFactor(actions=pi.grid, advantages=rng.uniform(-1, 1, 5), probs=row)
            for row in pi.probs(key)
        )
        groups[key] = AdvantageGroup(factors=factors, visits=2, weight=2.0)
    batch = AdvantageBatch(groups)
    sol = solve_beta(batch, spec)
    assert not sol.clamped
    new = tilt(pi, batch, sol.beta_star)
    kl = expected_kl(new, pi, {k: g.visits for k, g in batch.groups.items()})
    assert kl == pytest.approx(spec.delta, rel=1e-3)


def test_expected_advantage_examples() -> None:
    uniform = _factored([1.0, 2.0])
    assert expected_advantage(
        uniform, _factored_batch(uniform, [[1.0, -1.0]])
    ) == pytest.approx(0.0)
    skewed = _factored([1.0, 2.0], [2 / 3, 1 / 3])
    assert expected_advantage(
        skewed, _factored_batch(skewed, [[1.0, 0.0]])
    ) == pytest.approx(2 / 3)


def test_probability_tables_are_validated() -> None:
    with pytest.raises(ValueError, match="sum to 1"):
        _factored([1.0, 2.0], [0.5, 0.6])
    with pytest.raises(ValueError, match="shape"):
        _factored([1.0, 2.0], [0.2, 0.3, 0.5])
    with pytest.raises(ValueError, match="policy_mode"):
        CategoricalPolicy(grid=[1.0], n_customers=1, mode="mixed")
    with pytest.raises(ValueError, match="bounds"):
        _particles([[13.0], [1.0]])
