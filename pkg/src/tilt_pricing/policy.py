# Tilt Pricing - Nonparametric KL trust-region pricing for demand response
# Copyright (c) 2025 Maxence Bernard (maxencebernardhub)
# Licensed under the MIT License. See LICENSE file for details.

"""
Nonparametric pricing policies and the exponential-tilting update.

Representations
---------------
``CategoricalPolicy``
    A probability table over the discrete price grid for each state key.

    - ``factored`` mode: one distribution per customer (array (N, G)); the
      joint policy is their product.
    - ``joint`` mode: one distribution over the G**N joint price vectors,
      flattened in C order (customer 1 varies slowest).

``ParticlePolicy``
    For each state key, M weighted joint price vectors. Sampling picks a
    particle by weight and adds Gaussian kernel noise (std ``bandwidth``),
    clipped to the price bounds.

Unseen keys read as the initial policy (uniform over the grid, or M
equally-weighted particles on a Halton point set spanning the price box);
tables are only materialized for keys touched by an update.

Update operator
---------------
Tilting at beta multiplies the old probabilities by exp(A / beta) and
renormalizes, per key. A factored policy is tilted per customer with the
same beta; with separable advantages this equals tilting the joint product
distribution. The update needs advantages for the full support of each
updated key (every grid price, or every particle); a batch without that
coverage is rejected.

Particle sets whose effective sample size 1 / sum(w**2) drops below
``resample_threshold * M`` are resampled systematically to uniform weights and,
when ``rejuvenate`` is set, the copies are moved by kernel noise.

All policies are immutable: updates return new objects sharing unchanged
tables.
"""

import itertools
from collections.abc import Mapping
from dataclasses import dataclass, field, replace
from typing import Optional, Protocol, Union

import numpy as np
from scipy.special import logsumexp, rel_entr
from scipy.stats import qmc

from .advantage import AdvantageBatch, AdvantageGroup
from .mdp import Observation, PriceAction
from .state_key import StateKey

POLICY_MODES = ("factored", "joint")

_SUM_TOL = 1e-9


class PricingPolicy(Protocol):
    """Anything that can price an observation."""

    def act(
        self,
        obs: Observation,
        key: StateKey,
        rng: Optional[np.random.Generator],
        greedy: bool = False,
    ) -> PriceAction: ...


def _tilt(probs: np.ndarray, advantages: np.ndarray, beta: float) -> np.ndarray:
    """probs * exp(A / beta), normalized (max-shifted through logsumexp)."""
    scaled = advantages / beta
    log_z = logsumexp(scaled, b=probs)
    out = probs * np.exp(scaled - log_z)
    total = out.sum()
    if not total > 0:
        raise ValueError("Tilted distribution has zero mass.")
    return out / total


def _middle_argmax(p: np.ndarray) -> int:
    ties = np.flatnonzero(p >= p.max() - 1e-12)
    return int(ties[len(ties) // 2])


# ---------------------------------------------------------------------------
# Categorical policy
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CategoricalPolicy:
    """Tabular distribution over the price grid."""

    grid: np.ndarray
    n_customers: int
    mode: str = "factored"
    table: Mapping[StateKey, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        grid = np.array(self.grid, dtype=float)
        if grid.ndim != 1 or grid.size < 1:
            raise ValueError("grid must be a non-empty 1-D array.")
        if self.mode not in POLICY_MODES:
            raise ValueError(
                f"Unknown policy_mode {self.mode!r}, expected one of {POLICY_MODES}."
            )
        if self.n_customers < 1:
            raise ValueError("n_customers must be >= 1.")
        grid.setflags(write=False)
        object.__setattr__(self, "grid", grid)

        table = {}
        for key, probs in self.table.items():
            p = np.array(probs, dtype=float)
            if p.shape != self.shape:
                raise ValueError(
                    f"Probability table of {key} has shape {p.shape}, "
                    f"expected {self.shape}."
                )
            sums = p.sum(axis=-1)
            if (p < 0).any() or np.any(np.abs(sums - 1.0) > _SUM_TOL):
                raise ValueError(f"Probabilities of {key} must be >= 0 and sum to 1.")
            p.setflags(write=False)
            table[key] = p
        object.__setattr__(self, "table", table)

    @property
    def n_actions(self) -> int:
        """Size of one distribution: G (factored) or G**N (joint)."""
        g = self.grid.size
        return g if self.mode == "factored" else g**self.n_customers

    @property
    def shape(self) -> tuple[int, ...]:
        if self.mode == "factored":
            return (self.n_customers, self.grid.size)
        return (self.n_actions,)

    def uniform(self) -> np.ndarray:
        return np.full(self.shape, 1.0 / self.shape[-1])

    def probs(self, key: StateKey) -> np.ndarray:
        """Probabilities of ``key`` (uniform when the key was never updated)."""
        p = self.table.get(key)
        return self.uniform() if p is None else p

    def joint_actions(self) -> np.ndarray:
        """All joint price vectors, shape (G**N, N), in flattened order."""
        return np.array(
            list(itertools.product(self.grid, repeat=self.n_customers)), dtype=float
        )

    def joint_probs(self, key: StateKey) -> np.ndarray:
        """Joint distribution of ``key`` (outer product in factored mode)."""
        p = self.probs(key)
        if self.mode == "joint":
            return p
        out = p[0]
        for row in p[1:]:
            out = np.multiply.outer(out, row).reshape(-1)
        return out

    def with_table(self, updates: Mapping[StateKey, np.ndarray]) -> "CategoricalPolicy":
        return replace(self, table={**self.table, **updates})

    def act(
        self,
        obs: Observation,
        key: StateKey,
        rng: Optional[np.random.Generator],
        greedy: bool = False,
    ) -> PriceAction:
        if greedy or rng is None:
            return greedy_action(self, key)
        return sample_action(self, key, rng)


# ---------------------------------------------------------------------------
# Particle policy
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ParticleSet:
    """M joint price vectors (M, N) and their weights (M,)."""

    locations: np.ndarray
    weights: np.ndarray

    def __post_init__(self) -> None:
        loc = np.array(self.locations, dtype=float)
        w = np.array(self.weights, dtype=float)
        if loc.ndim != 2 or w.shape != (loc.shape[0],):
            raise ValueError("Particle locations (M, N) and weights (M,) mismatch.")
        if (w < 0).any() or abs(w.sum() - 1.0) > _SUM_TOL:
            raise ValueError("Particle weights must be >= 0 and sum to 1.")
        loc.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "locations", loc)
        object.__setattr__(self, "weights", w)

    def __len__(self) -> int:
        return int(self.weights.size)

    @property
    def ess(self) -> float:
        """Effective sample size (sum w)**2 / sum w**2."""
        return float(self.weights.sum() ** 2 / np.sum(self.weights**2))


@dataclass(frozen=True, eq=False)
class ParticlePolicy:
    """Weighted particle measure over joint price vectors, per state key."""

    n_customers: int
    price_min: float
    price_max: float
    particles_per_state: int = 128
    bandwidth: float = 0.3
    resample_threshold: float = 0.5
    rejuvenate: bool = True
    table: Mapping[StateKey, ParticleSet] = field(default_factory=dict)

    def __post_init__(self) -> None:
        errors = []
        if self.n_customers < 1:
            errors.append("n_customers: must be >= 1")
        if not self.price_min < self.price_max:
            errors.append("price bounds: need price_min < price_max")
        if self.particles_per_state < 1:
            errors.append("particles_per_state: must be >= 1")
        if self.bandwidth < 0:
            errors.append("bandwidth: must be >= 0")
        if not 0.0 <= self.resample_threshold <= 1.0:
            errors.append("resample_threshold: must be in [0, 1]")
        if errors:
            raise ValueError("Invalid particle policy:\n  " + "\n  ".join(errors))

        table = dict(self.table)
        shape = (self.particles_per_state, self.n_customers)
        for key, ps in table.items():
            if ps.locations.shape != shape:
                raise ValueError(
                    f"Particles of {key} have shape {ps.locations.shape}, "
                    f"expected {shape}."
                )
            if (ps.locations < self.price_min - 1e-12).any() or (
                ps.locations > self.price_max + 1e-12
            ).any():
                raise ValueError(f"Particles of {key} fall outside the price bounds.")
        object.__setattr__(self, "table", table)

    def initial_particles(self) -> ParticleSet:
        """Halton points spanning [price_min, price_max]**N, uniform weights."""
        m = self.particles_per_state
        sampler = qmc.Halton(d=self.n_customers, scramble=False)
        unit = sampler.random(m)
        loc = qmc.scale(
            unit,
            np.full(self.n_customers, self.price_min),
            np.full(self.n_customers, self.price_max),
        )
        return ParticleSet(locations=loc, weights=np.full(m, 1.0 / m))

    def particles(self, key: StateKey) -> ParticleSet:
        ps = self.table.get(key)
        return self.initial_particles() if ps is None else ps

    def with_table(self, updates: Mapping[StateKey, ParticleSet]) -> "ParticlePolicy":
        return replace(self, table={**self.table, **updates})

    def act(
        self,
        obs: Observation,
        key: StateKey,
        rng: Optional[np.random.Generator],
        greedy: bool = False,
    ) -> PriceAction:
        if greedy or rng is None:
            return greedy_action(self, key)
        return sample_action(self, key, rng)


NonparametricPolicy = Union[CategoricalPolicy, ParticlePolicy]


# ---------------------------------------------------------------------------
# Tilting
# ---------------------------------------------------------------------------


def _check_beta(beta_star: float) -> float:
    beta = float(beta_star)
    if not (np.isfinite(beta) and beta > 0):
        raise ValueError(f"beta_star must be finite and > 0, got {beta_star}.")
    return beta


def _categorical_advantages(
    pi: CategoricalPolicy, key: StateKey, group: AdvantageGroup
) -> np.ndarray:
    """Advantages aligned with ``pi.probs(key)``; raises on coverage gaps."""
    if pi.mode == "factored":
        if len(group.factors) != pi.n_customers:
            raise ValueError(
                f"Factored tilt of {key} needs {pi.n_customers} per-customer "
                f"advantage factors, got {len(group.factors)}."
            )
        rows = []
        for n, factor in enumerate(group.factors):
            actions = np.asarray(factor.actions, dtype=float).reshape(-1)
            if actions.shape != pi.grid.shape or not np.allclose(actions, pi.grid):
                raise ValueError(
                    f"Advantages of {key}, customer {n + 1} do not cover the "
                    "price grid."
                )
            rows.append(factor.advantages)
        return np.vstack(rows)

    if len(group.factors) != 1:
        raise ValueError(f"Joint tilt of {key} needs a single joint advantage factor.")
    factor = group.factors[0]
    actions = np.asarray(factor.actions, dtype=float)
    expected = pi.joint_actions()
    if actions.shape != expected.shape or not np.allclose(actions, expected):
        raise ValueError(
            f"Advantages of {key} do not cover every joint grid action "
            f"({actions.shape[0]} of {expected.shape[0]})."
        )
    return factor.advantages


def tilt_categorical(
    pi: CategoricalPolicy, batch: AdvantageBatch, beta_star: float
) -> CategoricalPolicy:
    """
    Exponentially tilt every key of the batch; other keys are unchanged.

    Raises:
        ValueError: when the batch does not cover the full grid of a visited
            key, or when ``beta_star`` is not a positive finite number.
    """
    beta = _check_beta(beta_star)
    updates = {}
    for key, group in batch.groups.items():
        adv = _categorical_advantages(pi, key, group)
        old = pi.probs(key)
        if pi.mode == "factored":
            updates[key] = np.vstack(
                [_tilt(old[n], adv[n], beta) for n in range(pi.n_customers)]
            )
        else:
            updates[key] = _tilt(old, adv, beta)
    return pi.with_table(updates)


def _particle_advantages(
    pi: ParticlePolicy, key: StateKey, group: AdvantageGroup
) -> np.ndarray:
    if len(group.factors) != 1:
        raise ValueError(f"Particle tilt of {key} needs a single advantage factor.")
    factor = group.factors[0]
    locs = pi.particles(key).locations
    actions = np.asarray(factor.actions, dtype=float)
    if actions.shape != locs.shape or not np.allclose(actions, locs):
        raise ValueError(f"Advantages of {key} are not evaluated on its particles.")
    return factor.advantages


def reweight_particles(
    pi: ParticlePolicy, batch: AdvantageBatch, beta_star: float
) -> ParticlePolicy:
    """Tilt particle weights without resampling."""
    beta = _check_beta(beta_star)
    updates = {}
    for key, group in batch.groups.items():
        adv = _particle_advantages(pi, key, group)
        ps = pi.particles(key)
        weights = _tilt(ps.weights, adv, beta)
        updates[key] = ParticleSet(locations=ps.locations, weights=weights)
    return pi.with_table(updates)


def systematic_resample(
    weights: np.ndarray, rng: Optional[np.random.Generator] = None
) -> np.ndarray:
    """
    Indices drawn by systematic resampling.

    One uniform offset u in [0, 1/M) (0.5/M without a generator) and the points
    u + i/M are located in the cumulative weights.
    """
    m = len(weights)
    offset = rng.random() if rng is not None else 0.5
    positions = (offset + np.arange(m)) / m
    cumulative = np.cumsum(weights)
    cumulative[-1] = 1.0
    return np.searchsorted(cumulative, positions, side="right")


def resample_particles(
    pi: ParticlePolicy,
    keys=None,
    rng: Optional[np.random.Generator] = None,
) -> ParticlePolicy:
    """
    Resample degenerate particle sets of ``keys`` (default: all tabled keys).

    Without a generator the resampling offset is deterministic and no
    rejuvenation noise is added.
    """
    m = pi.particles_per_state
    updates = {}
    for key in pi.table if keys is None else keys:
        ps = pi.particles(key)
        if ps.ess >= pi.resample_threshold * m:
            continue
        idx = systematic_resample(ps.weights, rng)
        locs = ps.locations[idx]
        if pi.rejuvenate and rng is not None and pi.bandwidth > 0:
            locs = locs + rng.normal(0.0, pi.bandwidth, size=locs.shape)
            locs = np.clip(locs, pi.price_min, pi.price_max)
        updates[key] = ParticleSet(locations=locs, weights=np.full(m, 1.0 / m))
    return pi.with_table(updates) if updates else pi


def tilt_particles(
    pi: ParticlePolicy,
    batch: AdvantageBatch,
    beta_star: float,
    rng: Optional[np.random.Generator] = None,
) -> ParticlePolicy:
    """Reweight the batch keys' particles, then resample the degenerate ones."""
    tilted = reweight_particles(pi, batch, beta_star)
    return resample_particles(tilted, keys=batch.keys(), rng=rng)


def tilt(
    pi: NonparametricPolicy,
    batch: AdvantageBatch,
    beta_star: float,
    rng: Optional[np.random.Generator] = None,
) -> NonparametricPolicy:
    if isinstance(pi, CategoricalPolicy):
        return tilt_categorical(pi, batch, beta_star)
    return tilt_particles(pi, batch, beta_star, rng)


# ---------------------------------------------------------------------------
# Acting
# ---------------------------------------------------------------------------


def sample_action(
    pi: NonparametricPolicy, key: StateKey, rng: np.random.Generator
) -> PriceAction:
    """Draw a price vector from the policy at ``key``."""
    if isinstance(pi, CategoricalPolicy):
        p = pi.probs(key)
        g = pi.grid.size
        if pi.mode == "factored":
            idx = [rng.choice(g, p=p[n]) for n in range(pi.n_customers)]
        else:
            flat = rng.choice(pi.n_actions, p=p)
            idx = np.unravel_index(flat, (g,) * pi.n_customers)
        return PriceAction(prices=pi.grid[np.asarray(idx, dtype=int)])

    ps = pi.particles(key)
    i = rng.choice(len(ps), p=ps.weights)
    prices = ps.locations[i].copy()
    if pi.bandwidth > 0:
        prices = prices + rng.normal(0.0, pi.bandwidth, size=prices.shape)
    return PriceAction(prices=np.clip(prices, pi.price_min, pi.price_max))


def greedy_action(pi: NonparametricPolicy, key: StateKey) -> PriceAction:
    """
    Deterministic evaluation action.

    Categorical: the most probable price (ties resolve to the middle of the
    tied set). Particles: the weighted mean location, clipped to bounds.
    """
    if isinstance(pi, CategoricalPolicy):
        p = pi.probs(key)
        if pi.mode == "factored":
            idx = [_middle_argmax(p[n]) for n in range(pi.n_customers)]
        else:
            idx = np.unravel_index(
                _middle_argmax(p), (pi.grid.size,) * pi.n_customers
            )
        return PriceAction(prices=pi.grid[np.asarray(idx, dtype=int)])

    ps = pi.particles(key)
    mean = ps.weights @ ps.locations
    return PriceAction(prices=np.clip(mean, pi.price_min, pi.price_max))


# ---------------------------------------------------------------------------
# Diagnostics
# ---------------------------------------------------------------------------


def _distributions(pi: NonparametricPolicy, key: StateKey) -> list[np.ndarray]:
    if isinstance(pi, CategoricalPolicy):
        p = pi.probs(key)
        return list(p) if pi.mode == "factored" else [p]
    return [pi.particles(key).weights]


def _check_same_support(
    pi_new: NonparametricPolicy, pi_old: NonparametricPolicy, key: StateKey
) -> None:
    if type(pi_new) is not type(pi_old):
        raise ValueError("Policies of different kinds have no common support.")
    if isinstance(pi_new, CategoricalPolicy):
        if (
            pi_new.mode != pi_old.mode
            or pi_new.grid.shape != pi_old.grid.shape
            or not np.allclose(pi_new.grid, pi_old.grid)
            or pi_new.n_customers != pi_old.n_customers
        ):
            raise ValueError("Categorical policies differ in grid or layout.")
        return
    new_loc = pi_new.particles(key).locations
    old_loc = pi_old.particles(key).locations
    if new_loc.shape != old_loc.shape or not np.allclose(new_loc, old_loc):
        raise ValueError(f"Particle locations of {key} differ (support mismatch).")


def expected_kl(
    pi_new: NonparametricPolicy,
    pi_old: NonparametricPolicy,
    visits: Mapping[StateKey, float],
) -> float:
    """
    Visit-weighted mean over keys of KL(pi_new(.|key) || pi_old(.|key)).

    For factored policies the KL of the product is the sum of per-customer
    KLs. Particle policies must share locations (compare before resampling).
    """
    if not visits:
        return 0.0
    total_w = float(sum(visits.values()))
    acc = 0.0
    for key, w in visits.items():
        _check_same_support(pi_new, pi_old, key)
        kl = 0.0
        for q, p in zip(_distributions(pi_new, key), _distributions(pi_old, key)):
            terms = rel_entr(q, p)
            if not np.all(np.isfinite(terms)):
                raise ValueError(
                    f"New policy puts mass outside the old support at {key}."
                )
            kl += float(terms.sum())
        acc += w * kl
    return acc / total_w


def expected_advantage(pi: NonparametricPolicy, batch: AdvantageBatch) -> float:
    """
    State-weighted mean over the batch keys of E_{a~pi}[A(a)].

    The batch must cover the policy's support at each key (full grid, or
    exactly the key's particles).
    """
    if len(batch) == 0:
        raise ValueError("Cannot evaluate the surrogate on an empty advantage batch.")
    values = []
    for key, group in batch.groups.items():
        if isinstance(pi, CategoricalPolicy):
            adv = _categorical_advantages(pi, key, group)
            p = pi.probs(key)
            values.append(float(np.sum(p * adv)))
        else:
            adv = _particle_advantages(pi, key, group)
            values.append(float(pi.particles(key).weights @ adv))
    return float(np.dot(batch.state_weights(), values))


def likelihood_ratio(
    pi_new: NonparametricPolicy, pi_old: NonparametricPolicy, key: StateKey
) -> np.ndarray:
    """
    Importance ratio pi_new / pi_old at ``key`` over the old support.

    Shape (N, G) for factored policies (one ratio row per customer), otherwise
    one ratio per action or particle. Entries outside the old support are 0.
    """
    _check_same_support(pi_new, pi_old, key)
    new = np.asarray(_distributions(pi_new, key))
    old = np.asarray(_distributions(pi_old, key))
    ratio = np.divide(new, old, out=np.zeros_like(new), where=old > 0)
    if isinstance(pi_new, CategoricalPolicy) and pi_new.mode == "factored":
        return ratio
    return ratio[0]
