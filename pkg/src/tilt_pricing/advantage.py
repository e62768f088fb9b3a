# Tilt Pricing - Nonparametric KL trust-region pricing for demand response
# Copyright (c) 2025 Maxence Bernard (maxencebernardhub)
# Licensed under the MIT License. See LICENSE file for details.

"""
Return and advantage estimation, and the tabular value baseline.

Estimators
----------
- ``mc``:    A_t = R_t - V(s_t), R_t the discounted return to the end.
- ``nstep``: A_t = sum_{k<n} lam^k r_{t+k} + lam^n V(s_{t+n}) - V(s_t),
             truncated to the Monte Carlo return near the end.
- ``gae``:   A_t = sum_k (lam * gae_lambda)^k d_{t+k},
             d_t = r_t + lam V(s_{t+1}) - V(s_t), terminal value 0.

The ``*_values`` helpers return one estimate per step (array aligned with
``traj.steps``); the public ``*_advantages`` functions wrap them into a
sampled ``AdvantageBatch`` grouped by state key.

Value baseline
--------------
``ValueTable`` is a per-key table updated by one exact gradient step on the
summed squared residual:

    V(key) <- V(key) + 2 * lr * sum_{visits of key} (R_t - V(key))
"""

from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field

import numpy as np

from .mdp import DiscountSpec, Trajectory
from .state_key import KeyScheme, StateKey, key_of

ESTIMATORS = ("mc", "gae", "nstep")


@dataclass(frozen=True)
class ValueTable:
    """Tabular state-value estimates; unseen keys read as 0."""

    values: Mapping[StateKey, float] = field(default_factory=dict)
    learning_rate: float = 0.05

    def __post_init__(self) -> None:
        if not self.learning_rate > 0:
            raise ValueError(
                f"value learning rate must be > 0, got {self.learning_rate}."
            )
        clean = {k: float(v) for k, v in self.values.items()}
        if not all(np.isfinite(v) for v in clean.values()):
            raise ValueError("ValueTable entries must be finite.")
        object.__setattr__(self, "values", clean)

    def get(self, key: StateKey) -> float:
        return self.values.get(key, 0.0)

    def __len__(self) -> int:
        return len(self.values)


# ---------------------------------------------------------------------------
# Advantage batches
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ActionFactor:
    """
    One factor of a state's action distribution.

    Attributes
    ----------
    actions :
        Array (m,) of prices (per-customer factor) or (m, d) of price vectors
        (joint actions, particles, sampled actions).
    advantages :
        Array (m,) of advantage estimates, one per action.
    probs :
        Array (m,) of old-policy probabilities (or particle weights); sums to 1.
    """

    actions: np.ndarray
    advantages: np.ndarray
    probs: np.ndarray

    def __post_init__(self) -> None:
        actions = np.array(self.actions, dtype=float)
        adv = np.array(self.advantages, dtype=float).reshape(-1)
        probs = np.array(self.probs, dtype=float).reshape(-1)
        if adv.size == 0:
            raise ValueError("An action factor needs at least one action.")
        if actions.shape[0] != adv.size or probs.size != adv.size:
            raise ValueError(
                "actions, advantages and probs must have the same length "
                f"({actions.shape[0]}, {adv.size}, {probs.size})."
            )
        if not np.all(np.isfinite(adv)):
            raise ValueError("Advantage estimates must be finite.")
        if (probs < 0).any() or abs(probs.sum() - 1.0) > 1e-6:
            raise ValueError("Old-policy probabilities must be >= 0 and sum to 1.")
        probs = probs / probs.sum()
        for arr in (actions, adv, probs):
            arr.setflags(write=False)
        object.__setattr__(self, "actions", actions)
        object.__setattr__(self, "advantages", adv)
        object.__setattr__(self, "probs", probs)

    def __len__(self) -> int:
        return int(self.advantages.size)


@dataclass(frozen=True)
class AdvantageGroup:
    """
    Advantage data of one state key.

    The joint action distribution of the key is the product of its factors
    (a single factor for joint policies, one per customer for factored ones).
    ``weight`` is the state's share in the visited-state average (visit
    count, or discount-weighted visit count).
    """

    factors: tuple[ActionFactor, ...]
    visits: int = 1
    weight: float = 1.0

    def __post_init__(self) -> None:
        if not self.factors:
            raise ValueError("An advantage group needs at least one factor.")
        if self.visits < 1:
            raise ValueError(f"visits must be >= 1, got {self.visits}.")
        if not (self.weight > 0 and np.isfinite(self.weight)):
            raise ValueError(f"state weight must be finite and > 0, got {self.weight}.")
        object.__setattr__(self, "factors", tuple(self.factors))


@dataclass(frozen=True)
class AdvantageBatch:
    """Advantage groups keyed by state."""

    groups: Mapping[StateKey, AdvantageGroup]

    def __post_init__(self) -> None:
        object.__setattr__(self, "groups", dict(self.groups))

    def __len__(self) -> int:
        return len(self.groups)

    def keys(self) -> list[StateKey]:
        return list(self.groups)

    @property
    def total_count(self) -> int:
        """Number of state visits represented by the batch."""
        return sum(g.visits for g in self.groups.values())

    def state_weights(self) -> np.ndarray:
        """Normalized state weights, in ``groups`` iteration order."""
        w = np.array([g.weight for g in self.groups.values()], dtype=float)
        return w / w.sum()


# ---------------------------------------------------------------------------
# Returns and per-step estimates
# ---------------------------------------------------------------------------


def discounted_returns(rewards: Iterable[float], lam: float) -> np.ndarray:
    """R_t = r_t + lam * R_{t+1} for every step, R_T = 0."""
    r = np.asarray(list(rewards), dtype=float)
    out = np.zeros_like(r)
    acc = 0.0
    for i in range(r.size - 1, -1, -1):
        acc = r[i] + lam * acc
        out[i] = acc
    return out


def _state_values(
    traj: Trajectory, values: ValueTable, scheme: KeyScheme
) -> np.ndarray:
    return np.array(
        [values.get(key_of(s.observation, scheme)) for s in traj.steps], dtype=float
    )


def _require_complete(traj: Trajectory, what: str) -> None:
    if not traj.complete:
        raise ValueError(f"{what} requires a complete trajectory.")


def nstep_return(
    traj: Trajectory,
    t: int,
    n: int,
    values: ValueTable,
    disc: DiscountSpec,
    scheme: KeyScheme = KeyScheme(),
) -> float:
    """
    n-step bootstrapped return from step index ``t``.

    When ``t + n`` reaches the end of a complete trajectory the bootstrap term
    vanishes and the truncated discounted sum is returned (terminal value 0).
    """
    if n < 1:
        raise ValueError(f"n-step horizon must be >= 1, got {n}.")
    if not 0 <= t < len(traj):
        raise ValueError(f"Step index {t} out of range for length {len(traj)}.")

    rewards = traj.rewards
    end = min(t + n, len(traj))
    k = np.arange(end - t)
    g = float(np.dot(disc.lam**k, rewards[t:end]))
    if end < len(traj):
        bootstrap_key = key_of(traj.steps[end].observation, scheme)
        g += disc.lam ** (end - t) * values.get(bootstrap_key)
    return g


def mc_advantage_values(
    traj: Trajectory, values: ValueTable, disc: DiscountSpec, scheme: KeyScheme
) -> np.ndarray:
    _require_complete(traj, "Monte Carlo advantages")
    return discounted_returns(traj.rewards, disc.lam) - _state_values(
        traj, values, scheme
    )


def gae_advantage_values(
    traj: Trajectory,
    values: ValueTable,
    disc: DiscountSpec,
    gae_lambda: float,
    scheme: KeyScheme,
) -> np.ndarray:
    if not 0.0 <= gae_lambda <= 1.0:
        raise ValueError(f"gae_lambda must be in [0, 1], got {gae_lambda}.")
    _require_complete(traj, "GAE advantages")

    v = _state_values(traj, values, scheme)
    v_next = np.append(v[1:], 0.0)
    deltas = traj.rewards + disc.lam * v_next - v

    out = np.zeros_like(deltas)
    acc = 0.0
    decay = disc.lam * gae_lambda
    for i in range(deltas.size - 1, -1, -1):
        acc = deltas[i] + decay * acc
        out[i] = acc
    return out


def nstep_advantage_values(
    traj: Trajectory,
    values: ValueTable,
    disc: DiscountSpec,
    n: int,
    scheme: KeyScheme,
) -> np.ndarray:
    v = _state_values(traj, values, scheme)
    g = np.array(
        [nstep_return(traj, t, n, values, disc, scheme) for t in range(len(traj))],
        dtype=float,
    )
    return g - v


def advantage_values(
    traj: Trajectory,
    values: ValueTable,
    disc: DiscountSpec,
    scheme: KeyScheme,
    estimator: str = "mc",
    gae_lambda: float = 0.95,
    td_n: int = 3,
) -> np.ndarray:
    """Dispatch to the configured estimator; one estimate per step."""
    if estimator == "mc":
        return mc_advantage_values(traj, values, disc, scheme)
    if estimator == "gae":
        return gae_advantage_values(traj, values, disc, gae_lambda, scheme)
    if estimator == "nstep":
        return nstep_advantage_values(traj, values, disc, td_n, scheme)
    raise ValueError(
        f"Unknown advantage estimator {estimator!r}, expected {ESTIMATORS}."
    )


def sampled_batch(
    trajs: Iterable[Trajectory], advantages: Iterable[np.ndarray], scheme: KeyScheme
) -> AdvantageBatch:
    """
    Group sampled (key, taken action, advantage) triples by key.

    Each visit becomes one action of its key's single factor; visits are
    equally weighted within the key (empirical on-policy distribution).
    """
    buckets: dict[StateKey, tuple[list[np.ndarray], list[float]]] = {}
    for traj, adv in zip(trajs, advantages):
        for step, a in zip(traj.steps, adv):
            key = key_of(step.observation, scheme)
            acts, advs = buckets.setdefault(key, ([], []))
            acts.append(step.action.prices)
            advs.append(float(a))

    groups = {}
    for key, (acts, advs) in buckets.items():
        m = len(advs)
        factor = ActionFactor(
            actions=np.vstack(acts), advantages=advs, probs=np.full(m, 1.0 / m)
        )
        groups[key] = AdvantageGroup(factors=(factor,), visits=m, weight=float(m))
    return AdvantageBatch(groups)


def mc_advantages(
    traj: Trajectory, values: ValueTable, disc: DiscountSpec, scheme: KeyScheme
) -> AdvantageBatch:
    """Monte Carlo advantages R_t - V(key(s_t)), grouped by key."""
    adv = mc_advantage_values(traj, values, disc, scheme)
    return sampled_batch([traj], [adv], scheme)


def gae_advantages(
    traj: Trajectory,
    values: ValueTable,
    disc: DiscountSpec,
    gae_lambda: float,
    scheme: KeyScheme,
) -> AdvantageBatch:
    adv = gae_advantage_values(traj, values, disc, gae_lambda, scheme)
    return sampled_batch([traj], [adv], scheme)


def nstep_advantages(
    traj: Trajectory,
    values: ValueTable,
    disc: DiscountSpec,
    n: int,
    scheme: KeyScheme,
) -> AdvantageBatch:
    adv = nstep_advantage_values(traj, values, disc, n, scheme)
    return sampled_batch([traj], [adv], scheme)


# ---------------------------------------------------------------------------
# Value baseline
# ---------------------------------------------------------------------------


def _residuals(
    values: ValueTable,
    trajs: Iterable[Trajectory],
    disc: DiscountSpec,
    scheme: KeyScheme,
) -> dict[StateKey, list[float]]:
    out: dict[StateKey, list[float]] = {}
    for traj in trajs:
        _require_complete(traj, "value_update")
        returns = discounted_returns(traj.rewards, disc.lam)
        for step, ret in zip(traj.steps, returns):
            key = key_of(step.observation, scheme)
            out.setdefault(key, []).append(float(ret) - values.get(key))
    return out


def value_update(
    values: ValueTable,
    trajs: Iterable[Trajectory],
    disc: DiscountSpec,
    scheme: KeyScheme,
) -> ValueTable:
    """One gradient step of the summed squared error per visited key."""
    residuals = _residuals(values, trajs, disc, scheme)
    updated = dict(values.values)
    step = 2.0 * values.learning_rate
    for key, res in residuals.items():
        updated[key] = values.get(key) + step * float(np.sum(res))
    return ValueTable(values=updated, learning_rate=values.learning_rate)


def value_loss(
    values: ValueTable,
    trajs: Iterable[Trajectory],
    disc: DiscountSpec,
    scheme: KeyScheme,
) -> float:
    """Mean squared residual (R_t - V(s_t))^2 over all visits."""
    residuals = _residuals(values, trajs, disc, scheme)
    flat = [r for res in residuals.values() for r in res]
    return float(np.mean(np.square(flat))) if flat else 0.0
