# Tilt Pricing - Nonparametric KL trust-region pricing for demand response
# Copyright (c) 2025 Maxence Bernard (maxencebernardhub)
# Licensed under the MIT License. See LICENSE file for details.

"""
MDP interaction records for Tilt Pricing.

This module defines the value objects exchanged between the market simulator,
the advantage estimators and the trainer:

- ``Observation``: what the pricing agent sees at hour t (base demands of
  the hour and the consumption realized in the previous hour),
- ``PriceAction``: one retail price per customer,
- ``Step`` / ``Trajectory``: the recorded interaction of one episode,
- ``DiscountSpec``: the discount factor lambda.

Consumption lag
---------------
The consumption of hour t depends on the price chosen at hour t, so an
observation cannot carry it without making the transition circular. The
observation therefore carries the *previous* hour's consumption; the current
hour's consumption is part of the transition output (``StepOutcome``).

Step indices
------------
Python helpers below use 0-based step indices (``traj.steps[i]``), while the
``Observation.t`` field keeps the 1-based hour of the day (1..T).

All records are frozen dataclasses holding read-only numpy arrays, so they can
be shared between workers without copying.
"""

from collections.abc import Sequence
from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional

import numpy as np
import pandas as pd

if TYPE_CHECKING:  # pragma: no cover
    from .market import StepOutcome


def _frozen_array(values, shape_hint: str) -> np.ndarray:
    arr = np.array(values, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"Non-finite values in {shape_hint}.")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Observation:
    """
    State observed by the pricing agent at hour ``t``.

    Attributes
    ----------
    t :
        Hour of the day, 1-based (1..T).
    base_demand :
        Array of shape (N, 2): (critical, curtailable) demand in kWh of
        each customer for hour t.
    prev_consumption :
        Array of shape (N, 2): (critical, curtailable) consumption realized
        during hour t - 1 (zeros at t = 1).
    episode_seed :
        Identifier of the episode random stream (demand noise is a pure
        function of this seed and the hour).
    """

    t: int
    base_demand: np.ndarray
    prev_consumption: np.ndarray
    episode_seed: int = 0

    def __post_init__(self) -> None:
        demand = _frozen_array(self.base_demand, "base_demand")
        prev = _frozen_array(self.prev_consumption, "prev_consumption")
        if demand.ndim != 2 or demand.shape[1] != 2:
            raise ValueError("base_demand must have shape (n_customers, 2).")
        if prev.shape != demand.shape:
            raise ValueError(
                "prev_consumption must have the same shape as base_demand."
            )
        if self.t < 1:
            raise ValueError(f"Observation hour must be >= 1, got {self.t}.")
        if (demand < 0).any() or (prev < 0).any():
            raise ValueError("Demands and consumptions must be non-negative.")
        object.__setattr__(self, "base_demand", demand)
        object.__setattr__(self, "prev_consumption", prev)

    @property
    def n_customers(self) -> int:
        return int(self.base_demand.shape[0])

    @property
    def total_demand(self) -> float:
        """Total base demand (critical + curtailable) over all customers."""
        return float(self.base_demand.sum())


@dataclass(frozen=True)
class PriceAction:
    """Retail price per customer ($/kWh)."""

    prices: np.ndarray

    def __post_init__(self) -> None:
        prices = _frozen_array(self.prices, "prices")
        if prices.ndim != 1:
            raise ValueError("PriceAction.prices must be a 1-D array.")
        object.__setattr__(self, "prices", prices)


@dataclass(frozen=True)
class Step:
    """One recorded transition."""

    observation: Observation
    action: PriceAction
    reward: float
    per_customer_reward: np.ndarray
    outcome: Optional["StepOutcome"] = None

    def __post_init__(self) -> None:
        per_customer = _frozen_array(self.per_customer_reward, "per_customer_reward")
        if abs(float(per_customer.sum()) - float(self.reward)) > 1e-9 * max(
            1.0, abs(float(self.reward))
        ):
            raise ValueError(
                "Step reward must equal the sum of per-customer rewards "
                f"({self.reward} != {per_customer.sum()})."
            )
        object.__setattr__(self, "per_customer_reward", per_customer)


@dataclass(frozen=True)
class Trajectory:
    """Sequence of steps of one episode; ``complete`` is set when t reached T."""

    steps: tuple[Step, ...]
    complete: bool

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def rewards(self) -> np.ndarray:
        return np.array([s.reward for s in self.steps], dtype=float)

    @property
    def per_customer_rewards(self) -> np.ndarray:
        """Array of shape (len, N)."""
        if not self.steps:
            return np.zeros((0, 0))
        return np.vstack([s.per_customer_reward for s in self.steps])


@dataclass(frozen=True)
class DiscountSpec:
    """Discount factor lambda in (0, 1]."""

    lam: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 < self.lam <= 1.0:
            raise ValueError(f"discount must be in (0, 1], got {self.lam}.")


def discounted_sum(rewards: Sequence[float], lam: float) -> float:
    """Return sum_k lam**k * rewards[k]."""
    r = np.asarray(rewards, dtype=float)
    if r.size == 0:
        return 0.0
    return float(np.dot(lam ** np.arange(r.size), r))


def total_return(traj: Trajectory, disc: DiscountSpec, t: int) -> float:
    """
    Discounted return R_t of a complete trajectory from step index ``t``.

    Raises:
        ValueError: if the trajectory is incomplete (use an n-step estimate
            instead) or if ``t`` is outside the trajectory.
    """
    if not traj.complete:
        raise ValueError(
            "total_return requires a complete trajectory; "
            "use nstep_return for partial ones."
        )
    if not 0 <= t < len(traj):
        raise ValueError(f"Step index {t} out of range for length {len(traj)}.")
    return discounted_sum(traj.rewards[t:], disc.lam)


def episode_reward(traj: Trajectory) -> float:
    """Undiscounted sum of step rewards (0 for an empty trajectory)."""
    return float(traj.rewards.sum()) if traj.steps else 0.0


def trajectory_to_frame(traj: Trajectory) -> pd.DataFrame:
    """
    Flatten a trajectory into one row per step (debug dump format).

    Columns: t, then for each customer n (1-based) price_n, crit_demand_n,
    curt_demand_n, crit_consumption_n, curt_consumption_n, and finally reward.
    Consumption columns are NaN when a step carries no outcome.
    """
    rows = []
    for step in traj.steps:
        obs = step.observation
        row: dict[str, float] = {"t": obs.t}
        consumption = (
            step.outcome.consumption
            if step.outcome is not None
            else np.full_like(obs.base_demand, np.nan)
        )
        for n in range(obs.n_customers):
            idx = n + 1
            row[f"price_{idx}"] = float(step.action.prices[n])
            row[f"crit_demand_{idx}"] = float(obs.base_demand[n, 0])
            row[f"curt_demand_{idx}"] = float(obs.base_demand[n, 1])
            row[f"crit_consumption_{idx}"] = float(consumption[n, 0])
            row[f"curt_consumption_{idx}"] = float(consumption[n, 1])
        row["reward"] = float(step.reward)
        rows.append(row)
    return pd.DataFrame(rows)
