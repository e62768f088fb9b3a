# Tilt Pricing - Nonparametric KL trust-region pricing for demand response
# Copyright (c) 2025 Maxence Bernard (maxencebernardhub)
# Licensed under the MIT License. See LICENSE file for details.

"""
Demand-response market simulator.

The simulator implements the price-elasticity response of curtailable load,
the service provider's profit, the customers' cost (bill + dissatisfaction)
and the weighted reward:

    c_crit  = d_crit
    c_curt  = max(0, d_curt * (1 + xi_t * (phi - pi_t) / pi_t))
    P(t)    = sum_n (phi_n - pi_t) * c_n
    delta_n = alpha_n / 2 * (d_curt - c_curt)**2 + beta_n * (d_curt - c_curt)
    C(t)    = sum_n (phi_n * c_n + delta_n)
    r       = rho * P(t) - (1 - rho) * C(t)

Both P(t) and C(t) are sums of per-customer terms that only depend on that
customer's price, so every step also reports the per-customer reward split.
``customer_rewards`` evaluates those terms for arbitrary candidate prices and
is what the policy update uses to score grid actions that were not sampled.

Curtailable consumption is clamped at 0 kWh; the dissatisfaction term uses the
clamped value. Prices below wholesale make consumption exceed demand, in which
case the linear dissatisfaction term becomes a credit (formulas are kept
literal in both regimes).

The simulator is a pure transition function: ``reset`` and ``step`` take the
configuration explicitly and demand noise is derived from the episode seed and
the hour, so episodes can run concurrently with independent streams.
"""

from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .mdp import Observation, PriceAction

_PRICE_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class MarketConfig:
    """
    All environment parameters, resolved per customer.

    Attributes
    ----------
    n_customers, horizon :
        N customers and T hours per episode.
    wholesale, elasticity :
        Arrays of shape (T,): pi_t ($/kWh, > 0) and xi_t (< 0).
    crit_demand, curt_demand :
        Arrays of shape (N, T) in kWh.
    alpha, beta :
        Arrays of shape (N,): dissatisfaction curvature and slope.
    rho :
        Reward weight in [0, 1].
    price_min, price_max :
        Retail price bounds.
    price_grid_step :
        Grid spacing for discrete pricing (None when only continuous prices
        are meaningful).
    demand_noise_std :
        Multiplicative Gaussian noise on base demands (0 disables noise).
    peak_hours :
        1-based hours reported as peak hours by evaluation tables.
    """

    n_customers: int
    horizon: int
    wholesale: np.ndarray
    elasticity: np.ndarray
    crit_demand: np.ndarray
    curt_demand: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    rho: float = 0.5
    price_min: float = 0.0
    price_max: float = 12.0
    price_grid_step: Optional[float] = 0.5
    demand_noise_std: float = 0.0
    peak_hours: tuple[int, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        for name in (
            "wholesale",
            "elasticity",
            "crit_demand",
            "curt_demand",
            "alpha",
            "beta",
        ):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "peak_hours", tuple(int(h) for h in self.peak_hours))
        self.validate()

    def validate(self) -> None:
        """
        Check every invariant and raise one ValueError listing all failures.

        Each failure line has the form ``field: reason`` so that a bad config
        file can be fixed in one pass.
        """
        errors: list[str] = []
        n, horizon = self.n_customers, self.horizon

        if n < 1:
            errors.append(f"n_customers: must be >= 1, got {n}")
        if horizon < 1:
            errors.append(f"horizon: must be >= 1, got {horizon}")

        expected = {
            "wholesale": (horizon,),
            "elasticity": (horizon,),
            "crit_demand": (n, horizon),
            "curt_demand": (n, horizon),
            "alpha": (n,),
            "beta": (n,),
        }
        shapes_ok = True
        for name, shape in expected.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                errors.append(f"{name}: expected shape {shape}, got {arr.shape}")
                shapes_ok = False
            elif not np.all(np.isfinite(arr)):
                errors.append(f"{name}: contains non-finite values")
                shapes_ok = False

        if shapes_ok:
            if (self.wholesale <= 0).any():
                errors.append("wholesale: all prices must be > 0")
            if (self.elasticity >= 0).any():
                errors.append("elasticity: all coefficients must be < 0")
            if (self.alpha <= 0).any():
                errors.append("alpha: all values must be > 0")
            if (self.crit_demand < 0).any():
                errors.append("crit_demand: all entries must be >= 0")
            if (self.curt_demand < 0).any():
                errors.append("curt_demand: all entries must be >= 0")

        if not 0.0 <= self.rho <= 1.0:
            errors.append(f"rho: must be in [0, 1], got {self.rho}")
        if not self.price_min < self.price_max:
            errors.append(
                f"price_min/price_max: need price_min < price_max, "
                f"got {self.price_min} >= {self.price_max}"
            )
        if self.price_grid_step is not None:
            if self.price_grid_step <= 0:
                errors.append(
                    f"price_grid_step: must be > 0, got {self.price_grid_step}"
                )
            else:
                span = (self.price_max - self.price_min) / self.price_grid_step
                if abs(span - round(span)) > 1e-6:
                    errors.append(
                        "price_grid_step: must divide price_max - price_min evenly"
                    )
        if self.demand_noise_std < 0:
            errors.append(
                f"demand_noise_std: must be >= 0, got {self.demand_noise_std}"
            )
        bad_hours = [h for h in self.peak_hours if not 1 <= h <= horizon]
        if bad_hours:
            errors.append(f"peak_hours: hours out of 1..{horizon}: {bad_hours}")

        if errors:
            raise ValueError("Invalid market configuration:\n  " + "\n  ".join(errors))

    @property
    def price_grid(self) -> np.ndarray:
        """Ordered admissible prices of the discrete mode."""
        if self.price_grid_step is None:
            raise ValueError("price_grid_step is not configured (continuous only).")
        count = int(round((self.price_max - self.price_min) / self.price_grid_step)) + 1
        return np.linspace(self.price_min, self.price_max, count)

    def is_on_grid(self, prices: Sequence[float]) -> bool:
        grid = self.price_grid
        p = np.asarray(prices, dtype=float)
        return bool(np.all(np.min(np.abs(p[:, None] - grid[None, :]), axis=1) < 1e-9))


@dataclass(frozen=True, eq=False)
class StepOutcome:
    """
    Result of one market hour.

    Attributes
    ----------
    consumption :
        Array (N, 2) of realized (critical, curtailable) consumption in kWh.
    profit, cost :
        P(t) and C(t) in $.
    dissatisfaction :
        Array (N,) of delta_{t,n} in $.
    reward :
        rho * P(t) - (1 - rho) * C(t).
    per_customer_reward :
        Array (N,) whose sum equals ``reward``.
    """

    consumption: np.ndarray
    profit: float
    cost: float
    dissatisfaction: np.ndarray
    reward: float
    per_customer_reward: np.ndarray


def demand_for_hour(cfg: MarketConfig, t: int, episode_seed: int) -> np.ndarray:
    """
    Base demand (N, 2) of hour ``t`` (1-based) for an episode.

    Without noise this is the configured profile. With noise, each entry is
    scaled by ``1 + demand_noise_std * z`` (z standard normal, factor clipped at
    0); z is drawn from a stream keyed by (episode_seed, t).
    """
    demand = np.column_stack((cfg.crit_demand[:, t - 1], cfg.curt_demand[:, t - 1]))
    if cfg.demand_noise_std > 0:
        rng = np.random.default_rng([int(episode_seed), int(t)])
        factor = 1.0 + cfg.demand_noise_std * rng.standard_normal(demand.shape)
        demand = demand * np.clip(factor, 0.0, None)
    return demand


def reset(cfg: MarketConfig, seed: int) -> Observation:
    """
    Start an episode: observation at t = 1 with zero previous consumption.

    The configuration is validated on construction, so an invalid config never
    reaches this point (``MarketConfig`` raises with field-level diagnostics).
    """
    if seed < 0:
        raise ValueError(f"Episode seed must be >= 0, got {seed}.")
    demand = demand_for_hour(cfg, 1, seed)
    return Observation(
        t=1,
        base_demand=demand,
        prev_consumption=np.zeros_like(demand),
        episode_seed=int(seed),
    )


def _response(
    cfg: MarketConfig, t: int, base_demand: np.ndarray, prices: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """
    Vectorized per-customer response for candidate prices.

    ``prices`` has shape (..., N); returns (c_crit, c_curt, dissatisfaction,
    reward_n), each of shape (..., N).
    """
    pi_t = cfg.wholesale[t - 1]
    xi_t = cfg.elasticity[t - 1]
    d_crit = base_demand[:, 0]
    d_curt = base_demand[:, 1]

    c_crit = np.broadcast_to(d_crit, prices.shape)
    c_curt = np.maximum(0.0, d_curt * (1.0 + xi_t * (prices - pi_t) / pi_t))
    shed = d_curt - c_curt
    dissatisfaction = cfg.alpha / 2.0 * shed**2 + cfg.beta * shed

    c_total = c_crit + c_curt
    profit_n = (prices - pi_t) * c_total
    cost_n = prices * c_total + dissatisfaction
    reward_n = cfg.rho * profit_n - (1.0 - cfg.rho) * cost_n
    return c_crit, c_curt, dissatisfaction, reward_n


def customer_rewards(cfg: MarketConfig, obs: Observation, prices) -> np.ndarray:
    """
    Per-customer reward terms for candidate prices at the observation's hour.

    Args:
        cfg: Market configuration.
        obs: Observation providing the hour and base demands.
        prices: Array of shape (..., N); entry [..., n] is a candidate price for
            customer n.

    Returns:
        Array of the same shape with each customer's reward contribution.
    """
    p = np.asarray(prices, dtype=float)
    return _response(cfg, obs.t, obs.base_demand, p)[3]


def step(
    obs: Observation,
    act: PriceAction,
    cfg: MarketConfig,
    on_grid: bool = False,
) -> tuple[Optional[Observation], StepOutcome]:
    """
    Apply retail prices for hour ``obs.t`` and advance the episode.

    The simulator itself is mode-agnostic: any price in the bounds is
    accepted. Discrete-mode callers pass ``on_grid=True`` to also require
    every price to be a member of the configured grid.

    Returns:
        (next_observation, outcome). ``next_observation`` is None once hour T
        has been played (terminal).

    Raises:
        ValueError: if a price is outside [price_min, price_max], if the
            action has the wrong length, if ``obs`` is past the horizon, or
            if ``on_grid`` is set and a price is off the grid.
    """
    if obs.t > cfg.horizon:
        raise ValueError(
            f"Cannot step a terminal observation (t={obs.t} > horizon={cfg.horizon})."
        )
    prices = act.prices
    if prices.shape != (cfg.n_customers,):
        raise ValueError(
            f"Expected {cfg.n_customers} prices, got shape {prices.shape}."
        )
    if (prices < cfg.price_min - _PRICE_TOL).any() or (
        prices > cfg.price_max + _PRICE_TOL
    ).any():
        raise ValueError(
            f"Prices {prices.tolist()} outside bounds "
            f"[{cfg.price_min}, {cfg.price_max}]."
        )
    if on_grid and not cfg.is_on_grid(prices):
        raise ValueError(f"Prices {prices.tolist()} are not on the price grid.")

    c_crit, c_curt, dissatisfaction, reward_n = _response(
        cfg, obs.t, obs.base_demand, prices
    )
    pi_t = cfg.wholesale[obs.t - 1]
    c_total = c_crit + c_curt
    profit = float(np.sum((prices - pi_t) * c_total))
    cost = float(np.sum(prices * c_total + dissatisfaction))
    reward = cfg.rho * profit - (1.0 - cfg.rho) * cost

    consumption = np.column_stack((c_crit, c_curt))
    outcome = StepOutcome(
        consumption=consumption,
        profit=profit,
        cost=cost,
        dissatisfaction=dissatisfaction,
        reward=float(reward),
        per_customer_reward=reward_n,
    )

    if obs.t == cfg.horizon:
        return None, outcome

    next_obs = Observation(
        t=obs.t + 1,
        base_demand=demand_for_hour(cfg, obs.t + 1, obs.episode_seed),
        prev_consumption=consumption,
        episode_seed=obs.episode_seed,
    )
    return next_obs, outcome


def load_reduction(outcome: StepOutcome, obs: Observation) -> np.ndarray:
    """Per-customer load reduction (kWh): base demand minus consumption."""
    return obs.base_demand.sum(axis=1) - outcome.consumption.sum(axis=1)


def unit_profit(cfg: MarketConfig, t: int, prices) -> np.ndarray:
    """Retail minus wholesale price per customer at hour ``t``."""
    return np.asarray(prices, dtype=float) - cfg.wholesale[t - 1]
