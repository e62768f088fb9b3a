# Tilt Pricing - Nonparametric KL trust-region pricing for demand response
# Copyright (c) 2025 Maxence Bernard (maxencebernardhub)
# Licensed under the MIT License. See LICENSE file for details.

"""
Comparators for the trust-region learner.

- ``RandomPolicy``: uniform prices (grid or interval).
- ``WholesalePolicy``: retail price equal to the hour's wholesale price
  (neutral point of the elasticity model: no response, zero unit profit).
- Tabular Q-learning over (state key, grid price) with one independent Q
  table per customer, trained on the per-customer reward split. Behavior is
  epsilon-greedy with epsilon decaying linearly over all training episodes;
  greedy ties resolve to the first (lowest) price.

Comparators consume the same number of episodes as the learner
(iterations x episodes_per_iteration) and report metrics in the same
format; beta_star and expected_kl are 0 for them.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .market import MarketConfig
from .mdp import Observation, PriceAction, Trajectory, episode_reward
from .state_key import StateKey, key_of
from .trainer import MetricsRecord, TrainConfig, episode_streams, rollout

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class RandomPolicy:
    """Uniformly random prices; the grid when given, else the interval."""

    n_customers: int
    price_min: float
    price_max: float
    grid: Optional[np.ndarray] = None

    @classmethod
    def for_market(cls, market: MarketConfig, discrete: bool = True) -> "RandomPolicy":
        grid = market.price_grid if discrete and market.price_grid_step else None
        return cls(market.n_customers, market.price_min, market.price_max, grid)

    def act(
        self,
        obs: Observation,
        key: StateKey,
        rng: Optional[np.random.Generator],
        greedy: bool = False,
    ) -> PriceAction:
        if greedy or rng is None:
            if self.grid is not None:
                mid = self.grid[(self.grid.size - 1) // 2]
            else:
                mid = 0.5 * (self.price_min + self.price_max)
            return PriceAction(prices=np.full(self.n_customers, mid))
        if self.grid is not None:
            return PriceAction(prices=rng.choice(self.grid, size=self.n_customers))
        return PriceAction(
            prices=rng.uniform(self.price_min, self.price_max, size=self.n_customers)
        )


@dataclass(frozen=True, eq=False)
class WholesalePolicy:
    """phi_{t,n} = pi_t for every customer."""

    market: MarketConfig

    def act(
        self,
        obs: Observation,
        key: StateKey,
        rng: Optional[np.random.Generator],
        greedy: bool = False,
    ) -> PriceAction:
        m = self.market
        price = float(np.clip(m.wholesale[obs.t - 1], m.price_min, m.price_max))
        return PriceAction(prices=np.full(m.n_customers, price))


# ---------------------------------------------------------------------------
# Q-learning
# ---------------------------------------------------------------------------


@dataclass
class QTable:
    """Per-customer action values: key -> array (N, G), zero-initialized."""

    grid: np.ndarray
    n_customers: int
    values: dict[StateKey, np.ndarray] = field(default_factory=dict)

    def row(self, key: StateKey) -> np.ndarray:
        if key not in self.values:
            self.values[key] = np.zeros((self.n_customers, len(self.grid)))
        return self.values[key]

    def greedy_indices(self, key: StateKey) -> np.ndarray:
        # np.argmax returns the first maximum
        return np.argmax(self.row(key), axis=1)

    def act(
        self,
        obs: Observation,
        key: StateKey,
        rng: Optional[np.random.Generator],
        greedy: bool = True,
    ) -> PriceAction:
        return PriceAction(prices=self.grid[self.greedy_indices(key)])


@dataclass(frozen=True, eq=False)
class EpsilonGreedy:
    """Behavior policy of the Q-learning comparator."""

    q: QTable
    epsilon: float

    def act(
        self,
        obs: Observation,
        key: StateKey,
        rng: Optional[np.random.Generator],
        greedy: bool = False,
    ) -> PriceAction:
        idx = self.q.greedy_indices(key).copy()
        if not greedy and rng is not None and self.epsilon > 0:
            explore = rng.random(self.q.n_customers) < self.epsilon
            idx[explore] = rng.integers(len(self.q.grid), size=int(explore.sum()))
        return PriceAction(prices=self.q.grid[idx])


def epsilon_at(episode: int, total: int, start: float, end: float) -> float:
    """Linear decay from ``start`` (first episode) to ``end`` (last episode)."""
    if total <= 1:
        return start
    frac = min(max(episode / (total - 1), 0.0), 1.0)
    return start + (end - start) * frac


def q_update(
    q: QTable,
    key: StateKey,
    customer: int,
    action: int,
    reward: float,
    next_key: Optional[StateKey],
    lr: float,
    lam: float = 1.0,
) -> float:
    """
    One-step Q update of a customer's table; returns the TD error.

    The target is ``reward`` at terminal transitions (``next_key`` None) and
    ``reward + lam * max_a Q(next_key, a)`` otherwise.
    """
    target = reward
    if next_key is not None:
        target += lam * float(np.max(q.row(next_key)[customer]))
    row = q.row(key)
    td = target - row[customer, action]
    row[customer, action] += lr * td
    return float(td)


def _grid_index(grid: np.ndarray, prices: np.ndarray) -> np.ndarray:
    return np.abs(prices[:, None] - grid[None, :]).argmin(axis=1)


def learn_from_trajectory(
    q: QTable, traj: Trajectory, cfg: TrainConfig
) -> list[float]:
    """Apply Q updates for every step of an episode, in time order."""
    errors = []
    keys = [key_of(s.observation, cfg.scheme) for s in traj.steps]
    for i, s in enumerate(traj.steps):
        next_key = keys[i + 1] if i + 1 < len(keys) else None
        idx = _grid_index(q.grid, s.action.prices)
        for n in range(q.n_customers):
            errors.append(
                q_update(
                    q,
                    keys[i],
                    n,
                    int(idx[n]),
                    float(s.per_customer_reward[n]),
                    next_key,
                    cfg.q_learning_rate,
                    cfg.discount.lam,
                )
            )
    return errors


def train_qlearning(
    market: MarketConfig, cfg: TrainConfig
) -> tuple[QTable, list[MetricsRecord]]:
    """
    Q-learning comparator with the learner's episode budget.

    Raises:
        ValueError: in continuous action mode (a price grid is required).
    """
    cfg.validate()
    if cfg.action_mode != "discrete" or market.price_grid_step is None:
        raise ValueError("Q-learning requires the discrete action mode.")

    q = QTable(grid=market.price_grid, n_customers=market.n_customers)
    total = cfg.iterations * cfg.episodes_per_iteration
    root = np.random.SeedSequence([cfg.seed, 1])
    metrics = []
    start = time.perf_counter()

    episode = 0
    for k, iteration_ss in enumerate(root.spawn(cfg.iterations), start=1):
        rewards, td_errors = [], []
        for episode_seed, rng in episode_streams(
            iteration_ss, cfg.episodes_per_iteration
        ):
            eps = epsilon_at(episode, total, cfg.epsilon_start, cfg.epsilon_end)
            behavior = EpsilonGreedy(q, eps)
            traj = rollout(
                behavior, market, cfg.scheme, episode_seed, rng, on_grid=True
            )
            rewards.append(episode_reward(traj))
            td_errors.extend(learn_from_trajectory(q, traj, cfg))
            episode += 1

        metrics.append(
            MetricsRecord(
                iteration=k,
                mean_reward=float(np.mean(rewards)),
                std_reward=float(np.std(rewards)),
                beta_star=0.0,
                expected_kl=0.0,
                value_loss=float(np.mean(np.square(td_errors))),
                seconds=time.perf_counter() - start if cfg.record_wall_clock else 0.0,
            )
        )
        logger.debug("q-learning iter %d: reward %.3f", k, metrics[-1].mean_reward)
    return q, metrics


def run_random(market: MarketConfig, cfg: TrainConfig) -> list[MetricsRecord]:
    """Random-policy comparator with the learner's episode budget."""
    cfg.validate()
    policy = RandomPolicy.for_market(market, discrete=cfg.action_mode == "discrete")
    root = np.random.SeedSequence([cfg.seed, 2])
    metrics = []
    start = time.perf_counter()
    for k, iteration_ss in enumerate(root.spawn(cfg.iterations), start=1):
        rewards = [
            episode_reward(rollout(policy, market, cfg.scheme, episode_seed, rng))
            for episode_seed, rng in episode_streams(
                iteration_ss, cfg.episodes_per_iteration
            )
        ]
        metrics.append(
            MetricsRecord(
                iteration=k,
                mean_reward=float(np.mean(rewards)),
                std_reward=float(np.std(rewards)),
                beta_star=0.0,
                expected_kl=0.0,
                value_loss=0.0,
                seconds=time.perf_counter() - start if cfg.record_wall_clock else 0.0,
            )
        )
    return metrics
