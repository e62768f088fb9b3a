# Tilt Pricing - Nonparametric KL trust-region pricing for demand response
# Copyright (c) 2025 Maxence Bernard (maxencebernardhub)
# Licensed under the MIT License. See LICENSE file for details.

"""
On-policy actor-critic training loop with closed-form trust-region updates.

Each iteration k:

1. collects ``episodes_per_iteration`` complete episodes under pi_k,
2. estimates per-step advantages with the current value table V_k,
3. records the value loss and takes one value-table gradient step,
4. scores the policy support at every visited key (counterfactual batch,
   centered per key),
5. solves the one-dimensional dual for beta*,
6. tilts pi_k into pi_{k+1},
7. emits one MetricsRecord.

Random streams
--------------
A ``numpy.random.SeedSequence(seed)`` is spawned once per iteration and each
iteration's sequence once per episode plus once for the update step. An
episode's sequence yields the market seed (demand noise) and the action
stream, so any episode can be replayed on its own and two runs with the same
seed produce identical metrics.
"""

import logging
import time
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .advantage import (
    ESTIMATORS,
    ValueTable,
    advantage_values,
    value_loss,
    value_update,
)
from .counterfactual import counterfactual_batch
from .dual import TrustRegionSpec, solve_beta
from .market import MarketConfig, load_reduction, reset, step
from .mdp import DiscountSpec, Step, Trajectory, episode_reward
from .policy import (
    POLICY_MODES,
    CategoricalPolicy,
    NonparametricPolicy,
    ParticlePolicy,
    PricingPolicy,
    tilt,
)
from .state_key import KeyScheme, key_of

logger = logging.getLogger(__name__)

ACTION_MODES = ("discrete", "continuous")
BASELINES = ("qlearning", "random")


class TrainingError(RuntimeError):
    """A training iteration failed; ``iteration`` is 1-based."""

    def __init__(
        self, iteration: int, message: str, cause: Optional[BaseException] = None
    ) -> None:
        super().__init__(f"Training failed at iteration {iteration}: {message}")
        self.iteration = iteration
        self.cause = cause


@dataclass(frozen=True)
class TrainConfig:
    """
    Training settings (everything besides the market).

    Attributes
    ----------
    iterations, episodes_per_iteration, seed :
        Outer-loop budget and root seed.
    trust, discount, scheme :
        Trust region, discount and state keying.
    estimator, gae_lambda, td_n, value_lr :
        Advantage estimator and value-table learning rate.
    action_mode, policy_mode :
        ``discrete`` (categorical, ``factored`` or ``joint``) or
        ``continuous`` (particles).
    particles_per_state, bandwidth, resample_threshold, rejuvenate :
        Particle policy settings.
    baselines :
        Comparators trained alongside by the CLI.
    q_learning_rate, epsilon_start, epsilon_end :
        Q-learning comparator settings.
    record_wall_clock :
        Report cumulative seconds (otherwise 0.0).
    """

    iterations: int = 200
    episodes_per_iteration: int = 8
    seed: int = 0
    trust: TrustRegionSpec = field(default_factory=TrustRegionSpec)
    discount: DiscountSpec = field(default_factory=DiscountSpec)
    scheme: KeyScheme = field(default_factory=KeyScheme)
    estimator: str = "mc"
    gae_lambda: float = 0.95
    td_n: int = 3
    value_lr: float = 0.05
    action_mode: str = "discrete"
    policy_mode: str = "factored"
    particles_per_state: int = 128
    bandwidth: float = 0.3
    resample_threshold: float = 0.5
    rejuvenate: bool = True
    baselines: tuple[str, ...] = ()
    q_learning_rate: float = 0.1
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    record_wall_clock: bool = True

    def problems(self) -> list[str]:
        """One ``field: reason`` line per invalid setting."""
        errors: list[str] = []
        if self.iterations < 1:
            errors.append(f"iterations: must be >= 1, got {self.iterations}")
        if self.episodes_per_iteration < 1:
            errors.append(
                "episodes_per_iteration: must be >= 1, "
                f"got {self.episodes_per_iteration}"
            )
        if self.seed < 0:
            errors.append(f"seed: must be >= 0, got {self.seed}")
        if self.estimator not in ESTIMATORS:
            errors.append(
                f"advantage_estimator: expected one of {ESTIMATORS}, "
                f"got {self.estimator!r}"
            )
        if not 0.0 <= self.gae_lambda <= 1.0:
            errors.append(f"gae_lambda: must be in [0, 1], got {self.gae_lambda}")
        if self.td_n < 1:
            errors.append(f"td_n: must be >= 1, got {self.td_n}")
        if not self.value_lr > 0:
            errors.append(f"value_lr: must be > 0, got {self.value_lr}")
        elif self.value_lr * self.episodes_per_iteration >= 1.0:
            # each key is visited at most once per episode
            errors.append(
                "value_lr: value_lr * episodes_per_iteration must be < 1, got "
                f"{self.value_lr} * {self.episodes_per_iteration}"
            )
        if self.action_mode not in ACTION_MODES:
            errors.append(
                f"action_mode: expected one of {ACTION_MODES}, got {self.action_mode!r}"
            )
        if self.policy_mode not in POLICY_MODES:
            errors.append(
                f"policy_mode: expected one of {POLICY_MODES}, got {self.policy_mode!r}"
            )
        if self.particles_per_state < 1:
            errors.append("particles_per_state: must be >= 1")
        if self.bandwidth < 0:
            errors.append(f"bandwidth: must be >= 0, got {self.bandwidth}")
        if not 0.0 <= self.resample_threshold <= 1.0:
            errors.append("resample_threshold: must be in [0, 1]")
        unknown = [b for b in self.baselines if b not in BASELINES]
        if unknown:
            errors.append(f"baselines: unknown comparators {unknown}")
        if not 0.0 < self.q_learning_rate <= 1.0:
            errors.append("learning_rate: Q-learning rate must be in (0, 1]")
        for name in ("epsilon_start", "epsilon_end"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                errors.append(f"{name}: must be in [0, 1]")
        return errors

    def validate(self) -> None:
        errors = self.problems()
        if errors:
            raise ValueError(
                "Invalid training configuration:\n  " + "\n  ".join(errors)
            )


@dataclass(frozen=True)
class MetricsRecord:
    iteration: int
    mean_reward: float
    std_reward: float
    beta_star: float
    expected_kl: float
    value_loss: float
    seconds: float


def episode_streams(
    parent: np.random.SeedSequence, episodes: int
) -> list[tuple[int, np.random.Generator]]:
    """(market seed, action generator) for each episode of ``parent``."""
    out = []
    for child in parent.spawn(episodes):
        env_ss, act_ss = child.spawn(2)
        out.append((int(env_ss.generate_state(1)[0]), np.random.default_rng(act_ss)))
    return out


def rollout(
    policy: PricingPolicy,
    market: MarketConfig,
    scheme: KeyScheme,
    episode_seed: int,
    rng: Optional[np.random.Generator],
    greedy: bool = False,
    on_grid: bool = False,
) -> Trajectory:
    """Play one complete episode; ``on_grid`` requires grid prices at every step."""
    obs = reset(market, episode_seed)
    steps = []
    while obs is not None:
        key = key_of(obs, scheme)
        action = policy.act(obs, key, rng, greedy)
        next_obs, outcome = step(obs, action, market, on_grid=on_grid)
        steps.append(
            Step(
                observation=obs,
                action=action,
                reward=outcome.reward,
                per_customer_reward=outcome.per_customer_reward,
                outcome=outcome,
            )
        )
        obs = next_obs
    return Trajectory(steps=tuple(steps), complete=True)


def initial_policy(market: MarketConfig, cfg: TrainConfig) -> NonparametricPolicy:
    """Uniform policy of the configured action mode."""
    if cfg.action_mode == "discrete":
        if market.price_grid_step is None:
            raise ValueError("price_grid_step: required in discrete action mode")
        return CategoricalPolicy(
            grid=market.price_grid, n_customers=market.n_customers, mode=cfg.policy_mode
        )
    return ParticlePolicy(
        n_customers=market.n_customers,
        price_min=market.price_min,
        price_max=market.price_max,
        particles_per_state=cfg.particles_per_state,
        bandwidth=cfg.bandwidth,
        resample_threshold=cfg.resample_threshold,
        rejuvenate=cfg.rejuvenate,
    )


def _check_rewards(iteration: int, rewards: Sequence[float]) -> None:
    if not np.all(np.isfinite(rewards)):
        raise TrainingError(iteration, "non-finite episode reward")


def train(
    market: MarketConfig,
    cfg: TrainConfig,
    policy: Optional[NonparametricPolicy] = None,
) -> tuple[NonparametricPolicy, list[MetricsRecord]]:
    """
    Run ``cfg.iterations`` trust-region iterations.

    Args:
        market: Market configuration.
        cfg: Training configuration.
        policy: Starting policy (default: uniform policy of the action mode).

    Returns:
        (final policy, one MetricsRecord per iteration).

    Raises:
        ValueError: on invalid or inconsistent configurations.
        TrainingError: when an iteration fails, with the iteration number.
    """
    cfg.validate()
    policy = initial_policy(market, cfg) if policy is None else policy
    values = ValueTable(learning_rate=cfg.value_lr)
    root = np.random.SeedSequence(cfg.seed)
    metrics: list[MetricsRecord] = []
    start = time.perf_counter()

    logger.info(
        "Training %s policy: %d iterations x %d episodes, delta=%g",
        cfg.action_mode,
        cfg.iterations,
        cfg.episodes_per_iteration,
        cfg.trust.delta,
    )

    for k, iteration_ss in enumerate(root.spawn(cfg.iterations), start=1):
        episode_ss, update_ss = iteration_ss.spawn(2)
        try:
            trajs = [
                rollout(
                    policy,
                    market,
                    cfg.scheme,
                    episode_seed,
                    rng,
                    on_grid=cfg.action_mode == "discrete",
                )
                for episode_seed, rng in episode_streams(
                    episode_ss, cfg.episodes_per_iteration
                )
            ]
            rewards = [episode_reward(t) for t in trajs]
            _check_rewards(k, rewards)

            advantages = [
                advantage_values(
                    t,
                    values,
                    cfg.discount,
                    cfg.scheme,
                    cfg.estimator,
                    cfg.gae_lambda,
                    cfg.td_n,
                )
                for t in trajs
            ]
            loss = value_loss(values, trajs, cfg.discount, cfg.scheme)
            values = value_update(values, trajs, cfg.discount, cfg.scheme)

            batch = counterfactual_batch(
                trajs,
                advantages,
                policy,
                market,
                cfg.scheme,
                disc=cfg.discount,
                rho_weighted_states=cfg.trust.rho_weighted_states,
                centered=True,
            )
            update_rng = np.random.default_rng(update_ss)
            solution = solve_beta(
                batch, cfg.trust, seed=int(update_rng.integers(2**32))
            )
            policy = tilt(policy, batch, solution.beta_star, rng=update_rng)
        except TrainingError:
            raise
        except (ValueError, FloatingPointError) as exc:
            raise TrainingError(k, str(exc), cause=exc) from exc

        record = MetricsRecord(
            iteration=k,
            mean_reward=float(np.mean(rewards)),
            std_reward=float(np.std(rewards)),
            beta_star=solution.beta_star,
            expected_kl=solution.expected_kl,
            value_loss=loss,
            seconds=time.perf_counter() - start if cfg.record_wall_clock else 0.0,
        )
        metrics.append(record)
        logger.info(
            "iter %d: reward %.3f +/- %.3f, beta* %.4g, kl %.4g%s",
            k,
            record.mean_reward,
            record.std_reward,
            record.beta_star,
            record.expected_kl,
            " (clamped)" if solution.clamped else "",
        )

    return policy, metrics


@dataclass(frozen=True, eq=False)
class EvaluationResult:
    """
    Aggregated evaluation rollouts.

    ``prices``, ``load_reduction`` and ``unit_profit`` have shape (T, N): the
    per-hour per-customer means over episodes. ``episode_rewards`` has one
    entry per episode.
    """

    episode_rewards: np.ndarray
    prices: np.ndarray
    load_reduction: np.ndarray
    unit_profit: np.ndarray
    peak_hours: tuple[int, ...] = ()

    @property
    def mean_reward(self) -> float:
        return float(np.mean(self.episode_rewards))

    @property
    def std_reward(self) -> float:
        return float(np.std(self.episode_rewards))


def evaluate(
    policy: PricingPolicy,
    market: MarketConfig,
    episodes: int,
    seed: int,
    scheme: KeyScheme = KeyScheme(),
    stochastic: bool = False,
) -> EvaluationResult:
    """
    Roll out ``episodes`` evaluation episodes.

    Greedy mode (default) uses the policy's deterministic action (argmax or
    weighted mean); ``stochastic=True`` samples like training does.
    """
    if episodes < 1:
        raise ValueError(f"episodes must be >= 1, got {episodes}")

    horizon, n = market.horizon, market.n_customers
    prices = np.zeros((horizon, n))
    reduction = np.zeros((horizon, n))
    profit = np.zeros((horizon, n))
    rewards = []

    for episode_seed, rng in episode_streams(np.random.SeedSequence(seed), episodes):
        traj = rollout(
            policy,
            market,
            scheme,
            episode_seed,
            rng if stochastic else None,
            greedy=not stochastic,
        )
        rewards.append(episode_reward(traj))
        for s in traj.steps:
            h = s.observation.t - 1
            prices[h] += s.action.prices
            reduction[h] += load_reduction(s.outcome, s.observation)
            profit[h] += s.action.prices - market.wholesale[h]

    return EvaluationResult(
        episode_rewards=np.array(rewards),
        prices=prices / episodes,
        load_reduction=reduction / episodes,
        unit_profit=profit / episodes,
        peak_hours=market.peak_hours,
    )
