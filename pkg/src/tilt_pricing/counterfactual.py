# Tilt Pricing - Nonparametric KL trust-region pricing for demand response
# Copyright (c) 2025 Maxence Bernard (maxencebernardhub)
# Licensed under the MIT License. See LICENSE file for details.

"""
Exhaustive advantage batches for the policy update.

The tilt needs an advantage for every action in the support of each visited
key, while a rollout only reveals the advantage of the action taken. The
market reward is a sum of per-customer terms that depend only on that
customer's price, and the next observation does not depend on the price, so
the advantage of any other price vector a at a visited step is

    A(a) = A_t + sum_n [ r_n(a_n) - r_n(taken_n) ]

with A_t the sampled estimate of the taken action. For factored policies the
estimate is split evenly across customers:

    A_n(price) = r_n(price) - r_n(taken_n) + A_t / N

so that the joint advantage is the sum of the customer components.

Estimates of all visits of a key are averaged; the key's state weight is its
visit count, or the sum of lam**(t-1) over its visits when discount-weighted
occupancy is requested.

The reward differences and the sampled A_t are accumulated apart. With
``centered=True`` the key's mean A_t is left out: it shifts every action of the
key equally, and both the tilt and the optimal temperature are invariant to
such shifts.
"""

from collections.abc import Iterable
from typing import Optional

import numpy as np

from .advantage import ActionFactor, AdvantageBatch, AdvantageGroup
from .market import MarketConfig, customer_rewards
from .mdp import DiscountSpec, Trajectory
from .policy import CategoricalPolicy, NonparametricPolicy
from .state_key import KeyScheme, StateKey, key_of


def _support(policy: NonparametricPolicy, key: StateKey) -> np.ndarray:
    """Candidate price vectors (rows) scored for ``key``."""
    if isinstance(policy, CategoricalPolicy):
        if policy.mode == "factored":
            # one row per grid price, broadcast to every customer
            return np.repeat(policy.grid[:, None], policy.n_customers, axis=1)
        return policy.joint_actions()
    return policy.particles(key).locations


def _is_factored(policy: NonparametricPolicy) -> bool:
    return isinstance(policy, CategoricalPolicy) and policy.mode == "factored"


def counterfactual_batch(
    trajs: Iterable[Trajectory],
    advantages: Iterable[np.ndarray],
    policy: NonparametricPolicy,
    market: MarketConfig,
    scheme: KeyScheme,
    disc: Optional[DiscountSpec] = None,
    rho_weighted_states: bool = False,
    centered: bool = False,
) -> AdvantageBatch:
    """
    Score the policy's full support at every visited key.

    Args:
        trajs: Rollouts collected under ``policy``.
        advantages: One array of per-step advantage estimates per trajectory.
        policy: Policy whose support (grid or particles) is scored.
        market: Market configuration providing per-customer reward terms.
        scheme: State keying.
        disc: Discount used for discount-weighted state occupancy.
        rho_weighted_states: Weight visits by lam**(t-1) instead of 1.
        centered: Drop each key's mean sampled advantage, keeping only the
            reward differences to the taken actions.

    Returns:
        An AdvantageBatch with one group per visited key, ready for
        ``solve_beta`` and the tilt.
    """
    lam = disc.lam if disc is not None else 1.0
    diffs: dict[StateKey, np.ndarray] = {}
    sampled: dict[StateKey, float] = {}
    visits: dict[StateKey, int] = {}
    weights: dict[StateKey, float] = {}

    for traj, adv in zip(trajs, advantages):
        for step, a_t in zip(traj.steps, adv):
            obs = step.observation
            key = key_of(obs, scheme)
            candidates = _support(policy, key)
            r_candidates = customer_rewards(market, obs, candidates)
            r_taken = customer_rewards(market, obs, step.action.prices)

            if _is_factored(policy):
                # (N, G) per-customer components
                diff = (r_candidates - r_taken).T
            else:
                diff = (r_candidates - r_taken).sum(axis=1)

            diffs[key] = diffs.get(key, 0.0) + diff
            sampled[key] = sampled.get(key, 0.0) + float(a_t)
            visits[key] = visits.get(key, 0) + 1
            w = lam ** (obs.t - 1) if rho_weighted_states else 1.0
            weights[key] = weights.get(key, 0.0) + w

    groups = {}
    for key in sorted(diffs, key=StateKey.sort_key):
        mean = diffs[key] / visits[key]
        if not centered:
            a_mean = sampled[key] / visits[key]
            if _is_factored(policy):
                a_mean /= policy.n_customers
            mean = mean + a_mean
        if isinstance(policy, CategoricalPolicy):
            p = policy.probs(key)
            if policy.mode == "factored":
                factors = tuple(
                    ActionFactor(actions=policy.grid, advantages=mean[n], probs=p[n])
                    for n in range(policy.n_customers)
                )
            else:
                factors = (
                    ActionFactor(
                        actions=policy.joint_actions(), advantages=mean, probs=p
                    ),
                )
        else:
            ps = policy.particles(key)
            factors = (
                ActionFactor(actions=ps.locations, advantages=mean, probs=ps.weights),
            )
        groups[key] = AdvantageGroup(
            factors=factors, visits=visits[key], weight=weights[key]
        )
    return AdvantageBatch(groups)
