# Tilt Pricing - Nonparametric KL trust-region pricing for demand response
# Copyright (c) 2025 Maxence Bernard (maxencebernardhub)
# Licensed under the MIT License. See LICENSE file for details.

"""
One-dimensional dual of the KL trust-region update.

For a batch of state groups with old-policy probabilities p and advantage
estimates A, the dual objective is

    l(beta) = beta * delta + sum_s w_s * beta * log E_{a~p}[exp(A(a) / beta)]

with w_s the normalized state weights of the batch. A group whose action
distribution is a product of factors contributes the sum of its factors'
log-partitions (the exponential of a sum factorizes).

The gradient is

    l'(beta) = delta - sum_s w_s * KL(q_s || p_s),   q_s ∝ p_s * exp(A / beta)

so l is convex, the gradient increases with beta, and the minimizer makes the
achieved KL of the tilted policy equal to delta unless the minimizer lies
below ``beta_min`` (then the trust region is not binding).

Every log-partition goes through ``scipy.special.logsumexp`` with the old
probabilities passed as weights, which is the max-shifted evaluation
beta * log E[exp((A - max A) / beta)] + max A.

``solve_beta`` runs ``scipy.optimize.basinhopping`` on u = log(beta) with an
L-BFGS-B local minimizer using the analytic gradient, then polishes the
best point with a bracketed root search on the gradient.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np
from scipy.optimize import basinhopping, brentq
from scipy.special import logsumexp, rel_entr

from .advantage import ActionFactor, AdvantageBatch

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrustRegionSpec:
    """
    Trust-region and dual-solver settings.

    Attributes
    ----------
    delta :
        KL radius (> 0).
    beta_min :
        Lower clamp of the dual variable (> 0).
    hops :
        Number of basin-hopping perturbations (>= 1).
    local_tol :
        Gradient tolerance of the local minimizer and of the optimality check.
    beta_init :
        Starting point of the search.
    beta_max :
        Upper end of the search interval.
    rho_weighted_states :
        Weight state visits by lam**(t-1) instead of uniformly.
    seed :
        Seed of the basin-hopping perturbations.
    """

    delta: float = 0.05
    beta_min: float = 1e-6
    hops: int = 3
    local_tol: float = 1e-7
    beta_init: float = 1.0
    beta_max: float = 1e8
    rho_weighted_states: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        errors = []
        if not self.delta > 0:
            errors.append(f"delta: must be > 0, got {self.delta}")
        if not self.beta_min > 0:
            errors.append(f"beta_min: must be > 0, got {self.beta_min}")
        if self.hops < 1:
            errors.append(f"basin_hops: must be >= 1, got {self.hops}")
        if not self.local_tol > 0:
            errors.append(f"local_tol: must be > 0, got {self.local_tol}")
        if not self.beta_max > self.beta_min:
            errors.append("beta_max: must exceed beta_min")
        if not self.beta_init > 0:
            errors.append(f"beta_init: must be > 0, got {self.beta_init}")
        if errors:
            raise ValueError("Invalid trust region settings:\n  " + "\n  ".join(errors))


@dataclass(frozen=True)
class DualSolution:
    beta_star: float
    objective: float
    grad_at_solution: float
    clamped: bool
    converged: bool
    expected_kl: float
    diagnostics: dict[str, Any] = field(default_factory=dict)


def _check_beta(beta: float, batch: AdvantageBatch, spec: TrustRegionSpec) -> float:
    if len(batch) == 0:
        raise ValueError("Cannot evaluate the dual on an empty advantage batch.")
    beta = float(beta)
    if not np.isfinite(beta) or beta < spec.beta_min * (1.0 - 1e-12):
        raise ValueError(f"beta must be >= beta_min={spec.beta_min}, got {beta}.")
    return beta


def log_partition(factor: ActionFactor, beta: float) -> float:
    """log E_{a~p}[exp(A(a) / beta)], max-shifted."""
    return float(logsumexp(factor.advantages / beta, b=factor.probs))


def tilted_probs(factor: ActionFactor, beta: float) -> np.ndarray:
    """q ∝ p * exp(A / beta), normalized."""
    log_q = factor.advantages / beta - log_partition(factor, beta)
    q = factor.probs * np.exp(log_q)
    total = q.sum()
    if not total > 0:
        raise ValueError("Tilted distribution has zero mass.")
    return q / total


def factor_kl(factor: ActionFactor, beta: float) -> float:
    """KL(q || p) of the tilted factor."""
    q = tilted_probs(factor, beta)
    return float(np.sum(rel_entr(q, factor.probs)))


def _group_sums(batch: AdvantageBatch, beta: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-group sums over factors of log-partitions and of tilted KLs."""
    log_z = np.empty(len(batch))
    kl = np.empty(len(batch))
    for i, group in enumerate(batch.groups.values()):
        log_z[i] = sum(log_partition(f, beta) for f in group.factors)
        kl[i] = sum(factor_kl(f, beta) for f in group.factors)
    return log_z, kl


def dual_objective(beta: float, batch: AdvantageBatch, spec: TrustRegionSpec) -> float:
    beta = _check_beta(beta, batch, spec)
    log_z, _ = _group_sums(batch, beta)
    return float(beta * spec.delta + beta * np.dot(batch.state_weights(), log_z))


def dual_gradient(beta: float, batch: AdvantageBatch, spec: TrustRegionSpec) -> float:
    """d l / d beta = delta - (weighted KL of the tilted policy)."""
    beta = _check_beta(beta, batch, spec)
    return float(spec.delta - achieved_kl(beta, batch))


def achieved_kl(beta: float, batch: AdvantageBatch) -> float:
    """State-weighted KL between the tilt at ``beta`` and the old policy."""
    _, kl = _group_sums(batch, float(beta))
    return float(np.dot(batch.state_weights(), kl))


def _objective_and_grad_u(
    u: np.ndarray, batch: AdvantageBatch, spec: TrustRegionSpec
) -> tuple[float, np.ndarray]:
    beta = float(np.exp(u[0]))
    beta = max(beta, spec.beta_min)
    value = dual_objective(beta, batch, spec)
    grad = dual_gradient(beta, batch, spec)
    # chain rule through beta = exp(u)
    return value, np.array([beta * grad])


def _bracket(
    beta: float, batch: AdvantageBatch, spec: TrustRegionSpec
) -> Optional[tuple[float, float]]:
    """Find [lo, hi] around ``beta`` with grad(lo) < 0 < grad(hi)."""
    lo = hi = min(max(beta, spec.beta_min), spec.beta_max)
    while dual_gradient(lo, batch, spec) >= 0:
        if lo <= spec.beta_min:
            return None
        lo = max(lo / 10.0, spec.beta_min)
    while dual_gradient(hi, batch, spec) <= 0:
        if hi >= spec.beta_max:
            return None
        hi = min(hi * 10.0, spec.beta_max)
    return lo, hi


def solve_beta(
    batch: AdvantageBatch, spec: TrustRegionSpec, seed: Optional[int] = None
) -> DualSolution:
    """
    Minimize the dual over beta >= beta_min.

    Args:
        batch: Non-empty advantage batch.
        spec: Trust-region settings.
        seed: Overrides ``spec.seed`` for the basin-hopping perturbations.

    Returns:
        A DualSolution. ``clamped`` is set when the gradient at ``beta_min``
        is already non-negative (trust region not binding); ``converged`` is
        False when no point with |gradient| <= local_tol could be found.
    """
    if len(batch) == 0:
        raise ValueError("Cannot solve the dual on an empty advantage batch.")

    grad_min = dual_gradient(spec.beta_min, batch, spec)
    if grad_min >= -spec.local_tol:
        beta = spec.beta_min
        solution = DualSolution(
            beta_star=beta,
            objective=dual_objective(beta, batch, spec),
            grad_at_solution=grad_min,
            clamped=True,
            converged=True,
            expected_kl=achieved_kl(beta, batch),
            diagnostics={"reason": "gradient non-negative at beta_min"},
        )
        logger.debug("Dual clamped at beta_min=%g (grad=%g)", beta, grad_min)
        return solution

    u_bounds = (np.log(spec.beta_min), np.log(spec.beta_max))
    u0 = np.clip(np.log(spec.beta_init), *u_bounds)
    result = basinhopping(
        _objective_and_grad_u,
        x0=np.array([u0]),
        niter=spec.hops,
        stepsize=1.0,
        minimizer_kwargs={
            "method": "L-BFGS-B",
            "jac": True,
            "bounds": [u_bounds],
            "args": (batch, spec),
            "options": {"gtol": spec.local_tol},
        },
        seed=spec.seed if seed is None else seed,
    )
    beta_bh = float(np.exp(result.x[0]))
    diagnostics: dict[str, Any] = {
        "basin_hopping_beta": beta_bh,
        "basin_hopping_nfev": int(result.nfev),
        "message": str(result.message),
    }

    beta = beta_bh
    bracket = _bracket(beta_bh, batch, spec)
    if bracket is not None:
        lo, hi = bracket
        u_star = brentq(
            lambda u: dual_gradient(float(np.exp(u)), batch, spec),
            np.log(lo),
            np.log(hi),
            xtol=1e-14,
        )
        beta = float(np.clip(np.exp(u_star), spec.beta_min, spec.beta_max))
        diagnostics["bracket"] = (lo, hi)

    grad = dual_gradient(beta, batch, spec)
    converged = abs(grad) <= spec.local_tol
    if not converged:
        logger.warning(
            "Dual solve did not converge: beta=%g, gradient=%g (tol %g)",
            beta,
            grad,
            spec.local_tol,
        )

    solution = DualSolution(
        beta_star=beta,
        objective=dual_objective(beta, batch, spec),
        grad_at_solution=grad,
        clamped=False,
        converged=converged,
        expected_kl=achieved_kl(beta, batch),
        diagnostics=diagnostics,
    )
    logger.debug(
        "Dual solved: beta*=%g, objective=%g, kl=%g",
        solution.beta_star,
        solution.objective,
        solution.expected_kl,
    )
    return solution
