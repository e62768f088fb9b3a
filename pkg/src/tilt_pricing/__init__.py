# Tilt Pricing - Nonparametric KL trust-region pricing for demand response
# Copyright (c) 2025 Maxence Bernard (maxencebernardhub)
# Licensed under the MIT License. See LICENSE file for details.

"""
Tilt Pricing
------------

Policy optimization with a KL trust region solved in closed form: each
update tilts the current nonparametric policy by exp(advantage / beta), with
the temperature beta obtained from a one-dimensional convex dual solved
globally by basin hopping. The learner drives a demand-response retail
electricity pricing simulator.

Main capabilities:
- demand-response market simulator (price elasticity, dissatisfaction cost),
- tabular state keys, value tables and MC / GAE / n-step advantages,
- closed-form tilted updates for categorical (factored or joint) and
  particle policies,
- dual temperature solver with clamping and convergence diagnostics,
- Q-learning, random and wholesale-price comparators,
- TOML run files, CSV artifacts, run manifests and parameter sweeps.

Usage:
    tilt-pricing --help
    python -m tilt_pricing.cli --help
"""

__all__ = ["market", "dual", "policy", "trainer", "config", "io", "views"]

__version__ = "0.1.0"
