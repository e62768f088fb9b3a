# Tilt Pricing - Nonparametric KL trust-region pricing for demand response
# Copyright (c) 2025 Maxence Bernard (maxencebernardhub)
# Licensed under the MIT License. See LICENSE file for details.

"""
State keying for the tabular policy and value estimators.

Two schemes are available:

- ``time_only``: the key is the hour t. In the deterministic market every
  exogenous signal is a function of t, so the hour is a sufficient statistic.
- ``time_plus_demand_bins``: the key additionally carries
  ``floor(total base demand / bin_width)``, for noisy scenarios.

Keys render as ``t=5`` or ``t=5,b=2``; ``parse_key`` reverses the rendering so
that policy dumps can be loaded back.
"""

import math
import re
from dataclasses import dataclass
from typing import Optional

from .mdp import Observation

KEY_SCHEMES = ("time_only", "time_plus_demand_bins")

_KEY_RE = re.compile(r"^t=(\d+)(?:,b=(-?\d+))?$")


@dataclass(frozen=True)
class StateKey:
    """Hashable key of an observation."""

    t: int
    bin: Optional[int] = None

    def __str__(self) -> str:
        if self.bin is None:
            return f"t={self.t}"
        return f"t={self.t},b={self.bin}"

    def sort_key(self) -> tuple[int, int]:
        return (self.t, -1 if self.bin is None else self.bin)


@dataclass(frozen=True)
class KeyScheme:
    mode: str = "time_only"
    bin_width: float = 10.0

    def __post_init__(self) -> None:
        if self.mode not in KEY_SCHEMES:
            raise ValueError(
                f"Unknown key_scheme {self.mode!r}, expected one of {KEY_SCHEMES}."
            )
        if self.mode == "time_plus_demand_bins" and not self.bin_width > 0:
            raise ValueError(f"bin_width must be > 0, got {self.bin_width}.")


def key_of(obs: Observation, scheme: KeyScheme) -> StateKey:
    """Map an observation to its key; prev_consumption never enters the key."""
    if scheme.mode == "time_only":
        return StateKey(t=obs.t)
    return StateKey(t=obs.t, bin=int(math.floor(obs.total_demand / scheme.bin_width)))


def parse_key(text: str) -> StateKey:
    """
    Parse the rendering produced by ``str(StateKey)``.

    Raises:
        ValueError: if ``text`` is not a valid key.
    """
    m = _KEY_RE.match(str(text).strip())
    if m is None:
        raise ValueError(f"Invalid state key: {text!r}")
    bin_raw = m.group(2)
    return StateKey(t=int(m.group(1)), bin=None if bin_raw is None else int(bin_raw))
