# Tilt Pricing - Nonparametric KL trust-region pricing for demand response
# Copyright (c) 2025 Maxence Bernard (maxencebernardhub)
# Licensed under the MIT License. See LICENSE file for details.

"""
Configuration helpers for Tilt Pricing.

This module is responsible for:
- loading a run configuration from a TOML file,
- applying environment and command-line overrides,
- building the typed ``MarketConfig`` and ``TrainConfig`` used by the rest
  of the application,
- producing the resolved snapshot written into run manifests.

File layout
-----------
A run file has the sections ``[market]``, ``[state]``, ``[advantage]``,
``[trust_region]``, ``[policy]``, ``[training]``, ``[qlearning]`` and
``[output]`` (see ``config/dr3_discrete.toml``). Every key is unique across
sections, so it can be addressed either by its bare name (``delta``) or as
``section.key`` (``trust_region.delta``).

Customer profiles
-----------------
``crit_demand`` / ``curt_demand`` hold a list of hourly profiles
("archetypes") and ``alpha`` / ``beta`` a list of coefficients. Customer n
(0-based) uses entry ``n mod len(list)``, so ``n_customers`` can be changed
without rewriting the arrays. A single flat profile is one archetype.

Overrides
---------
Precedence, lowest first: file values, ``TILT_PRICING_<KEY>`` environment
variables, ``--set KEY=VALUE`` arguments. Values are parsed as TOML literals
(``0.01``, ``true``, ``[1, 2]``, ``"gae"``) and fall back to plain strings.
"""

import logging
import os
from collections.abc import Iterable, Mapping
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

import numpy as np

try:
    import tomllib  # Python 3.11+
except ModuleNotFoundError:  # pragma: no cover - fallback for older Python
    import tomli as tomllib  # type: ignore[import]

from .dual import TrustRegionSpec
from .market import MarketConfig
from .mdp import DiscountSpec
from .state_key import KeyScheme
from .trainer import TrainConfig

logger = logging.getLogger(__name__)

DEFAULT_CONFIG_FILE = "tilt_pricing_config.toml"
CONFIG_DIR = "config"
ENV_PREFIX = "TILT_PRICING_"

# Section -> key -> default (None: required in the file).
SECTIONS: dict[str, dict[str, Any]] = {
    "market": {
        "n_customers": 3,
        "horizon": 24,
        "rho": 0.5,
        "price_min": 0.0,
        "price_max": 12.0,
        "price_grid_step": 0.5,
        "demand_noise_std": 0.0,
        "peak_hours": [],
        "wholesale": None,
        "elasticity": None,
        "crit_demand": None,
        "curt_demand": None,
        "alpha": None,
        "beta": None,
    },
    "state": {"key_scheme": "time_only", "bin_width": 10.0},
    "advantage": {
        "advantage_estimator": "mc",
        "gae_lambda": 0.95,
        "td_n": 3,
        "value_lr": 0.05,
        "discount": 1.0,
    },
    "trust_region": {
        "delta": 0.05,
        "beta_min": 1e-6,
        "basin_hops": 3,
        "local_tol": 1e-7,
        "beta_init": 1.0,
        "rho_weighted_states": False,
    },
    "policy": {
        "action_mode": "discrete",
        "policy_mode": "factored",
        "particles_per_state": 128,
        "bandwidth": 0.3,
        "resample_threshold": 0.5,
        "rejuvenate": True,
    },
    "training": {
        "iterations": 200,
        "episodes_per_iteration": 8,
        "seed": 0,
        "baselines": [],
    },
    "qlearning": {"learning_rate": 0.1, "epsilon_start": 1.0, "epsilon_end": 0.05},
    "output": {"record_wall_clock": True, "dump_trajectory": False},
}

SECTION_OF: dict[str, str] = {
    key: section for section, keys in SECTIONS.items() for key in keys
}


@dataclass(frozen=True)
class RunSettings:
    """
    Fully resolved run configuration.

    ``values`` is the flat key -> value mapping after overrides (the manifest
    snapshot); ``market`` and ``train`` are the typed views built from it.
    """

    values: dict[str, Any]
    market: MarketConfig
    train: TrainConfig
    source: Optional[Path] = None

    @property
    def dump_trajectory(self) -> bool:
        return bool(self.values["dump_trajectory"])


def _load_toml(path: Path) -> dict[str, Any]:
    """
    Load a TOML file and return its content as a dictionary.

    Raises:
        FileNotFoundError: if the file does not exist.
        ValueError: if the TOML content cannot be parsed or is not a table.
    """
    if not path.is_file():
        raise FileNotFoundError(f"Config file not found: {path}")

    try:
        data = tomllib.loads(path.read_text(encoding="utf-8"))
    except Exception as exc:  # noqa: BLE001
        raise ValueError(f"Failed to parse TOML config file: {path}") from exc

    if not isinstance(data, dict):
        raise ValueError(f"Invalid TOML root type in {path}, expected a table.")

    return data


def resolve_config_path(name: Optional[str], base_dir: Optional[Path] = None) -> Path:
    """
    Resolve ``--config`` to a file path.

    ``None`` selects ``tilt_pricing_config.toml``; an existing path is used
    as-is; a bare name such as ``dr3_discrete`` resolves to
    ``config/dr3_discrete.toml``.
    """
    base = Path.cwd() if base_dir is None else base_dir
    if not name:
        return base / DEFAULT_CONFIG_FILE
    candidate = Path(name)
    if not candidate.is_absolute():
        candidate = base / candidate
    if candidate.is_file() or candidate.suffix == ".toml":
        return candidate
    return base / CONFIG_DIR / f"{name}.toml"


def canonical_key(key: str) -> str:
    """
    Map ``key`` or ``section.key`` to the bare key.

    Raises:
        ValueError: for unknown keys or a section/key mismatch.
    """
    raw = key.strip()
    if "." in raw:
        section, bare = raw.split(".", 1)
        if bare not in SECTIONS.get(section, {}):
            raise ValueError(f"Unknown configuration key: {key}")
        return bare
    if raw not in SECTION_OF:
        raise ValueError(f"Unknown configuration key: {key}")
    return raw


def parse_value(text: str) -> Any:
    """Parse ``text`` as a TOML literal, falling back to the raw string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except Exception:  # noqa: BLE001
        return text


def parse_override(item: str) -> tuple[str, Any]:
    """Split ``KEY=VALUE`` and parse VALUE."""
    if "=" not in item:
        raise ValueError(f"Invalid override {item!r}, expected KEY=VALUE.")
    key, raw = item.split("=", 1)
    return canonical_key(key), parse_value(raw.strip())


def flatten(data: Mapping[str, Any]) -> dict[str, Any]:
    """
    Merge the sections of a parsed run file over the defaults.

    Raises:
        ValueError: for unknown sections or keys.
    """
    flat = {key: default for keys in SECTIONS.values() for key, default in keys.items()}
    for section, content in data.items():
        if section not in SECTIONS:
            raise ValueError(f"Unknown configuration section: [{section}]")
        if not isinstance(content, Mapping):
            raise ValueError(f"Configuration section [{section}] must be a table.")
        for key, value in content.items():
            if key not in SECTIONS[section]:
                raise ValueError(f"Unknown configuration key: {section}.{key}")
            flat[key] = value
    return flat


def env_overrides(environ: Optional[Mapping[str, str]] = None) -> dict[str, Any]:
    """Collect ``TILT_PRICING_<KEY>`` variables; unrelated names are skipped."""
    env = os.environ if environ is None else environ
    out = {}
    for name, raw in env.items():
        if not name.startswith(ENV_PREFIX):
            continue
        key = name[len(ENV_PREFIX) :].lower()
        if key not in SECTION_OF:
            logger.warning("Ignoring unknown environment override %s", name)
            continue
        out[key] = parse_value(raw)
    return out


def _archetypes(value: Any, field_name: str, n: int) -> np.ndarray:
    items = list(value)
    if not items:
        raise ValueError(f"{field_name}: at least one entry is required")
    if not isinstance(items[0], (list, tuple)):
        if field_name in ("crit_demand", "curt_demand"):
            items = [items]
    return np.array([items[i % len(items)] for i in range(n)], dtype=float)


def build_market_config(values: Mapping[str, Any]) -> MarketConfig:
    """
    Build the market view of a flat configuration.

    Raises:
        ValueError: listing every missing or invalid market field.
    """
    missing = [
        k
        for k in SECTIONS["market"]
        if values.get(k) is None and k != "price_grid_step"
    ]
    if missing:
        raise ValueError(
            "Invalid market configuration:\n  "
            + "\n  ".join(f"{k}: missing" for k in missing)
        )

    n = int(values["n_customers"])
    step = values["price_grid_step"]
    if step is False or (isinstance(step, str) and step.lower() == "none"):
        step = None

    try:
        profiles = {
            name: _archetypes(values[name], name, max(n, 1))
            for name in ("crit_demand", "curt_demand", "alpha", "beta")
        }
    except (TypeError, ValueError) as exc:
        raise ValueError(f"Invalid market configuration:\n  {exc}") from exc

    return MarketConfig(
        n_customers=n,
        horizon=int(values["horizon"]),
        wholesale=np.array(values["wholesale"], dtype=float),
        elasticity=np.array(values["elasticity"], dtype=float),
        crit_demand=profiles["crit_demand"],
        curt_demand=profiles["curt_demand"],
        alpha=profiles["alpha"],
        beta=profiles["beta"],
        rho=float(values["rho"]),
        price_min=float(values["price_min"]),
        price_max=float(values["price_max"]),
        price_grid_step=None if step is None else float(step),
        demand_noise_std=float(values["demand_noise_std"]),
        peak_hours=tuple(int(h) for h in values["peak_hours"]),
    )


def build_train_config(values: Mapping[str, Any]) -> TrainConfig:
    """
    Build the training view of a flat configuration.

    Raises:
        ValueError: listing every invalid training field.
    """
    errors: list[str] = []

    def _part(factory, *args, **kwargs):
        try:
            return factory(*args, **kwargs)
        except (TypeError, ValueError) as exc:
            errors.append(str(exc))
            return None

    trust = _part(
        TrustRegionSpec,
        delta=float(values["delta"]),
        beta_min=float(values["beta_min"]),
        hops=int(values["basin_hops"]),
        local_tol=float(values["local_tol"]),
        beta_init=float(values["beta_init"]),
        rho_weighted_states=bool(values["rho_weighted_states"]),
        seed=int(values["seed"]),
    )
    discount = _part(DiscountSpec, lam=float(values["discount"]))
    scheme = _part(
        KeyScheme, mode=str(values["key_scheme"]), bin_width=float(values["bin_width"])
    )
    baselines = values["baselines"]
    if isinstance(baselines, str):
        baselines = [b for b in baselines.split(",") if b]

    cfg = TrainConfig(
        iterations=int(values["iterations"]),
        episodes_per_iteration=int(values["episodes_per_iteration"]),
        seed=int(values["seed"]),
        trust=trust or TrustRegionSpec(),
        discount=discount or DiscountSpec(),
        scheme=scheme or KeyScheme(),
        estimator=str(values["advantage_estimator"]),
        gae_lambda=float(values["gae_lambda"]),
        td_n=int(values["td_n"]),
        value_lr=float(values["value_lr"]),
        action_mode=str(values["action_mode"]),
        policy_mode=str(values["policy_mode"]),
        particles_per_state=int(values["particles_per_state"]),
        bandwidth=float(values["bandwidth"]),
        resample_threshold=float(values["resample_threshold"]),
        rejuvenate=bool(values["rejuvenate"]),
        baselines=tuple(str(b) for b in baselines),
        q_learning_rate=float(values["learning_rate"]),
        epsilon_start=float(values["epsilon_start"]),
        epsilon_end=float(values["epsilon_end"]),
        record_wall_clock=bool(values["record_wall_clock"]),
    )
    errors.extend(cfg.problems())
    if errors:
        raise ValueError("Invalid training configuration:\n  " + "\n  ".join(errors))
    return cfg


def settings_from_values(
    values: Mapping[str, Any], source: Optional[Path] = None
) -> RunSettings:
    """
    Build typed settings from a flat mapping, reporting all field errors.

    Raises:
        ValueError: with one ``field: reason`` line per failure.
    """
    errors: list[str] = []
    market = train = None
    try:
        market = build_market_config(values)
    except (TypeError, ValueError) as exc:
        errors.append(str(exc))
    try:
        train = build_train_config(values)
    except (TypeError, ValueError) as exc:
        errors.append(str(exc))

    if market is not None and train is not None:
        if train.action_mode == "discrete" and market.price_grid_step is None:
            errors.append("price_grid_step: required in discrete action mode")
        if train.action_mode == "continuous" and "qlearning" in train.baselines:
            errors.append("baselines: qlearning requires the discrete action mode")
    if errors:
        where = f" ({source})" if source is not None else ""
        raise ValueError(f"Invalid configuration{where}:\n" + "\n".join(errors))
    return RunSettings(values=dict(values), market=market, train=train, source=source)


def load_settings(
    path: Optional[Path] = None,
    overrides: Iterable[str] = (),
    environ: Optional[Mapping[str, str]] = None,
) -> RunSettings:
    """
    Load a run file and apply environment then ``KEY=VALUE`` overrides.

    Args:
        path: TOML run file (default: ``tilt_pricing_config.toml`` in the
            current directory).
        overrides: ``KEY=VALUE`` strings (``--set``).
        environ: Environment mapping (default: ``os.environ``).

    Raises:
        FileNotFoundError: if the run file does not exist.
        ValueError: for parse errors, unknown keys or invalid values.
    """
    cfg_path = Path(DEFAULT_CONFIG_FILE) if path is None else Path(path)
    values = flatten(_load_toml(cfg_path))
    values.update(env_overrides(environ))
    for item in overrides:
        key, value = parse_override(item)
        values[key] = value
    return settings_from_values(values, source=cfg_path)


def with_overrides(settings: RunSettings, updates: Mapping[str, Any]) -> RunSettings:
    """Copy of ``settings`` with already-parsed ``updates`` applied."""
    values = dict(settings.values)
    for key, value in updates.items():
        values[canonical_key(key)] = value
    return settings_from_values(values, source=settings.source)


def resolved_snapshot(settings: RunSettings) -> dict[str, dict[str, Any]]:
    """Every resolved value, grouped by section (JSON-serializable)."""
    out: dict[str, dict[str, Any]] = {}
    for key, value in settings.values.items():
        if isinstance(value, np.ndarray):
            value = value.tolist()
        elif isinstance(value, tuple):
            value = list(value)
        out.setdefault(SECTION_OF[key], {})[key] = value
    return out
