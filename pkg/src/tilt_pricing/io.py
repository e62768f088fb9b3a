# Tilt Pricing - Nonparametric KL trust-region pricing for demand response
# Copyright (c) 2025 Maxence Bernard (maxencebernardhub)
# Licensed under the MIT License. See LICENSE file for details.

"""
I/O module for Tilt Pricing.

This module writes and reads the run artifacts. CSV files are written with
pandas (``index=False``) and read back with strict column checks, so that a
malformed or mismatched file fails loudly with a ValueError.

Metrics (``metrics.csv``)
-------------------------
    iteration, mean_reward, std_reward, beta_star, expected_kl, value_loss,
    seconds

Policy dump (``policy.csv``), long format
-----------------------------------------
Three layouts are recognized from their columns:

1) Factored categorical policy
       key, customer, price, probability

2) Joint categorical policy
       key, action, price_1, ..., price_N, probability

3) Particle policy
       key, particle, price_1, ..., price_N, weight

``key`` is the state key rendering (``t=5`` or ``t=5,b=2``) and ``customer``
is 1-based. Keys absent from the file read as the initial policy.

Run manifest (``manifest.json``)
--------------------------------
Resolved configuration snapshot, seed, output directory, the list of
artifacts and a status moving from ``running`` to ``finished`` or ``failed``.
"""

import json
import os
from collections.abc import Iterable, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Union

import numpy as np
import pandas as pd

from .market import MarketConfig
from .policy import CategoricalPolicy, NonparametricPolicy, ParticlePolicy, ParticleSet
from .state_key import parse_key
from .trainer import MetricsRecord, TrainConfig

PathLike = Union[str, "os.PathLike[str]"]

METRICS_COLUMNS = [
    "iteration",
    "mean_reward",
    "std_reward",
    "beta_star",
    "expected_kl",
    "value_loss",
    "seconds",
]


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def metrics_to_frame(records: Sequence[MetricsRecord]) -> pd.DataFrame:
    """One row per iteration, columns in the documented order."""
    df = pd.DataFrame([asdict(r) for r in records], columns=METRICS_COLUMNS)
    return df.astype({"iteration": int})


def write_metrics(records: Sequence[MetricsRecord], path: PathLike) -> Path:
    out = Path(path)
    metrics_to_frame(records).to_csv(out, index=False)
    return out


def read_metrics(path: PathLike) -> pd.DataFrame:
    """
    Read a metrics file and check its header.

    Raises:
        ValueError: if the columns differ from the documented header or
            contain non-numeric values.
    """
    df = pd.read_csv(path)
    if list(df.columns) != METRICS_COLUMNS:
        raise ValueError(
            f"Unexpected metrics columns in {path}: {list(df.columns)}, "
            f"expected {METRICS_COLUMNS}."
        )
    for col in METRICS_COLUMNS:
        df[col] = pd.to_numeric(df[col], errors="coerce")
    if df.isna().any().any():
        raise ValueError(f"Invalid numeric values in metrics file {path}.")
    return df


# ---------------------------------------------------------------------------
# Policy dumps
# ---------------------------------------------------------------------------


def _price_columns(n: int) -> list[str]:
    return [f"price_{i + 1}" for i in range(n)]


def _sorted_keys(table) -> list:
    return sorted(table, key=lambda k: k.sort_key())


def policy_to_frame(policy: NonparametricPolicy) -> pd.DataFrame:
    """Long-format dump of every tabled key (see module docstring)."""
    rows: list[dict[str, Any]] = []
    if isinstance(policy, CategoricalPolicy):
        if policy.mode == "factored":
            for key in _sorted_keys(policy.table):
                p = policy.table[key]
                for n in range(policy.n_customers):
                    for price, prob in zip(policy.grid, p[n]):
                        rows.append(
                            {
                                "key": str(key),
                                "customer": n + 1,
                                "price": float(price),
                                "probability": float(prob),
                            }
                        )
            columns = ["key", "customer", "price", "probability"]
            return pd.DataFrame(rows, columns=columns)

        cols = ["key", "action", *_price_columns(policy.n_customers), "probability"]
        actions = policy.joint_actions()
        for key in _sorted_keys(policy.table):
            for i, (prices, prob) in enumerate(zip(actions, policy.table[key])):
                row = {"key": str(key), "action": i}
                row.update(zip(cols[2:-1], map(float, prices)))
                row["probability"] = float(prob)
                rows.append(row)
        return pd.DataFrame(rows, columns=cols)

    cols = ["key", "particle", *_price_columns(policy.n_customers), "weight"]
    for key in _sorted_keys(policy.table):
        ps = policy.table[key]
        for i, (prices, w) in enumerate(zip(ps.locations, ps.weights)):
            row = {"key": str(key), "particle": i}
            row.update(zip(cols[2:-1], map(float, prices)))
            row["weight"] = float(w)
            rows.append(row)
    return pd.DataFrame(rows, columns=cols)


def write_policy(policy: NonparametricPolicy, path: PathLike) -> Path:
    out = Path(path)
    policy_to_frame(policy).to_csv(out, index=False)
    return out


def _factored_from_frame(df: pd.DataFrame, market: MarketConfig) -> CategoricalPolicy:
    grid = market.price_grid
    n = market.n_customers
    table = {}
    for key_text, part in df.groupby("key", sort=False):
        key = parse_key(key_text)
        probs = np.zeros((n, grid.size))
        customers = sorted(part["customer"].unique())
        if customers != list(range(1, n + 1)):
            raise ValueError(
                f"Policy key {key_text} lists customers {customers}, "
                f"config has {n} customers."
            )
        for c, rows in part.groupby("customer"):
            rows = rows.sort_values("price", kind="stable")
            prices = rows["price"].to_numpy(dtype=float)
            if prices.shape != grid.shape or not np.allclose(prices, grid):
                raise ValueError(
                    f"Policy key {key_text}, customer {c}: prices do not match "
                    "the configured grid."
                )
            probs[int(c) - 1] = rows["probability"].to_numpy(dtype=float)
        table[key] = probs / probs.sum(axis=1, keepdims=True)
    return CategoricalPolicy(grid=grid, n_customers=n, mode="factored", table=table)


def _joint_from_frame(df: pd.DataFrame, market: MarketConfig) -> CategoricalPolicy:
    n = market.n_customers
    cols = _price_columns(n)
    missing = [c for c in cols if c not in df.columns]
    extra = [c for c in df.columns if c.startswith("price_") and c not in cols]
    if missing or extra:
        raise ValueError(
            f"Joint policy price columns do not match {n} customers "
            f"(missing {missing}, unexpected {extra})."
        )
    template = CategoricalPolicy(grid=market.price_grid, n_customers=n, mode="joint")
    expected = template.joint_actions()
    table = {}
    for key_text, part in df.groupby("key", sort=False):
        part = part.sort_values("action", kind="stable")
        actions = part[cols].to_numpy(dtype=float)
        if actions.shape != expected.shape or not np.allclose(actions, expected):
            raise ValueError(
                f"Policy key {key_text}: joint actions do not match the "
                "configured grid."
            )
        probs = part["probability"].to_numpy(dtype=float)
        table[parse_key(key_text)] = probs / probs.sum()
    return CategoricalPolicy(
        grid=market.price_grid, n_customers=n, mode="joint", table=table
    )


def _particles_from_frame(
    df: pd.DataFrame, market: MarketConfig, cfg: TrainConfig
) -> ParticlePolicy:
    n = market.n_customers
    cols = _price_columns(n)
    extra = [c for c in df.columns if c.startswith("price_") and c not in cols]
    if any(c not in df.columns for c in cols) or extra:
        raise ValueError(f"Particle policy price columns do not match {n} customers.")

    table = {}
    counts = set()
    for key_text, part in df.groupby("key", sort=False):
        part = part.sort_values("particle", kind="stable")
        w = part["weight"].to_numpy(dtype=float)
        table[parse_key(key_text)] = ParticleSet(
            locations=part[cols].to_numpy(dtype=float), weights=w / w.sum()
        )
        counts.add(len(part))
    if len(counts) > 1:
        raise ValueError(f"Particle counts differ across keys: {sorted(counts)}.")
    m = counts.pop() if counts else cfg.particles_per_state
    return ParticlePolicy(
        n_customers=n,
        price_min=market.price_min,
        price_max=market.price_max,
        particles_per_state=m,
        bandwidth=cfg.bandwidth,
        resample_threshold=cfg.resample_threshold,
        rejuvenate=cfg.rejuvenate,
        table=table,
    )


def policy_from_frame(
    df: pd.DataFrame, market: MarketConfig, cfg: TrainConfig
) -> NonparametricPolicy:
    """
    Rebuild a policy from its long-format dump.

    Raises:
        ValueError: if the layout is not recognized or does not match the
            market (customer count, price grid, bounds).
    """
    cols = set(df.columns)
    if {"key", "customer", "price", "probability"} <= cols:
        kind = "factored"
    elif {"key", "action", "probability"} <= cols:
        kind = "joint"
    elif {"key", "particle", "weight"} <= cols:
        kind = "particles"
    else:
        raise ValueError(f"Unrecognized policy dump columns: {sorted(cols)}")

    if kind != "particles" and market.price_grid_step is None:
        raise ValueError("Categorical policy dump needs a configured price grid.")
    if kind == "factored":
        return _factored_from_frame(df, market)
    if kind == "joint":
        return _joint_from_frame(df, market)
    return _particles_from_frame(df, market, cfg)


def read_policy(path: PathLike, market: MarketConfig, cfg: TrainConfig):
    """Read ``policy.csv``; see ``policy_from_frame``."""
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"Policy file not found: {p}")
    return policy_from_frame(pd.read_csv(p), market, cfg)


# ---------------------------------------------------------------------------
# Run manifest
# ---------------------------------------------------------------------------


@dataclass
class RunManifest:
    """Run metadata; every emitted file is listed in ``artifacts``."""

    config: dict[str, Any]
    seed: int
    out_dir: str
    command: str = "train"
    artifacts: list[str] = field(default_factory=list)
    status: str = "running"
    error: str = ""

    def add(self, path: PathLike) -> None:
        name = Path(path).name
        if name not in self.artifacts:
            self.artifacts.append(name)


def write_manifest(manifest: RunManifest, path: PathLike) -> Path:
    out = Path(path)
    out.write_text(
        json.dumps(asdict(manifest), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return out


def read_manifest(path: PathLike) -> RunManifest:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return RunManifest(**data)


def write_frames(frames: Iterable[tuple[pd.DataFrame, PathLike]]) -> list[Path]:
    """Write several frames; returns the written paths."""
    written = []
    for df, path in frames:
        out = Path(path)
        df.to_csv(out, index=False)
        written.append(out)
    return written
