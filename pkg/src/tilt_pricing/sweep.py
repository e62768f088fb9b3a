# Tilt Pricing - Nonparametric KL trust-region pricing for demand response
# Copyright (c) 2025 Maxence Bernard (maxencebernardhub)
# Licensed under the MIT License. See LICENSE file for details.

"""
Parameter sweeps.

A sweep expands ``--grid KEY=V1,V2,...`` arguments into the cartesian
product of their values and runs one training per grid point in its own
directory (``run_000``, ``run_001``, ...). Points run sequentially, or in a
process pool when ``workers > 1``; output directories never overlap.

Failures are recorded per point in ``index.csv`` instead of stopping the
sweep. Columns: run, the grid keys, status, out_dir, final_mean_reward,
error.
"""

import itertools
import logging
from collections.abc import Iterable, Mapping, Sequence
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any

import pandas as pd

from .config import RunSettings, canonical_key, parse_value, settings_from_values
from .runner import run_training
from .trainer import TrainingError

logger = logging.getLogger(__name__)

INDEX_FILE = "index.csv"


def parse_grid_item(item: str) -> tuple[str, list[Any]]:
    """
    Parse ``KEY=V1,V2,...`` into (bare key, values).

    The value list is read as a TOML array when possible (``0.01,0.05``,
    ``[1,2],[3]``) and otherwise split on commas, each part parsed as a TOML
    literal (``mc,gae``).

    Raises:
        ValueError: for a missing ``=``, an unknown key or an empty list.
    """
    if "=" not in item:
        raise ValueError(f"Invalid grid entry {item!r}, expected KEY=V1,V2,...")
    key, raw = item.split("=", 1)
    bare = canonical_key(key)
    raw = raw.strip()
    values = parse_value(f"[{raw}]") if raw else []
    if not isinstance(values, list):
        values = [parse_value(part.strip()) for part in raw.split(",") if part.strip()]
    if not values:
        raise ValueError(f"Grid entry {key!r} has no values.")
    return bare, values


def parse_grid(items: Iterable[str]) -> dict[str, list[Any]]:
    """Merge several grid entries; a repeated key keeps its last values."""
    grid: dict[str, list[Any]] = {}
    for item in items:
        key, values = parse_grid_item(item)
        grid[key] = values
    return grid


def expand_grid(grid: Mapping[str, Sequence[Any]]) -> list[dict[str, Any]]:
    """Cartesian product of the grid, first key varying slowest."""
    if not grid:
        return []
    keys = list(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*grid.values())]


def run_dir_name(index: int) -> str:
    return f"run_{index:03d}"


def _failed(error: str) -> dict[str, Any]:
    return {"status": "failed", "final_mean_reward": float("nan"), "error": error}


def _run_point(values: dict[str, Any], out_dir: str) -> dict[str, Any]:
    """Train one grid point; failures are returned, never raised."""
    try:
        settings = settings_from_values(values)
        outcome = run_training(settings, Path(out_dir))
    except (ValueError, TrainingError, OSError, FloatingPointError) as exc:
        logger.warning("Sweep point %s failed: %s", out_dir, exc)
        return _failed(str(exc))
    except Exception as exc:
        logger.exception("Sweep point %s crashed", out_dir)
        return _failed(f"{type(exc).__name__}: {exc}")
    return {
        "status": "finished",
        "final_mean_reward": outcome.final_mean_reward,
        "error": "",
    }


def _cell(value: Any) -> Any:
    return str(value) if isinstance(value, (list, tuple, dict)) else value


def run_sweep(
    settings: RunSettings,
    grid: Mapping[str, Sequence[Any]],
    out_dir: Path,
    workers: int = 1,
) -> pd.DataFrame:
    """
    Run every grid point and write ``index.csv`` into ``out_dir``.

    Args:
        settings: Base settings; grid values override them per point.
        grid: Bare key -> candidate values (see ``parse_grid``).
        out_dir: Sweep directory.
        workers: Number of worker processes (1: sequential).

    Returns:
        The index frame (one row per grid point).

    Raises:
        ValueError: for an empty grid or ``workers < 1``.
    """
    points = expand_grid(grid)
    if not points:
        raise ValueError("Sweep grid is empty.")
    if workers < 1:
        raise ValueError(f"workers must be >= 1, got {workers}")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = []
    for i, point in enumerate(points):
        values = dict(settings.values)
        values.update(point)
        jobs.append((values, str(out_dir / run_dir_name(i))))

    logger.info("Sweep: %d grid points, %d worker(s)", len(jobs), workers)
    if workers == 1:
        results = [_run_point(values, path) for values, path in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_point, values, path) for values, path in jobs]
            results = [f.result() for f in futures]

    rows = []
    for i, (point, (_, path), result) in enumerate(zip(points, jobs, results)):
        row: dict[str, Any] = {"run": run_dir_name(i)}
        row.update({k: _cell(v) for k, v in point.items()})
        row.update(
            status=result["status"],
            out_dir=path,
            final_mean_reward=result["final_mean_reward"],
            error=result["error"],
        )
        rows.append(row)

    columns = ["run", *grid, "status", "out_dir", "final_mean_reward", "error"]
    index = pd.DataFrame(rows, columns=columns)
    index.to_csv(out_dir / INDEX_FILE, index=False)
    return index
