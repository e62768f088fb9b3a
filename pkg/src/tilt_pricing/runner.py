# Tilt Pricing - Nonparametric KL trust-region pricing for demand response
# Copyright (c) 2025 Maxence Bernard (maxencebernardhub)
# Licensed under the MIT License. See LICENSE file for details.

"""
High-level run services.

This module sits between:
- the library modules (trainer, baselines, io, views), and
- user-facing layers such as the CLI and the sweep orchestrator.

Responsibilities
----------------
1) Training runs
   - write the manifest (status ``running``) before training starts,
   - train the trust-region learner and the configured comparators,
   - write ``metrics.csv``, ``policy.csv``, ``metrics_<comparator>.csv`` and
     optionally ``trajectory.csv`` (greedy rollout of the final policy),
   - finalize the manifest (``finished``, or ``failed`` with the error).

2) Evaluation runs
   - load a policy dump checked against the configuration,
   - roll out evaluation episodes,
   - write ``pricing.csv``, ``response.csv`` and ``summary.csv``.

Both services raise on failure after recording it in the manifest; turning
errors into exit codes is the caller's job.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .baselines import run_random, train_qlearning
from .config import RunSettings, resolved_snapshot
from .io import (
    RunManifest,
    read_policy,
    write_frames,
    write_manifest,
    write_metrics,
    write_policy,
)
from .mdp import trajectory_to_frame
from .trainer import MetricsRecord, evaluate, rollout, train
from .views import pricing_table, response_table, summary_table

logger = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.json"


@dataclass
class RunOutcome:
    """Summary of a finished run, used for progress output and sweep indexes."""

    out_dir: Path
    artifacts: list[Path] = field(default_factory=list)
    metrics: list[MetricsRecord] = field(default_factory=list)

    @property
    def final_mean_reward(self) -> float:
        """Mean episode reward over the last (up to) 10 iterations."""
        if not self.metrics:
            return float("nan")
        tail = self.metrics[-10:]
        return float(np.mean([m.mean_reward for m in tail]))


def _start_manifest(settings: RunSettings, out_dir: Path, command: str) -> RunManifest:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(
        config=resolved_snapshot(settings),
        seed=settings.train.seed,
        out_dir=str(out_dir),
        command=command,
    )
    manifest.add(MANIFEST_FILE)
    write_manifest(manifest, out_dir / MANIFEST_FILE)
    return manifest


def _finish(manifest: RunManifest, out_dir: Path, error: Optional[BaseException]):
    manifest.status = "failed" if error is not None else "finished"
    manifest.error = "" if error is None else str(error)
    write_manifest(manifest, out_dir / MANIFEST_FILE)


def run_training(settings: RunSettings, out_dir: Path) -> RunOutcome:
    """
    Train and write all training artifacts into ``out_dir``.

    Raises:
        TrainingError, ValueError, OSError: after the manifest was marked
            ``failed``.
    """
    out_dir = Path(out_dir)
    manifest = _start_manifest(settings, out_dir, "train")
    outcome = RunOutcome(out_dir=out_dir)
    market, cfg = settings.market, settings.train

    def _record(path: Path) -> None:
        manifest.add(path)
        outcome.artifacts.append(path)

    try:
        policy, metrics = train(market, cfg)
        outcome.metrics = metrics
        _record(write_metrics(metrics, out_dir / "metrics.csv"))
        _record(write_policy(policy, out_dir / "policy.csv"))

        if "qlearning" in cfg.baselines:
            _, q_metrics = train_qlearning(market, cfg)
            _record(write_metrics(q_metrics, out_dir / "metrics_qlearning.csv"))
        if "random" in cfg.baselines:
            random_metrics = run_random(market, cfg)
            _record(write_metrics(random_metrics, out_dir / "metrics_random.csv"))

        if settings.dump_trajectory:
            traj = rollout(policy, market, cfg.scheme, cfg.seed, None, greedy=True)
            frame = trajectory_to_frame(traj)
            (path,) = write_frames([(frame, out_dir / "trajectory.csv")])
            _record(path)
    except BaseException as exc:
        _finish(manifest, out_dir, exc)
        raise

    _finish(manifest, out_dir, None)
    logger.info("Training run written to %s", out_dir)
    return outcome


def run_evaluation(
    settings: RunSettings,
    policy_path: Path,
    out_dir: Path,
    episodes: int,
    stochastic: bool = False,
) -> RunOutcome:
    """
    Evaluate a policy dump and write the pricing/response/summary tables.

    Raises:
        FileNotFoundError: if the policy dump does not exist.
        ValueError: if the dump does not match the configuration.
    """
    out_dir = Path(out_dir)
    manifest = _start_manifest(settings, out_dir, "eval")
    outcome = RunOutcome(out_dir=out_dir)
    try:
        policy = read_policy(policy_path, settings.market, settings.train)
        result = evaluate(
            policy,
            settings.market,
            episodes,
            settings.train.seed,
            settings.train.scheme,
            stochastic=stochastic,
        )
        written = write_frames(
            [
                (pricing_table(result), out_dir / "pricing.csv"),
                (response_table(result), out_dir / "response.csv"),
                (summary_table(result), out_dir / "summary.csv"),
            ]
        )
        for path in written:
            manifest.add(path)
        outcome.artifacts.extend(written)
    except BaseException as exc:
        _finish(manifest, out_dir, exc)
        raise

    _finish(manifest, out_dir, None)
    return outcome
