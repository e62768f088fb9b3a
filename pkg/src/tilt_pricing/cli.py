# Tilt Pricing - Nonparametric KL trust-region pricing for demand response
# Copyright (c) 2025 Maxence Bernard (maxencebernardhub)
# Licensed under the MIT License. See LICENSE file for details.

"""
Command-Line Interface (CLI) for Tilt Pricing.

The CLI is intentionally thin: it parses arguments, resolves the run
configuration and hands over to the run services (``runner``, ``sweep``).
It implements no learning or market logic itself.


Commands
--------

``train``
    Train the trust-region pricing policy (and the comparators listed in
    ``[training] baselines``). Writes ``metrics.csv``, ``policy.csv``,
    ``metrics_<comparator>.csv``, optionally ``trajectory.csv`` and
    ``manifest.json`` into ``--out``.

``eval``
    Roll out a saved policy (``--policy``) and write ``pricing.csv``,
    ``response.csv``, ``summary.csv`` and ``manifest.json``. Evaluation is
    greedy unless ``--stochastic`` is given.

``sweep``
    Train once per point of the cartesian product of the ``--grid``
    entries, one directory per point, plus ``index.csv``.


Configuration and overrides
---------------------------

``--config`` accepts a path or a bare name (``dr3_discrete`` resolves to
``config/dr3_discrete.toml``). Without it, ``tilt_pricing_config.toml`` in the
current directory is used.

Values are overridden, lowest precedence first, by ``TILT_PRICING_<KEY>``
environment variables, ``--set KEY=VALUE`` (repeatable) and finally the
dedicated flags (``--seed``, ``--dump-trajectory``).


Exit status
-----------

0 on success, 1 on configuration, I/O or training failures (message on
stderr), 2 on usage errors. ``sweep`` returns 1 when any grid point fails.


Examples
--------

    tilt-pricing train --config dr3_discrete --seed 7 --out runs/dr3
    tilt-pricing train --set delta=0.01 --set advantage_estimator=gae
    tilt-pricing eval --policy runs/dr3/policy.csv --episodes 20 --out runs/eval
    tilt-pricing sweep --grid seed=1,2,3 --grid n_customers=3,30 --workers 3
"""

import argparse
import logging
import sys
from datetime import datetime
from pathlib import Path
from typing import Optional

from . import __version__
from .config import load_settings, resolve_config_path
from .runner import run_evaluation, run_training
from .sweep import INDEX_FILE, parse_grid, run_sweep
from .trainer import TrainingError

logger = logging.getLogger(__name__)


def _build_parser() -> argparse.ArgumentParser:
    """Create and configure the argument parser for the CLI."""
    ap = argparse.ArgumentParser(
        prog="tilt-pricing",
        description=(
            "Tilt Pricing - Nonparametric KL trust-region pricing for demand "
            "response. Trains, evaluates and sweeps retail pricing policies on "
            "a simulated electricity market."
        ),
    )
    ap.add_argument(
        "--version",
        action="store_true",
        help="Show the installed version of tilt_pricing and exit.",
    )

    # Options shared by every subcommand
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--config",
        dest="config_path",
        help=(
            "TOML run file, or a name under config/ (e.g. 'dr3_discrete'). "
            "If omitted, 'tilt_pricing_config.toml' in the current directory "
            "is used."
        ),
    )
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="Override a configuration value (repeatable), e.g. --set delta=0.01.",
    )
    common.add_argument("--seed", type=int, help="Override the root seed.")
    common.add_argument(
        "--out",
        dest="out_dir",
        help="Output directory. If omitted, 'data/output/<command>_<timestamp>'.",
    )
    common.add_argument(
        "-v",
        "--verbose",
        action="count",
        default=0,
        help="Log progress (-v: INFO, -vv: DEBUG).",
    )

    subparsers = ap.add_subparsers(dest="command", metavar="command")

    train_p = subparsers.add_parser(
        "train", parents=[common], help="Train a pricing policy."
    )
    train_p.add_argument(
        "--dump-trajectory",
        action="store_true",
        help="Also write trajectory.csv (greedy rollout of the final policy).",
    )

    eval_p = subparsers.add_parser(
        "eval", parents=[common], help="Evaluate a saved policy."
    )
    eval_p.add_argument(
        "--policy",
        dest="policy_path",
        required=True,
        help="Policy dump (policy.csv) written by 'train'.",
    )
    eval_p.add_argument(
        "--episodes", type=int, default=10, help="Evaluation episodes (default 10)."
    )
    eval_p.add_argument(
        "--stochastic",
        action="store_true",
        help="Sample actions instead of using the greedy action.",
    )

    sweep_p = subparsers.add_parser(
        "sweep", parents=[common], help="Train over a parameter grid."
    )
    sweep_p.add_argument(
        "--grid",
        action="append",
        default=[],
        metavar="KEY=V1,V2,...",
        help="Grid values for one configuration key (repeatable).",
    )
    sweep_p.add_argument(
        "--workers",
        type=int,
        default=1,
        help="Worker processes for grid points (default 1: sequential).",
    )

    return ap


def _configure_logging(verbosity: int) -> None:
    level = logging.WARNING
    if verbosity == 1:
        level = logging.INFO
    elif verbosity >= 2:
        level = logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def _out_dir(args: argparse.Namespace) -> Path:
    if args.out_dir:
        return Path(args.out_dir)
    timestamp = datetime.now().strftime("%Y-%m-%d-%H-%M-%S")
    return Path("data/output") / f"{args.command}_{timestamp}"


def _load(args: argparse.Namespace, extra: tuple[str, ...] = ()):
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    overrides.extend(extra)
    return load_settings(resolve_config_path(args.config_path), overrides)


def _handle_train(args: argparse.Namespace) -> int:
    extra = ("dump_trajectory=true",) if args.dump_trajectory else ()
    settings = _load(args, extra)
    out_dir = _out_dir(args)
    print(f"Training with {settings.source} into {out_dir} ...")
    outcome = run_training(settings, out_dir)
    for path in outcome.artifacts:
        print(f"Wrote {path}")
    print(f"Final mean reward (last 10 iterations): {outcome.final_mean_reward:.4f}")
    return 0


def _handle_eval(args: argparse.Namespace) -> int:
    settings = _load(args)
    out_dir = _out_dir(args)
    outcome = run_evaluation(
        settings,
        Path(args.policy_path),
        out_dir,
        args.episodes,
        stochastic=args.stochastic,
    )
    for path in outcome.artifacts:
        print(f"Wrote {path}")
    return 0


def _handle_sweep(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    try:
        grid = parse_grid(args.grid)
    except ValueError as exc:
        return _usage(parser, str(exc))
    if not grid:
        return _usage(parser, "sweep needs at least one --grid KEY=V1,V2,...")
    if args.workers < 1:
        return _usage(parser, "--workers must be >= 1")

    settings = _load(args)
    out_dir = _out_dir(args)
    index = run_sweep(settings, grid, out_dir, workers=args.workers)
    print(f"Wrote {out_dir / INDEX_FILE} ({len(index)} rows)")

    failed = index[index["status"] != "finished"]
    for _, row in failed.iterrows():
        print(f"Run {row['run']} failed: {row['error']}", file=sys.stderr)
    return 1 if len(failed) else 0


def _usage(parser: argparse.ArgumentParser, message: str) -> int:
    parser.print_usage(sys.stderr)
    print(f"{parser.prog}: error: {message}", file=sys.stderr)
    return 2


def main(argv: Optional[list[str]] = None) -> int:
    """Entry point for the Tilt Pricing CLI; returns the exit status."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    # --version: short-circuit and exit early.
    if args.version:
        print(f"tilt_pricing version {__version__}")
        return 0
    if args.command is None:
        return _usage(parser, "a command is required (train, eval or sweep)")

    _configure_logging(args.verbose)
    try:
        if args.command == "train":
            return _handle_train(args)
        if args.command == "eval":
            return _handle_eval(args)
        return _handle_sweep(args, parser)
    except (FileNotFoundError, ValueError, TrainingError, OSError) as exc:
        print(f"Error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
