"""Operator commands: run experiments, play checkpoints, measure baselines,
export metrics.

Exit codes: 0 on success, 1 on runtime failure (partial artifacts are
flushed), 2 on usage or configuration errors.  Every command honors --seed
(falling back to the PRL_SEED environment variable) and writes only inside
its --out / --run directory.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .config import (ConfigError, PRESETS, build_settings, echo_config,
                     load_config_file, load_preset)
from .envs import GAME_NAMES, make_env
from .planner import PlannerConfig, RandomShootingPlanner
from .store import FormatError, IncompatibleCheckpointError, load_checkpoint
from .trainer import (OptimalCatchPolicy, RandomPolicy, play_episodes,
                      read_report, run_experiment, write_metric_csvs)

__all__ = ["main", "entry"]


class UsageError(ValueError):
    pass


def _resolve_seed(value: int | None) -> int | None:
    if value is not None:
        return value
    env = os.environ.get("PRL_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise UsageError(f"PRL_SEED is not an integer: {env!r}") from exc
    return None


def _env_for_checkpoint(name: str, model_config):
    """Build the named game at the checkpoint's frame geometry; a geometry the
    game cannot support means the checkpoint is incompatible with the env."""
    try:
        return make_env(name, frame_stack=model_config.frame_stack,
                        height=model_config.frame_height,
                        width=model_config.frame_width)
    except ValueError as exc:
        raise IncompatibleCheckpointError(
            f"checkpoint is incompatible with {name}: {exc}") from exc


def cmd_train(args) -> int:
    if args.config is not None:
        values = load_config_file(args.config)
    else:
        values = load_preset(args.preset)
    overrides: dict[str, str] = {}
    seed = _resolve_seed(args.seed)
    if seed is not None:
        overrides["seed"] = str(seed)
    if args.workers is not None:
        overrides["workers"] = str(args.workers)
    settings = build_settings(values, overrides)

    if args.resume is not None and not os.path.isfile(args.resume):
        raise UsageError(f"resume checkpoint not found: {args.resume}")
    os.makedirs(args.out, exist_ok=True)
    echo_config(settings, os.path.join(args.out, "config.txt"))

    rows = run_experiment(settings.model, settings.experiment, args.out,
                          optimizer=settings.optimizer,
                          resume_checkpoint=args.resume, log=print)
    write_metric_csvs(rows, args.out)
    from .plots import render_report_figures
    render_report_figures(rows, args.out)
    return 0


def cmd_play(args) -> int:
    if args.episodes < 1:
        raise UsageError(f"--episodes must be positive, got {args.episodes}")
    model, _ = load_checkpoint(args.checkpoint)
    env = _env_for_checkpoint(args.env, model.config)
    seed = _resolve_seed(args.seed) or 0
    rng = np.random.default_rng(seed)
    planner = RandomShootingPlanner(
        model,
        PlannerConfig(num_candidates=args.candidates, horizon=model.config.horizon,
                      min_survival=args.min_survival, seed=seed + 1),
        env.valid_controls(), record_decisions=args.diagnostics)
    scores = play_episodes(env, planner, args.episodes, rng, args.noop_max)

    mean, lo, hi = float(np.mean(scores)), min(scores), max(scores)
    print(f"env={args.env} episodes={args.episodes} mean={mean:.4f} min={lo} max={hi}")
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "play_scores.csv"), "w", encoding="utf-8") as fh:
        fh.write("episode,score\n")
        for i, score in enumerate(scores):
            fh.write(f"{i},{score}\n")
    with open(os.path.join(args.out, "play_summary.csv"), "w", encoding="utf-8") as fh:
        fh.write("env,episodes,mean,min,max\n")
        fh.write(f"{args.env},{args.episodes},{mean!r},{lo},{hi}\n")
    if args.diagnostics:
        import json
        with open(os.path.join(args.out, "play_decisions.jsonl"), "w",
                  encoding="utf-8") as fh:
            for record in planner.decision_log:
                fh.write(json.dumps(record) + "\n")
    return 0


def cmd_baseline(args) -> int:
    if args.episodes < 1:
        raise UsageError(f"--episodes must be positive, got {args.episodes}")
    env = make_env(args.env)
    seed = _resolve_seed(args.seed) or 0
    rng = np.random.default_rng(seed)
    if args.policy == "random":
        policy = RandomPolicy(env.valid_controls(), rng)
    else:
        if args.env != "catch":
            raise UsageError(f"the optimal policy is only defined for catch, not {args.env}")
        policy = OptimalCatchPolicy()
    scores = play_episodes(env, policy, args.episodes, rng, args.noop_max)

    mean, std = float(np.mean(scores)), float(np.std(scores))
    print(f"env={args.env} policy={args.policy} episodes={args.episodes} "
          f"mean={mean:.4f} std={std:.4f}")
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "baseline.csv"), "w", encoding="utf-8") as fh:
        fh.write("env,policy,episodes,mean,std\n")
        fh.write(f"{args.env},{args.policy},{args.episodes},{mean!r},{std!r}\n")
    return 0


def cmd_export_metrics(args) -> int:
    if args.format != "csv":
        raise UsageError(f"unsupported format {args.format!r}; only csv is available")
    report_path = os.path.join(args.run, "report.jsonl")
    if not os.path.isfile(report_path):
        raise UsageError(f"no report.jsonl in run directory {args.run}")
    rows, warnings = read_report(report_path)
    for warning in warnings:
        print(f"warning: {warning}", file=sys.stderr)
    write_metric_csvs(rows, args.run)
    from .plots import render_report_figures
    render_report_figures(rows, args.run)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="prl",
        description="Learn a score/death predictor from play and act by "
                    "scoring random candidate control sequences.")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="run a full generate/train experiment")
    group = train.add_mutually_exclusive_group()
    group.add_argument("--config", help="key = value config file")
    group.add_argument("--preset", default="desk", choices=sorted(PRESETS),
                       help="named configuration preset (default: desk)")
    train.add_argument("--out", required=True, help="run directory for all artifacts")
    train.add_argument("--seed", type=int, help="master seed (overrides config)")
    train.add_argument("--resume", help="checkpoint to continue from")
    train.add_argument("--workers", type=int,
                       help="data-generation processes (1 = fully serial)")
    train.set_defaults(func=cmd_train)

    play = sub.add_parser("play", help="play episodes with a trained checkpoint")
    play.add_argument("--checkpoint", required=True)
    play.add_argument("--env", required=True, choices=GAME_NAMES)
    play.add_argument("--episodes", type=int, required=True)
    play.add_argument("--candidates", type=int, default=25,
                      help="planner candidate sequences per step")
    play.add_argument("--min-survival", type=float, default=0.5)
    play.add_argument("--noop-max", type=int, default=0)
    play.add_argument("--seed", type=int)
    play.add_argument("--out", default=".", help="directory for the score CSVs")
    play.add_argument("--diagnostics", action="store_true",
                      help="also dump one record per planner decision")
    play.set_defaults(func=cmd_play)

    baseline = sub.add_parser("baseline", help="score a fixed policy")
    baseline.add_argument("--env", required=True, choices=GAME_NAMES)
    baseline.add_argument("--episodes", type=int, required=True)
    baseline.add_argument("--policy", choices=("random", "optimal"), default="random")
    baseline.add_argument("--noop-max", type=int, default=0)
    baseline.add_argument("--seed", type=int)
    baseline.add_argument("--out", default=".", help="directory for baseline.csv")
    baseline.set_defaults(func=cmd_baseline)

    export = sub.add_parser("export-metrics",
                            help="rewrite a run's report as per-game CSVs and figures")
    export.add_argument("--run", required=True, help="run directory with report.jsonl")
    export.add_argument("--format", default="csv")
    export.set_defaults(func=cmd_export_metrics)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, UsageError, FormatError, IncompatibleCheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure; partial artifacts already flushed
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())
