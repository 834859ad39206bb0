"""Command-line entry point: train, eval, annotate, ablate, gen-world.

Every ``cmd_*`` function returns a process exit code and prints a one-line
diagnostic to stderr on failure. Exit codes: 0 success, 1 data or runtime
error, 2 configuration error, 3 output directory locked by another run.
"""
from __future__ import annotations

import argparse
import importlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import Callable, Sequence

from filelock import FileLock, Timeout

from . import config as cfgmod
from .env import generate_world, trajectory_from_record, trajectory_to_record
from .env.world import ToolWorld
from .errors import ConfigError, SchemaError, StepGrainError
from .evaluation import pass_rate
from .optim import train
from .persist import atomic_write_json, atomic_write_text, csv_text, jsonl_text, read_jsonl
from .policy import check_compatible, params_from_dict, params_to_dict
from .reward import (
    ABLATION_MODES,
    apply_annotation,
    annotated_record,
    parse_annotation_response,
    serialize_annotation_request,
    shape_rewards,
)

log = logging.getLogger("stepgrain")

LOG_ENV = "STEPGRAIN_LOG_LEVEL"
EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_LOCKED = 0, 1, 2, 3
METRIC_COLUMNS = ["iteration", "mean_return", "pass_rate", "tool_success_rate", "mean_kl", "clip_fraction", "value_loss"]
PASS_THRESHOLD = 0.9


class _Locked(Exception):
    pass


def _fail(code: int, message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def _setup_logging(level: str) -> None:
    level = os.environ.get(LOG_ENV, level).upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format="%(levelname)s %(name)s: %(message)s")
    log.setLevel(getattr(logging, level, logging.INFO))


def parse_seed_overrides(items: Sequence[str] | None) -> dict:
    """``["7"]`` sets every seed; ``["world=3", "policy=1"]`` sets named ones."""
    out: dict = {}
    for item in items or ():
        name, sep, value = item.partition("=")
        try:
            if sep:
                out[name.strip()] = int(value)
            else:
                out.update(dict.fromkeys(("world", "policy", "rollout", "eval"), int(name)))
        except ValueError:
            raise ConfigError(f"bad seed override {item!r}; use N or name=N") from None
    return out


def _resolve(config_path, seeds=None, out=None) -> cfgmod.ExperimentConfig:
    exp = cfgmod.load(config_path)
    overrides = parse_seed_overrides(seeds)
    if overrides:
        exp = exp.with_seeds(**overrides)
    if out is not None:
        exp = exp.with_output_dir(out)
    return exp


def _lock(out_dir: Path) -> FileLock:
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(out_dir / ".lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise _Locked(f"{out_dir} is in use by another run") from None
    return lock


def _write_metrics(out_dir: Path, rows: list, stem: str = "metrics") -> None:
    atomic_write_text(out_dir / f"{stem}.csv", csv_text(rows, METRIC_COLUMNS))
    atomic_write_text(out_dir / f"{stem}.jsonl", jsonl_text(rows))


def _run_training(exp: cfgmod.ExperimentConfig, world: ToolWorld, out_dir: Path, stem: str = "metrics",
                  ablation: str | None = None):
    tcfg = exp.train_config() if ablation is None else exp.train_config(ablation_mode=ablation)
    rows: list = []
    every = exp.io.checkpoint_interval
    ckpt_dir = out_dir / "checkpoints"
    suffix = "" if ablation is None else f"_{ablation}"

    def on_iteration(it, params, vparams, row):
        rows.append(row)
        if every and it % every == 0:
            atomic_write_json(ckpt_dir / f"iter_{it:05d}{suffix}.json", params_to_dict(params, vparams))
            _write_metrics(out_dir, rows, stem)
        log.info("iteration %d pass_rate=%.3f mean_return=%.3f", it, row["pass_rate"], row["mean_return"])

    params, vparams, metrics = train(world, tcfg, callback=on_iteration)
    _write_metrics(out_dir, metrics, stem)
    atomic_write_json(out_dir / f"checkpoint{suffix}.json", params_to_dict(params, vparams))
    return params, metrics


def _prepare(exp: cfgmod.ExperimentConfig, out_dir: Path) -> ToolWorld:
    world = generate_world(exp.world, exp.seeds.world)
    atomic_write_text(out_dir / "config.toml", exp.to_toml())
    atomic_write_text(out_dir / "world.json", world.to_json() + "\n")
    return world


def cmd_train(config_path, seeds: Sequence[str] | None = None, out=None) -> int:
    """Train one policy; writes config snapshot, world, metrics and checkpoints."""
    try:
        exp = _resolve(config_path, seeds, out)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, str(exc))
    _setup_logging(exp.io.log_level)
    out_dir = Path(exp.io.output_dir)
    try:
        with _lock(out_dir):
            world = _prepare(exp, out_dir)
            _, metrics = _run_training(exp, world, out_dir)
    except _Locked as exc:
        return _fail(EXIT_LOCKED, str(exc))
    except (OSError, StepGrainError) as exc:
        return _fail(EXIT_ERROR, str(exc))
    final = metrics[-1] if metrics else {}
    print(f"trained {len(metrics)} iterations; final pass_rate={final.get('pass_rate', float('nan')):.3f}")
    return EXIT_OK


def _load_checkpoint(path):
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        return params_from_dict(data)
    except OSError as exc:
        raise StepGrainError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise StepGrainError(f"corrupted checkpoint {path}: {exc}") from None


def cmd_eval(config_path, checkpoint_path=None, strategy: str | None = None, seeds: Sequence[str] | None = None,
             out=None) -> int:
    """Evaluate a checkpoint (or the oracle) and write an EvalReport.

    Writes ``eval_<strategy>.json``, per-task records as
    ``eval_<strategy>_tasks.jsonl`` and the rolled-out trajectories as
    ``trajectories_<strategy>.jsonl`` into the output directory.
    """
    import numpy as np

    try:
        exp = _resolve(config_path, seeds, out)
        strategy = strategy or exp.eval.strategy
        if strategy not in ("sequential", "dfs", "oracle"):
            raise ConfigError(f"unknown strategy {strategy!r}")
        if strategy != "oracle" and checkpoint_path is None:
            raise ConfigError(f"strategy {strategy!r} needs --checkpoint")
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, str(exc))
    _setup_logging(exp.io.log_level)
    out_dir = Path(exp.io.output_dir)
    try:
        world = generate_world(exp.world, exp.seeds.world)
        params = None
        if strategy != "oracle":
            params, _ = _load_checkpoint(checkpoint_path)
            check_compatible(params, world)
        ev = exp.eval
        with _lock(out_dir):
            report = pass_rate(
                world, params, strategy=strategy, n_runs=ev.n_runs, rng=np.random.default_rng(exp.seeds.eval),
                greedy=ev.greedy, width=ev.width, budget=ev.budget, unsure_credit=ev.unsure_credit,
                alpha=exp.train.alpha,
            )
            atomic_write_text(out_dir / f"eval_{strategy}.json", report.to_json() + "\n")
            atomic_write_text(out_dir / f"eval_{strategy}_tasks.jsonl", jsonl_text(report.per_task))
            atomic_write_text(out_dir / f"trajectories_{strategy}.jsonl",
                              jsonl_text(trajectory_to_record(t) for t in report.trajectories))
    except _Locked as exc:
        return _fail(EXIT_LOCKED, str(exc))
    except (OSError, StepGrainError) as exc:
        return _fail(EXIT_ERROR, str(exc))
    print(f"strategy={strategy} pass_rate={report.pass_rate:.4f} tool_success_rate={report.tool_success_rate:.4f}")
    return EXIT_OK


def load_judge(spec: str) -> Callable:
    """Import ``package.module:callable``; it maps ``(prompt, schema)`` to a response."""
    module, sep, attr = spec.partition(":")
    if not sep:
        raise ConfigError(f"judge must look like module:callable, got {spec!r}")
    try:
        return getattr(importlib.import_module(module), attr)
    except (ImportError, AttributeError) as exc:
        raise ConfigError(f"cannot load judge {spec!r}: {exc}") from None


def _load_world(config_path=None, world_path=None) -> tuple[ToolWorld, float]:
    if world_path is not None:
        with open(world_path, encoding="utf-8") as fh:
            world = ToolWorld.from_json(fh.read())
        alpha = cfgmod.load(config_path).train.alpha if config_path else 1.0
        return world, alpha
    if config_path is None:
        raise ConfigError("annotate needs --config or --world")
    exp = cfgmod.load(config_path)
    return generate_world(exp.world, exp.seeds.world), exp.train.alpha


def cmd_annotate(trajectories_path, mode: str, out_path, config_path=None, world_path=None,
                 judge: Callable | str | None = None, responses_path=None, prompts_path=None) -> int:
    """Attach step-grained rewards to JSONL trajectories.

    ``oracle`` mode uses the simulator's judges. ``external`` mode renders
    each trajectory into a judge prompt and validates the response, which
    comes from ``judge`` (a callable or ``module:callable``) or, line by
    line, from ``responses_path``. ``prompts_path`` receives the prompts.
    On a bad line, the records annotated so far are still written.
    """
    if mode not in ("oracle", "external"):
        return _fail(EXIT_CONFIG, f"unknown annotation mode {mode!r}")
    try:
        world, alpha = _load_world(config_path, world_path)
        if mode == "external":
            if isinstance(judge, str):
                judge = load_judge(judge)
            if judge is None and responses_path is None:
                raise ConfigError("external mode needs a judge or a responses file")
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, str(exc))
    except (OSError, StepGrainError, ValueError, KeyError) as exc:
        return _fail(EXIT_ERROR, f"cannot load world: {exc}")
    _setup_logging(os.environ.get(LOG_ENV, "INFO"))

    done, prompts = [], []
    error = None
    try:
        responses = read_jsonl(responses_path) if responses_path is not None else None
        for n, rec in read_jsonl(trajectories_path):
            traj = trajectory_from_record(world, rec, line=n)
            if mode == "oracle":
                traj = traj.with_rewards(shape_rewards(world, traj, alpha))
            else:
                prompt, schema = serialize_annotation_request(traj, world)
                prompts.append({"line": n, "prompt": prompt, "schema": schema})
                if responses is not None:
                    try:
                        _, response = next(responses)
                    except StopIteration:
                        raise SchemaError("no judge response for this trajectory", n) from None
                else:
                    response = judge(prompt, schema)
                try:
                    parsed = parse_annotation_response(response, traj, world, line=n)
                except StepGrainError as exc:
                    raise SchemaError(str(exc), getattr(exc, "line", None) or n) from None
                traj = apply_annotation(traj, parsed, alpha)
            done.append(annotated_record(traj, alpha))
    except (SchemaError, OSError) as exc:
        error = exc
    try:
        atomic_write_text(out_path, jsonl_text(done))
        if prompts_path is not None:
            atomic_write_text(prompts_path, jsonl_text(prompts))
    except OSError as exc:
        return _fail(EXIT_ERROR, str(exc))
    if error is not None:
        return _fail(EXIT_ERROR, f"{error} ({len(done)} records written)")
    print(f"annotated {len(done)} trajectories ({mode})")
    return EXIT_OK


def cmd_ablate(config_path, seeds: Sequence[str] | None = None, out=None) -> int:
    """Train once per ablation mode with shared seeds; write ``ablation.csv``."""
    try:
        exp = _resolve(config_path, seeds, out)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, str(exc))
    _setup_logging(exp.io.log_level)
    out_dir = Path(exp.io.output_dir)
    rows = []
    try:
        with _lock(out_dir):
            world = _prepare(exp, out_dir)
            for mode in ABLATION_MODES:
                _, metrics = _run_training(exp, world, out_dir, stem=f"metrics_{mode}", ablation=mode)
                hit = next((r["iteration"] for r in metrics if r["pass_rate"] >= PASS_THRESHOLD), "")
                last = metrics[-1] if metrics else {}
                rows.append({
                    "mode": mode,
                    "final_pass_rate": last.get("pass_rate", ""),
                    "final_tool_success_rate": last.get("tool_success_rate", ""),
                    "iterations_to_threshold": hit,
                })
            atomic_write_text(out_dir / "ablation.csv", csv_text(rows))
    except _Locked as exc:
        return _fail(EXIT_LOCKED, str(exc))
    except (OSError, StepGrainError) as exc:
        return _fail(EXIT_ERROR, str(exc))
    for r in rows:
        print(f"{r['mode']}: final_pass_rate={r['final_pass_rate']}")
    return EXIT_OK


def cmd_gen_world(config_path=None, seeds: Sequence[str] | None = None, out=None) -> int:
    """Generate a world from the config's world section and write its JSON."""
    try:
        exp = _resolve(config_path, seeds) if config_path else cfgmod.ExperimentConfig()
        if not config_path and seeds:
            exp = exp.with_seeds(**parse_seed_overrides(seeds))
        world = generate_world(exp.world, exp.seeds.world)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, str(exc))
    text = world.to_json() + "\n"
    if out is None:
        sys.stdout.write(text)
    else:
        try:
            atomic_write_text(out, text)
        except OSError as exc:
            return _fail(EXIT_ERROR, str(exc))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stepgrain", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    seed_help = "seed override: N sets all seeds, name=N sets one (world, policy, rollout, eval)"

    p = sub.add_parser("train", help="train a policy")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", action="append", help=seed_help)
    p.add_argument("--out", help="output directory (overrides io.output_dir)")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--strategy", choices=["sequential", "dfs", "oracle"])
    p.add_argument("--seed", action="append", help=seed_help)
    p.add_argument("--out")

    p = sub.add_parser("annotate", help="annotate JSONL trajectories with step rewards")
    p.add_argument("trajectories")
    p.add_argument("--mode", choices=["oracle", "external"], default="oracle")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--world", help="world JSON (instead of generating from --config)")
    p.add_argument("--judge", help="external judge adapter, module:callable")
    p.add_argument("--responses", help="JSONL of judge responses, one per trajectory")
    p.add_argument("--prompts-out", help="write the judge prompts as JSONL")

    p = sub.add_parser("ablate", help="compare full training with both ablations")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", action="append", help=seed_help)
    p.add_argument("--out")

    p = sub.add_parser("gen-world", help="generate a world and print or save its JSON")
    p.add_argument("--config")
    p.add_argument("--seed", action="append", help=seed_help)
    p.add_argument("--out")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "train":
        return cmd_train(args.config, args.seed, args.out)
    if args.command == "eval":
        return cmd_eval(args.config, args.checkpoint, args.strategy, args.seed, args.out)
    if args.command == "annotate":
        return cmd_annotate(args.trajectories, args.mode, args.out, args.config, args.world, args.judge,
                            args.responses, args.prompts_out)
    if args.command == "ablate":
        return cmd_ablate(args.config, args.seed, args.out)
    return cmd_gen_world(args.config, args.seed, args.out)


if __name__ == "__main__":
    sys.exit(main())
