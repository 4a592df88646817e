"""Command-line driver.

Exit codes: 0 success, 2 configuration or input error, 3 training aborted,
4 a trend verdict failed.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

from gridnav.bc import DemoDataset, build_dataset, train_bc
from gridnav.config import EXPERIMENTS, ConfigError, ExperimentConfig, dump_config, load_config, preset
from gridnav.evaluation import SplitError, evaluate
from gridnav.experiments import (
    ENV_OUTPUT_ROOT,
    InsufficientPairsError,
    Splits,
    compute_verdicts,
    emit_reports,
    load_report,
    prepare,
    read_scene_files,
    rows_from_csv,
    run_study,
    write_scene_files,
)
from gridnav.net import Checkpoint
from gridnav.ppo import TrainingAborted, train_ppo
from gridnav.rollout import NetworkPolicy

EXIT_OK, EXIT_CONFIG, EXIT_ABORT, EXIT_VERDICT = 0, 2, 3, 4

log = logging.getLogger("gridnav")


def _config(args, experiment: str | None = None) -> ExperimentConfig:
    base = preset(experiment) if experiment else None
    overrides = list(args.set or [])
    if experiment:
        overrides.append(f"experiment={experiment}")
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    cfg = load_config(args.config, overrides, base)
    out = args.out or os.environ.get(ENV_OUTPUT_ROOT)
    return replace(cfg, output_dir=out) if out else cfg


def _data_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.output_dir) / "data"


def _load_or_make(cfg: ExperimentConfig):
    """Scenes and splits from the data directory, generated on first use."""
    d, h = _data_dir(cfg), cfg.data_hash()
    try:
        train, heldout = read_scene_files(d, h)
        splits = Splits.load(d, h)
    except FileNotFoundError:
        train, heldout, splits = prepare(cfg)
        write_scene_files(d, h, train, heldout)
        splits.save(d, h)
    return train, heldout, splits


def _print(obj) -> None:
    print(json.dumps(obj, sort_keys=True, indent=2))


def cmd_gen_scenes(args) -> int:
    cfg = _config(args)
    train, heldout, _ = prepare(cfg)
    paths = write_scene_files(_data_dir(cfg), cfg.data_hash(), train, heldout)
    _print({k: str(v) for k, v in paths.items()})
    return EXIT_OK


def cmd_gen_splits(args) -> int:
    cfg = _config(args)
    train, heldout, splits = prepare(cfg)
    d, h = _data_dir(cfg), cfg.data_hash()
    paths = write_scene_files(d, h, train, heldout)
    paths.update(splits.save(d, h))
    _print({k: str(v) for k, v in paths.items()})
    return EXIT_OK


def cmd_gen_demos(args) -> int:
    cfg = _config(args)
    train, heldout, splits = _load_or_make(cfg)
    specs = splits.train if args.split == "train" else splits.augment
    data = build_dataset(train, specs, cfg.env, split=args.split)
    path = _data_dir(cfg) / f"demos_{args.split}_{cfg.data_hash()}.jsonl"
    data.save(path)
    _print({"demos": str(path), "trajectories": len(data), "provenance": data.provenance})
    return EXIT_OK


def _train_seed(args, cfg: ExperimentConfig) -> int:
    return cfg.seeds[0] if args.train_seed is None else args.train_seed


def cmd_train_ppo(args) -> int:
    cfg = _config(args)
    train, heldout, splits = _load_or_make(cfg)
    seed = _train_seed(args, cfg)
    run = Path(cfg.output_dir) / "runs" / f"ppo_{cfg.hash()}_s{seed}"
    res = train_ppo(replace(cfg.ppo, seed=seed), train, splits.train, cfg.env, run)
    last = res.ledger[-1] if res.ledger else {}
    _print({"run_dir": str(run), "env_steps": res.env_steps, "grad_steps": res.grad_steps,
            "final_success_rate": last.get("success_rate")})
    return EXIT_OK


def cmd_train_bc(args) -> int:
    cfg = _config(args)
    train, heldout, splits = _load_or_make(cfg)
    seed = _train_seed(args, cfg)
    if args.demos:
        data = DemoDataset.load(args.demos)
    else:
        data = build_dataset(train, splits.train, cfg.env)
        if args.augment:
            data = data.merged(build_dataset(train, splits.augment, cfg.env, split="augment"))
    run = Path(cfg.output_dir) / "runs" / f"bc_{cfg.hash()}_s{seed}"
    res = train_bc(replace(cfg.bc, seed=seed), data, train, cfg.env, run)
    _print({"run_dir": str(run), "grad_steps": res.grad_steps, "final_nll": res.ledger[-1]["nll"]})
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    train, heldout, splits = _load_or_make(cfg)
    ckpt = Checkpoint.load(args.checkpoint)
    goal_mode = ckpt.meta.get("goal_mode", "relative")
    seeds = cfg.seeds if args.eval_seeds is None else [int(s) for s in args.eval_seeds.split(",")]
    reports = evaluate(
        NetworkPolicy(ckpt.theta, ckpt.spec),
        train + heldout,
        splits.regimes(),
        cfg.eval_episodes,
        seeds,
        cfg.env,
        goal_mode,
        train_specs=splits.train,
        config_hash=cfg.hash(),
    )
    out = Path(cfg.output_dir) / f"eval_{Path(args.checkpoint).stem}_{cfg.hash()}.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps([r.to_dict() for r in reports], sort_keys=True, indent=2) + "\n", encoding="utf-8")
    _print({r.regime: {"success_rate": r.success_rate, "spl": r.spl} for r in reports if r.seed is None})
    return EXIT_OK


def _verdict_exit(verdicts) -> int:
    for v in verdicts:
        status = "PASS" if v.passed else "FAIL"
        print(f"{status} {v.name}: value={v.value} margin={v.margin} seeds={v.seeds} ({v.aggregation})")
    return EXIT_OK if all(v.passed for v in verdicts) else EXIT_VERDICT


def cmd_study(args) -> int:
    cfg = _config(args, args.tag)
    started = time.time()
    study = run_study(cfg, args.workers)
    paths = emit_reports(study, cfg.output_dir, started)
    (Path(cfg.output_dir) / f"config_{study.experiment}_{study.config_hash}.ini").write_text(dump_config(cfg), encoding="utf-8")
    print(f"report: {paths['report']}")
    code = _verdict_exit(study.verdicts)
    if study.aborted:
        for a in study.aborted:
            print(f"ABORTED {a}", file=sys.stderr)
        return EXIT_ABORT
    return code


def cmd_report(args) -> int:
    """Recompute verdicts offline from an emitted report or metrics CSV."""
    path = Path(args.path)
    if path.suffix == ".csv":
        cfg = _config(args, args.experiment)
        rows = rows_from_csv(path.read_text(encoding="utf-8"))
        verdicts = compute_verdicts(cfg.experiment, rows, cfg.margins, cfg.scene_counts)
    else:
        verdicts = load_report(path).verdicts
    return _verdict_exit(verdicts)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", help="INI config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key, e.g. ppo.lr=1e-3")
    common.add_argument("--seed", type=int, help="data seed for scenes and splits")
    common.add_argument("--out", help=f"output root (default: ${ENV_OUTPUT_ROOT} or config output_dir)")
    common.add_argument("--verbose", "-v", action="store_true")

    p = argparse.ArgumentParser(prog="gridnav", description="Goal-conditioned grid navigation: PPO vs behavior cloning.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-scenes", parents=[common], help="generate training and held-out scenes").set_defaults(fn=cmd_gen_scenes)
    sub.add_parser("gen-splits", parents=[common], help="generate scenes and disjoint spec splits").set_defaults(fn=cmd_gen_splits)
    g = sub.add_parser("gen-demos", parents=[common], help="optimal demonstrations for a split")
    g.add_argument("--split", choices=("train", "augment"), default="train")
    g.set_defaults(fn=cmd_gen_demos)
    for name, fn in (("train-ppo", cmd_train_ppo), ("train-bc", cmd_train_bc)):
        t = sub.add_parser(name, parents=[common], help=f"train one {name[6:].upper()} agent")
        t.add_argument("--train-seed", type=int, help="agent seed (default: first of config seeds)")
        if name == "train-bc":
            t.add_argument("--demos", help="demo JSONL from gen-demos (default: build from the train split)")
            t.add_argument("--augment", action="store_true", help="add the augment split's demos")
        t.set_defaults(fn=fn)
    e = sub.add_parser("evaluate", parents=[common], help="evaluate a checkpoint on all three regimes")
    e.add_argument("checkpoint")
    e.add_argument("--eval-seeds", help="comma-separated evaluation seeds (default: config seeds)")
    e.set_defaults(fn=cmd_evaluate)
    s = sub.add_parser("study", parents=[common], help="run a study and emit its reports")
    s.add_argument("tag", choices=EXPERIMENTS)
    s.add_argument("--workers", type=int, help="parallel training processes (default: $GRIDNAV_WORKERS or 1)")
    s.set_defaults(fn=cmd_study)
    r = sub.add_parser("report", parents=[common], help="recompute verdicts from a report JSON or metrics CSV")
    r.add_argument("path")
    r.add_argument("--experiment", choices=EXPERIMENTS, help="study tag, required for CSV input")
    r.set_defaults(fn=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "experiment", None) is None and args.command == "report" and args.path.endswith(".csv"):
        print("error: --experiment is required for CSV input", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.fn(args)
    except (ConfigError, InsufficientPairsError, SplitError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingAborted as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
