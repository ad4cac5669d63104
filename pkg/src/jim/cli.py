"""Single command-line entry point.

Subcommands: train, evaluate, adhoc, ablate, analyze, gradcheck,
partition-bench, report. Configuration comes from a preset name or a config
file (plus a few overriding flags); every run echoes its canonical config
and stamps outputs with the seed and config hash. Failures print one
machine-readable JSON object to stderr; config errors exit 2, runtime
errors exit 1.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .config import (
    ExperimentConfig,
    config_hash,
    experiment_preset,
    load_config,
)
from .diagnostics import battery_lines, battery_passed, run_gradcheck_battery
from .env import ConfigError
from .evaluation import (
    adhoc_evaluate,
    evaluate,
    intention_stats,
    write_intention_csvs,
)
from .io_utils import write_json, write_jsonl
from .partition import partition_benchmark
from .policy import build_networks
from .trainer import run_seeds, run_training


def _load_experiment(args) -> ExperimentConfig:
    if getattr(args, "config", None):
        cfg = load_config(args.config)
    elif getattr(args, "preset", None):
        cfg = experiment_preset(args.preset)
    else:
        raise ConfigError("run: provide --config FILE or --preset NAME")
    updates = {}
    if getattr(args, "mode", None):
        updates["mode"] = args.mode
    if getattr(args, "steps", None):
        updates["total_env_steps"] = args.steps
    if getattr(args, "seeds", None):
        updates["seeds"] = tuple(int(s) for s in args.seeds.split(","))
    elif getattr(args, "seed", None) is not None:
        updates["seeds"] = (args.seed,)
    out = getattr(args, "out", None) or os.environ.get("JIM_OUTPUT_DIR")
    if out:
        updates["output_dir"] = out
    if updates:
        from dataclasses import replace

        cfg = replace(cfg, **updates)
    return cfg.resolved()


def _restore_bundle(cfg: ExperimentConfig, checkpoint: str):
    nets = build_networks(cfg, rng=None)
    meta = nets.load(checkpoint)
    if meta.get("config") and meta["config"] != config_hash(cfg):
        print(f"note: checkpoint config hash {meta['config']} differs from "
              f"the supplied config {config_hash(cfg)}", file=sys.stderr)
    return nets


def cmd_train(args) -> int:
    cfg = _load_experiment(args)
    aggregate = run_seeds(cfg, cfg.output_dir, jobs=args.jobs)
    print(json.dumps(aggregate, indent=2, sort_keys=True))
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_experiment(args)
    nets = _restore_bundle(cfg, args.checkpoint)
    dump = [] if args.dump else None
    metrics = evaluate(nets, cfg, args.episodes, seed=args.seed or 0, dump=dump)
    payload = {"episodes": metrics.episodes,
               "mean_return_per_agent": metrics.mean_return_per_agent,
               "success_rate": metrics.success_rate}
    out = args.out or os.environ.get("JIM_OUTPUT_DIR")
    if out:
        write_json(os.path.join(out, "evaluation.json"), payload)
        if dump is not None:
            write_jsonl(os.path.join(out, "eval_dump.jsonl"), dump,
                        header={"seed": args.seed or 0,
                                "config": config_hash(cfg),
                                "n_intentions": cfg.n_intentions,
                                "n_agents": cfg.env.n_agents})
    print(json.dumps(payload, indent=2, sort_keys=True))
    return 0


def cmd_adhoc(args) -> int:
    cfg = _load_experiment(args)
    nets = _restore_bundle(cfg, args.checkpoint)
    fixed = evaluate(nets, cfg, args.episodes, seed=args.seed or 0)
    varied = adhoc_evaluate(nets, cfg, args.delta,
                            np.random.default_rng(args.seed or 0), args.episodes)
    payload = {
        "delta": args.delta,
        "fixed_return": fixed.mean_return_per_agent,
        "adhoc_return": varied.mean_return_per_agent,
        "retention": (varied.mean_return_per_agent
                      / max(fixed.mean_return_per_agent, 0.1)),
        "drawn_counts": varied.per_seed["drawn_counts"],
    }
    out = args.out or os.environ.get("JIM_OUTPUT_DIR")
    if out:
        write_json(os.path.join(out, "adhoc.json"), payload)
    print(json.dumps(payload, indent=2, sort_keys=True))
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_experiment(args)
    if args.ablation == "zero_intention":
        if not args.checkpoint:
            raise ConfigError("ablate.checkpoint: zero_intention needs a "
                              "trained checkpoint")
        nets = _restore_bundle(cfg, args.checkpoint)
        full = evaluate(nets, cfg, args.episodes, seed=args.seed or 0)
        pinned = evaluate(nets, cfg, args.episodes, seed=args.seed or 0,
                          forced_z=0)
        payload = {
            "ablation": "zero_intention",
            "episodes": args.episodes,
            "full_return": full.mean_return_per_agent,
            "zero_intention_return": pinned.mean_return_per_agent,
            "retained_fraction": (pinned.mean_return_per_agent
                                  / max(full.mean_return_per_agent, 0.1)),
        }
        out = args.out or os.environ.get("JIM_OUTPUT_DIR")
        if out:
            write_json(os.path.join(out, "ablation_zero_intention.json"), payload)
        print(json.dumps(payload, indent=2, sort_keys=True))
        return 0
    # no_weighting: full training run with unit alphas
    from dataclasses import replace

    cfg = replace(cfg, mode="no_weighting").resolved()
    aggregate = run_seeds(cfg, args.out or cfg.output_dir, jobs=args.jobs)
    print(json.dumps(aggregate, indent=2, sort_keys=True))
    return 0


def cmd_analyze(args) -> int:
    report = intention_stats(args.dumps)
    out = args.out or os.environ.get("JIM_OUTPUT_DIR") or os.path.join(
        str(args.dumps).rstrip("/"), "analysis")
    paths = write_intention_csvs(report, out, seed=args.seed, cfg_hash=args.tag)
    summary = {
        "files": paths,
        "mean_run_length": report.mean_run_length,
        "agreement": report.agreement,
        "tv_selection_observer": report.tv_distance(),
    }
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def cmd_gradcheck(args) -> int:
    sections = run_gradcheck_battery(seed=args.seed or 0, tol=args.tol,
                                     perturb=args.perturb)
    for line in battery_lines(sections):
        print(line)
    return 0 if battery_passed(sections) else 1


def cmd_partition_bench(args) -> int:
    report = partition_benchmark(n_graphs=args.graphs, n_oracle=args.oracle,
                                 eps_gap=args.eps, seed=args.seed or 0)
    for line in report.lines():
        print(line)
    return 0 if report.passed else 1


def cmd_report(args) -> int:
    from .report import render_run_report

    written = render_run_report(args.run, args.out)
    print(json.dumps({"figures": written}, indent=2, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="jim",
        description="Joint-intention multi-agent reinforcement learning")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_cfg_args(p, with_mode=True):
        p.add_argument("--config", help="experiment config file")
        p.add_argument("--preset", help="named experiment preset")
        if with_mode:
            p.add_argument("--mode",
                           choices=("full_method", "flat_qmix", "no_weighting"))
        p.add_argument("--out", help="output directory "
                                     "(JIM_OUTPUT_DIR overrides the config)")
        p.add_argument("--seed", type=int)

    p = sub.add_parser("train", help="train one or more seeds")
    add_cfg_args(p)
    p.add_argument("--seeds", help="comma-separated seed list")
    p.add_argument("--steps", type=int, help="override total environment steps")
    p.add_argument("--jobs", type=int, default=1,
                   help="parallel seed runs (processes)")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("evaluate", help="greedy evaluation of a checkpoint")
    add_cfg_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--dump", action="store_true",
                   help="write trajectory dump next to the metrics")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("adhoc", help="evaluation under perturbed agent counts")
    add_cfg_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--delta", type=int, default=2)
    p.add_argument("--episodes", type=int, default=100)
    p.set_defaults(fn=cmd_adhoc)

    p = sub.add_parser("ablate", help="zero-intention or no-weighting ablation")
    add_cfg_args(p, with_mode=False)
    p.add_argument("--ablation", required=True,
                   choices=("zero_intention", "no_weighting"))
    p.add_argument("--checkpoint")
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("analyze", help="intention analytics from dumps")
    p.add_argument("--dumps", required=True,
                   help="dump directory, glob or file")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--tag", help="config hash to stamp into the CSVs")
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("gradcheck", help="finite-difference gradient battery")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--perturb", type=float, default=1e-5)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("partition-bench",
                       help="randomized partition correctness benchmark")
    p.add_argument("--graphs", type=int, default=1000)
    p.add_argument("--oracle", type=int, default=200)
    p.add_argument("--eps", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_partition_bench)

    p = sub.add_parser("report", help="render figures from a run directory")
    p.add_argument("--run", required=True)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(json.dumps({"error": {"type": "config", "message": str(exc)}}),
              file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - single reporting point
        print(json.dumps({"error": {"type": type(exc).__name__,
                                    "message": str(exc)}}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
