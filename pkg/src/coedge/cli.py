"""Command-line entry point.

Subcommands: ``simulate``, ``train``, ``evaluate``, ``oracle``, ``sweep``,
``latency``. Every run-style subcommand accepts ``--config`` (JSON file),
``--seed`` (repeatable), ``--policy``, ``--out``, ``--provider``,
``--endpoint`` and ``--timeout-ms``; flags override the file, which in turn
is overridden by ``COEDGE_*`` environment variables (flags win overall).
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .harness import (
    ExperimentConfig,
    format_summary,
    load_config,
    run_evaluate,
    run_latency,
    run_simulate,
    run_sweep,
    run_train,
    summarize,
    write_rows,
)
from .oracle import (
    BinPackingInstance,
    random_instance,
    reduce_binpacking,
    solve_exact,
)

RUN_COMMANDS = ("simulate", "train", "evaluate", "sweep", "latency")

LATENCY_COLUMNS = ["policy", "seed", "n", "mean_s", "p50_s", "p95_s",
                   "p99_s", "max_s", "guidance_s_mean", "network_s_mean"]


def _add_common(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--config", help="JSON experiment config file")
    sp.add_argument("--seed", type=int, action="append",
                    help="run seed; repeat the flag for several seeds")
    sp.add_argument("--policy", help="policy name")
    sp.add_argument("--out", help="output directory for CSV/checkpoints")
    sp.add_argument("--provider", choices=["scripted", "http", "off"],
                    help="guidance provider kind")
    sp.add_argument("--endpoint", help="HTTP provider URL")
    sp.add_argument("--timeout-ms", type=float, dest="timeout_ms",
                    help="guidance timeout in milliseconds")
    sp.add_argument("--episodes", type=int, help="episodes per seed")
    sp.add_argument("--iterations", type=int,
                    help="training iterations per seed")
    sp.add_argument("--workers", type=int, help="parallel sweep processes")
    sp.add_argument("--params", dest="params_path",
                    help="checkpoint .npz to load before evaluating")


def _axis_values(text: str, cast):
    return [cast(tok) for tok in text.split(",") if tok.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="coedge",
        description="Collaborative edge offloading experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, text in (
            ("simulate", "roll out a policy and write per-episode metrics"),
            ("train", "train mappo/fused (or 'compare' for both, paired)"),
            ("evaluate", "greedy rollouts on the dedicated eval seeds"),
            ("sweep", "cross-product robustness sweep over config axes"),
            ("latency", "per-decision wall-clock statistics")):
        sp = sub.add_parser(name, help=text)
        _add_common(sp)
        if name == "sweep":
            sp.add_argument("--sizes-kb", help="comma list of task sizes")
            sp.add_argument("--intensities",
                            help="comma list of cycles/bit values")
            sp.add_argument("--exec-fails",
                            help="comma list of execution failure rates")
            sp.add_argument("--trans-fails",
                            help="comma list of transmission failure rates")
            sp.add_argument("--topologies",
                            help="comma list from {random,ring}")
            sp.add_argument("--node-counts", help="comma list of node counts")
        if name == "latency":
            sp.add_argument("--steps", type=int, default=200,
                            help="measured environment steps")

    orc = sub.add_parser("oracle", help="exact small-instance solver")
    orc.add_argument("--items", help="comma list of bin-packing item sizes")
    orc.add_argument("--bins", type=int, default=2)
    orc.add_argument("--capacity", type=float, default=1.0)
    orc.add_argument("--nodes", type=int, default=3,
                     help="random-instance node count")
    orc.add_argument("--tasks", type=int, default=4,
                     help="random-instance task count")
    orc.add_argument("--seed", type=int, default=0)
    return parser


def _config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    overrides: dict = {}
    for key, target in (("policy", "policy"), ("out", "out_dir"),
                        ("provider", "provider"), ("endpoint", "endpoint"),
                        ("timeout_ms", "timeout_ms"),
                        ("episodes", "episodes"),
                        ("iterations", "iterations"),
                        ("workers", "workers"),
                        ("params_path", "params_path")):
        value = getattr(args, key, None)
        if value is not None:
            overrides[target] = value
    if getattr(args, "seed", None):
        overrides["seeds"] = list(args.seed)
    sweep = {}
    for flag, axis, cast in (("sizes_kb", "size_kb", float),
                             ("intensities", "intensity", float),
                             ("exec_fails", "exec_fail", float),
                             ("trans_fails", "trans_fail", float),
                             ("topologies", "topology", str),
                             ("node_counts", "node_count", int)):
        text = getattr(args, flag, None)
        if text:
            sweep[axis] = _axis_values(text, cast)
    if sweep:
        overrides["sweep"] = sweep
    return load_config(args.config, overrides=overrides)


def _cmd_simulate(cfg: ExperimentConfig) -> int:
    rows = run_simulate(cfg)
    path = write_rows(os.path.join(cfg.out_dir, "simulate.csv"), rows)
    print(format_summary(summarize(rows), ("policy",)))
    print(f"wrote {path}")
    return 0


def _cmd_train(cfg: ExperimentConfig) -> int:
    rows, notes = run_train(cfg)
    path = write_rows(os.path.join(cfg.out_dir, "train.csv"), rows)
    for note in notes:
        print(note)
    print(f"wrote {path}")
    return 0


def _cmd_evaluate(cfg: ExperimentConfig) -> int:
    rows = run_evaluate(cfg)
    path = write_rows(os.path.join(cfg.out_dir, "evaluate.csv"), rows)
    print(format_summary(summarize(rows), ("policy",)))
    print(f"wrote {path}")
    return 0


def _cmd_sweep(cfg: ExperimentConfig) -> int:
    rows, summaries, flags = run_sweep(cfg)
    path = write_rows(os.path.join(cfg.out_dir, "sweep.csv"), rows)
    for axis in cfg.sweep:
        block = [s for s in summaries if s["axis"] == axis]
        print(f"axis {axis}:")
        print(format_summary(block, ("axis_value", "policy")))
    if flags:
        print("monotonicity flags:")
        for flag in flags:
            print(f"  {flag}")
    else:
        print("monotonicity flags: none")
    print(f"wrote {path}")
    return 0


def _cmd_latency(cfg: ExperimentConfig, steps: int) -> int:
    stats = run_latency(cfg, n_steps=steps)
    for item in stats:
        print(f"policy={item['policy']} seed={item['seed']} "
              f"mean={item['mean_s'] * 1e3:.3f}ms "
              f"p95={item['p95_s'] * 1e3:.3f}ms "
              f"p99={item['p99_s'] * 1e3:.3f}ms "
              f"guidance={item['guidance_s_mean'] * 1e3:.3f}ms")
    if cfg.out_dir:
        import csv

        os.makedirs(cfg.out_dir, exist_ok=True)
        path = os.path.join(cfg.out_dir, "latency.csv")
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=LATENCY_COLUMNS)
            writer.writeheader()
            writer.writerows({k: item[k] for k in LATENCY_COLUMNS}
                             for item in stats)
        print(f"wrote {path}")
    return 0


def _cmd_oracle(args: argparse.Namespace) -> int:
    if args.items:
        sizes = tuple(_axis_values(args.items, float))
        bp = BinPackingInstance(sizes=sizes, bins=args.bins,
                                capacity=args.capacity)
        result = solve_exact(reduce_binpacking(bp))
        print("feasible" if result.feasible else "infeasible")
        return 0
    rng = np.random.default_rng(args.seed)
    inst = random_instance(rng, n_nodes=args.nodes, n_tasks=args.tasks)
    result = solve_exact(inst)
    if not result.feasible:
        print("infeasible")
        return 0
    print(f"optimum {result.success_count}/{len(inst.tasks)} "
          f"(rate {result.rate:.4f}) assignment {result.assignment} "
          f"over {result.n_evaluated} assignments")
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "oracle":
            return _cmd_oracle(args)
        cfg = _config_from_args(args)
        if args.command == "simulate":
            return _cmd_simulate(cfg)
        if args.command == "train":
            return _cmd_train(cfg)
        if args.command == "evaluate":
            return _cmd_evaluate(cfg)
        if args.command == "sweep":
            return _cmd_sweep(cfg)
        if args.command == "latency":
            return _cmd_latency(cfg, args.steps)
        raise ValueError(f"unknown command {args.command!r}")
    except Exception as exc:  # contract: nonzero exit, failure identified
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main(argv=sys.argv[1:]))
