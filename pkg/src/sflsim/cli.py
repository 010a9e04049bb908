"""Command-line front end.

Four subcommands:

* ``run``      train one (scheme, scheduler) cell and write its report
* ``grid``     train the five-cell scheme/scheduler sweep
* ``schedule`` print each policy's server order and round makespan, no training
* ``oracle``   brute-force the optimal order and show each policy's gap

``--config`` (or the ``SFLSIM_CONFIG`` environment variable) points at a
JSON experiment config; without one the built-in desk-scale default is
used. ``--seed/--scheme/--scheduler/--rounds`` override single fields.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from typing import Sequence

from sflsim.costmodel import arrival_times, time_components
from sflsim.experiment import (
    ExperimentConfig,
    default_config,
    load_config,
    run_experiment,
    run_grid,
)
from sflsim.scheduler import (
    BRUTE_FORCE_MAX_CLIENTS,
    brute_force_order,
    make_order,
)
from sflsim.sim_engine import simulate_timeline

__all__ = ["main"]

_ENV_CONFIG = "SFLSIM_CONFIG"
_POLICIES = ("greedy", "fifo", "wf")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sflsim",
        description="Split federated LoRA fine-tuning simulator.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, out: bool) -> None:
        p.add_argument("--config", metavar="PATH", help="JSON experiment config")
        p.add_argument("--seed", type=int, metavar="N", help="override config seed")
        p.add_argument("--rounds", type=int, metavar="T", help="override round count")
        if out:
            p.add_argument(
                "--out", metavar="DIR", default="sflsim-out", help="report directory"
            )

    p_run = sub.add_parser("run", help="train one cell and write its report")
    common(p_run, out=True)
    p_run.add_argument("--scheme", choices=("OURS", "SFL", "SL"), help="override scheme")
    p_run.add_argument(
        "--scheduler",
        choices=("greedy", "fifo", "wf", "optimal"),
        help="override server order policy (OURS only)",
    )

    p_grid = sub.add_parser("grid", help="train the five-cell sweep")
    common(p_grid, out=True)

    p_sched = sub.add_parser("schedule", help="print orders and makespans, no training")
    common(p_sched, out=False)

    p_oracle = sub.add_parser("oracle", help="brute-force the optimal server order")
    common(p_oracle, out=False)

    return parser


def _load(args: argparse.Namespace, parser: argparse.ArgumentParser) -> ExperimentConfig:
    path = args.config or os.environ.get(_ENV_CONFIG)
    try:
        cfg = load_config(path) if path else default_config()
        overrides = {}
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.rounds is not None:
            overrides["rounds"] = args.rounds
        scheme = getattr(args, "scheme", None)
        scheduler = getattr(args, "scheduler", None)
        if scheme is not None:
            overrides["scheme"] = scheme
            if scheduler is None:  # non-OURS schemes take no scheduler
                scheduler = "greedy" if scheme == "OURS" else None
                overrides["scheduler"] = scheduler
        if scheduler is not None:
            overrides["scheduler"] = scheduler
        return replace(cfg, **overrides) if overrides else cfg
    except (OSError, ValueError, KeyError) as err:
        parser.error(str(err))
        raise AssertionError  # parser.error never returns


def _timing_table(cfg: ExperimentConfig):
    timings = [
        time_components(
            d, cfg.link, cfg.server_capacity_flops, cfg.model, cfg.batch_size
        )
        for d in cfg.devices
    ]
    lags = {d.client_id: d.arrival_lag_s for d in cfg.devices}
    return timings, arrival_times(timings, lags)


def _cmd_run(args, parser) -> int:
    cfg = _load(args, parser)
    cell = run_experiment(cfg, args.out)
    s = cell.summary()
    print(
        f"{cell.name}: final_accuracy={s['final_accuracy']:.4f} "
        f"macro_f1={s['final_macro_f1']:.4f} "
        f"convergence_time_s={s['convergence_time_s']:.3f} "
        f"total_time_s={s['total_time_s']:.3f}"
    )
    print(f"report written to {os.path.abspath(args.out)}")
    return 0


def _cmd_grid(args, parser) -> int:
    cfg = _load(args, parser)
    cells = run_grid(cfg, args.out)
    for cell in cells:
        s = cell.summary()
        print(
            f"{cell.name}: final_accuracy={s['final_accuracy']:.4f} "
            f"macro_f1={s['final_macro_f1']:.4f} "
            f"convergence_time_s={s['convergence_time_s']:.3f} "
            f"total_time_s={s['total_time_s']:.3f}"
        )
    print(f"report written to {os.path.abspath(args.out)}")
    return 0


def _cmd_schedule(args, parser) -> int:
    cfg = _load(args, parser)
    timings, arrivals = _timing_table(cfg)
    print(f"{'policy':<8} {'order':<24} makespan_s")
    for policy in _POLICIES:
        order = make_order(policy, cfg.devices, timings, arrivals)
        makespan, _ = simulate_timeline(order, timings, arrivals, cfg.timeline_mode)
        print(f"{policy:<8} {str(order):<24} {makespan:.6f}")
    return 0


def _cmd_oracle(args, parser) -> int:
    cfg = _load(args, parser)
    if len(cfg.devices) > BRUTE_FORCE_MAX_CLIENTS:
        print(
            f"error: brute force handles at most {BRUTE_FORCE_MAX_CLIENTS} clients, "
            f"config has {len(cfg.devices)}",
            file=sys.stderr,
        )
        return 2
    timings, arrivals = _timing_table(cfg)
    best_order, best = brute_force_order(timings, arrivals)
    print(f"{'policy':<8} {'order':<24} {'makespan_s':<12} gap")
    print(f"{'optimal':<8} {str(best_order):<24} {best:<12.6f} -")
    for policy in _POLICIES:
        order = make_order(policy, cfg.devices, timings, arrivals)
        makespan, _ = simulate_timeline(order, timings, arrivals, "event_driven")
        gap = (makespan - best) / best if best > 0 else 0.0
        print(f"{policy:<8} {str(order):<24} {makespan:<12.6f} {gap:+.2%}")
    return 0


_COMMANDS = {
    "run": _cmd_run,
    "grid": _cmd_grid,
    "schedule": _cmd_schedule,
    "oracle": _cmd_oracle,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    return _COMMANDS[args.command](args, parser)


if __name__ == "__main__":
    raise SystemExit(main())
