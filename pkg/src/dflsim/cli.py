"""Command-line entry point.

Exit codes: 0 on completion, 1 on a configuration error (or a failed schema
self-check), 2 when a scenario deadlocks before finishing its rounds.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from . import presets
from .scenario import ConfigError, ScenarioConfig, check_outputs, load_config, run_scenario, write_outputs

OUT_ENV = "DFLSIM_OUT"
EXIT_OK, EXIT_CONFIG, EXIT_DEADLOCK = 0, 1, 2


def _csv_list(kind):
    def parse(text: str):
        try:
            return [kind(x) for x in text.split(",") if x.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad list: {text!r}") from None
    return parse


def _base_config(args, **extra) -> ScenarioConfig:
    overrides = {"seed": args.seed, "rounds": args.rounds, **extra}
    if args.config:
        return load_config(args.config, **overrides)
    return replace(ScenarioConfig(), **{k: v for k, v in overrides.items() if v is not None})


def _out(args) -> Path:
    return Path(args.out or os.environ.get(OUT_ENV) or "out")


def _check(out: Path) -> int:
    problems = check_outputs(out)
    for p in problems:
        print(f"schema: {p}", file=sys.stderr)
    return EXIT_CONFIG if problems else EXIT_OK


def cmd_run(args) -> int:
    cfg = _base_config(args, trace=args.trace or None)
    res = run_scenario(cfg)
    out = _out(args)
    write_outputs(res, out)
    print(f"status={res.status} rounds={res.rounds_completed} virtual_ms={res.now} out={out}")
    if args.check and _check(out):
        return EXIT_CONFIG
    return EXIT_OK if res.ok else EXIT_DEADLOCK


def cmd_dp_sweep(args) -> int:
    base = _base_config(args) if args.config else None
    seeds = args.seeds or [args.seed if args.seed is not None else 1]
    curves = presets.preset_dp_sweep(args.eps, rounds=args.rounds or 30, seeds=seeds, base=base,
                                     delta=args.delta, clip_norm=args.clip_norm, out=_out(args), jobs=args.jobs)
    for c in curves:
        print(f"{c.label:>8} seed={c.seed} final={c.final}")
    return EXIT_OK


def cmd_scaling_sweep(args) -> int:
    seed = args.seed if args.seed is not None else 1
    out = _out(args)
    rows = presets.preset_scaling_sweep(args.counts, seed=seed, rounds=args.rounds or 1, out=out, jobs=args.jobs)
    for r in rows:
        print(f"nodes={r.nodes} committee={r.committee} iteration_ms={r.iteration_ms:.0f} messages={r.messages:.0f}")
    msg = presets.preset_message_scaling(args.committees, seed=seed, rounds=args.rounds or 1, out=out,
                                         jobs=args.jobs)
    r2 = presets.quadratic_r2([r.committee for r in msg], [r.pbft_messages for r in msg])
    print(f"committee message fit: R^2={r2:.5f}")
    return EXIT_OK


def cmd_phase_breakdown(args) -> int:
    cfg = _base_config(args)
    shares = presets.preset_phase_breakdown(cfg, rounds=args.rounds or 10, out=_out(args))
    for phase, share in shares.items():
        print(f"{phase}: {share:.3f}")
    return EXIT_OK


def cmd_latency(args) -> int:
    cfg = _base_config(args)
    if args.rounds is None and not args.config:
        cfg = replace(cfg, rounds=5)
    summary, res = presets.preset_consensus_latency(cfg, out=_out(args), bin_ms=args.bin_ms)
    print(f"samples={summary.samples} unconfirmed={summary.unconfirmed} "
          f"within_1w={summary.within_one_window:.3f} within_3w={summary.within_three_windows:.3f} "
          f"p50={summary.p50:.0f} p99={summary.p99:.0f} max={summary.max:.0f}")
    return EXIT_OK if res.ok else EXIT_DEADLOCK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dflsim", description="Committee-consensus federated learning simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="scenario INI file")
        p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./out)")
        p.add_argument("--seed", type=int)
        p.add_argument("--rounds", type=int)
        return p

    p = common(sub.add_parser("run", help="run one scenario and write metrics"))
    p.add_argument("--trace", action="store_true", help="also write the message trace")
    p.add_argument("--check", action="store_true", help="validate the written CSV schemas")
    p.set_defaults(fn=cmd_run)

    p = common(sub.add_parser("dp-sweep", help="accuracy under differential privacy"))
    p.add_argument("--eps", type=_csv_list(float), default=list(presets.DEFAULT_EPS))
    p.add_argument("--seeds", type=_csv_list(int))
    p.add_argument("--delta", type=float, default=1e-5)
    p.add_argument("--clip-norm", type=float, default=0.1)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(fn=cmd_dp_sweep)

    p = common(sub.add_parser("scaling-sweep", help="iteration time and messages versus node count"))
    p.add_argument("--counts", type=_csv_list(int), default=list(presets.DEFAULT_COUNTS))
    p.add_argument("--committees", type=_csv_list(int), default=list(presets.DEFAULT_COMMITTEES))
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(fn=cmd_scaling_sweep)

    p = common(sub.add_parser("phase-breakdown", help="virtual-time share of each phase"))
    p.set_defaults(fn=cmd_phase_breakdown)

    p = common(sub.add_parser("latency", help="consensus latency histogram"))
    p.add_argument("--bin-ms", type=int, default=500)
    p.set_defaults(fn=cmd_latency)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"invalid arguments: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RuntimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DEADLOCK


if __name__ == "__main__":
    sys.exit(main())
