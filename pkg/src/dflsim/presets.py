"""Experiment presets: DP sweep, scaling sweeps, phase breakdown, consensus latency.

Each preset is a pure function of its configuration and seed. Runs inside a
sweep are independent, so they may be spread over worker processes.
"""

from __future__ import annotations

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .fl import DpConfig
from .messages import NewView, PbftMessage, Phase, ViewChange
from .scenario import METRICS_SCHEMA_VERSION, RunResult, ScenarioConfig, run_scenario

DEFAULT_EPS = (0.5, 1.0, 2.0, 4.0, 8.0)
DEFAULT_COUNTS = tuple(range(5, 51, 5))
DEFAULT_COMMITTEES = (4, 7, 10, 13)
PBFT_NAMES = frozenset(t.__name__ for t in (PbftMessage, ViewChange, NewView))


def _map(fn: Callable, items: Sequence, jobs: int) -> list:
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"# schema v{METRICS_SCHEMA_VERSION}"])
        w.writerow(header)
        w.writerows(rows)


def largest_committee(nodes: int) -> int:
    """Largest 3F+1 that fits in ``nodes``."""
    if nodes < 4:
        raise ValueError("a committee needs at least 4 nodes")
    return 3 * ((nodes - 1) // 3) + 1


# -- differential privacy ------------------------------------------------------------


def dp_sweep_config(seed: int = 1, rounds: int = 30) -> ScenarioConfig:
    """Ten nodes, logistic model, 3-class blobs; timing kept short since only accuracy matters."""
    return ScenarioConfig(nodes=10, rounds=rounds, seed=seed, block_mode="immediate", think_ms=500,
                          train_ms_per_sample_epoch=1.0, eval_ms_per_sample=0.1)


@dataclass(frozen=True)
class DpCurve:
    label: str
    eps: Optional[float]
    seed: int
    scores: tuple[int, ...]  # global score after each round

    @property
    def final(self) -> int:
        return self.scores[-1] if self.scores else 0


def _dp_run(args: tuple[ScenarioConfig, Optional[float], float, float]) -> DpCurve:
    cfg, eps, delta, clip = args
    dp = None if eps is None else DpConfig(eps, delta, clip)
    res = run_scenario(replace(cfg, dp=dp))
    by_round: dict[int, int] = {}
    for rnd, _node, _local, glob in res.metrics.accuracy:
        by_round[rnd] = glob
    return DpCurve("no-dp" if eps is None else f"eps={eps:g}", eps, cfg.seed,
                   tuple(by_round[r] for r in sorted(by_round)))


def preset_dp_sweep(eps: Sequence[float] = DEFAULT_EPS, rounds: int = 30, seeds: Sequence[int] = (1,),
                    base: Optional[ScenarioConfig] = None, delta: float = 1e-5, clip_norm: float = 0.1,
                    out: Optional[Path] = None, jobs: int = 1) -> list[DpCurve]:
    """One no-DP baseline plus one run per epsilon, for every seed.

    All runs of a seed share data, identities and training seeds, so the
    curves differ only through the privacy noise.
    """
    if not eps:
        raise ValueError("eps list must be non-empty")
    tasks = []
    for seed in seeds:
        cfg = replace(base or dp_sweep_config(), seed=seed, rounds=rounds, dp=None)
        tasks.extend((cfg, e, delta, clip_norm) for e in (None, *eps))
    curves = _map(_dp_run, tasks, jobs)
    if out is not None:
        rows = [(c.label, c.seed, r, s) for c in curves for r, s in enumerate(c.scores, start=1)]
        _write_csv(Path(out) / "dp_accuracy.csv", ["curve", "seed", "round", "global_score"], rows)
        finals = [(c.label, c.seed, c.final) for c in curves]
        _write_csv(Path(out) / "dp_final.csv", ["curve", "seed", "final_score"], finals)
    return curves


# -- scaling ------------------------------------------------------------------------------


def scaling_config(nodes: int, seed: int = 1, rounds: int = 1) -> ScenarioConfig:
    """No learning load and no think delay; every node sits on the largest committee that fits.

    Without the think delay the iteration time is set by message handling, so
    the per-message cost is raised to keep that signal above detector jitter.
    """
    return ScenarioConfig(nodes=nodes, need=largest_committee(nodes), rounds=rounds, seed=seed, train=False,
                          block_mode="immediate", bootstrap_elect=False, elect_times=rounds + 1,
                          think_ms=0, per_message_ms=2)


@dataclass(frozen=True)
class ScalingRow:
    nodes: int
    committee: int
    iteration_ms: float
    messages: float
    pbft_messages: float


def _scaling_run(cfg: ScenarioConfig) -> ScalingRow:
    res = run_scenario(cfg)
    if not res.ok:
        raise RuntimeError(f"scaling run with {cfg.nodes} nodes did not finish")
    times = res.metrics.iteration_times()
    msgs = res.metrics.messages
    by_type = res.runner.sim.by_type
    pbft = sum(v for k, v in by_type.items() if k in PBFT_NAMES)
    rounds = len(times)
    return ScalingRow(cfg.nodes, cfg.need, sum(times.values()) / rounds, msgs[-1][2] / rounds, pbft / rounds)


def preset_scaling_sweep(counts: Sequence[int] = DEFAULT_COUNTS, seed: int = 1, rounds: int = 1,
                         out: Optional[Path] = None, jobs: int = 1,
                         base: Optional[Callable[[int, int, int], ScenarioConfig]] = None) -> list[ScalingRow]:
    counts = list(counts)
    if counts != sorted(counts):
        raise ValueError("node counts must be ascending")
    make = base or scaling_config
    rows = _map(_scaling_run, [make(n, seed, rounds) for n in counts], jobs)
    if out is not None:
        _write_csv(Path(out) / "scaling.csv", ["nodes", "committee", "iteration_ms", "messages", "pbft_messages"],
                   [(r.nodes, r.committee, f"{r.iteration_ms:.1f}", f"{r.messages:.1f}", f"{r.pbft_messages:.1f}")
                    for r in rows])
    return rows


def committee_scaling_config(need: int, seed: int = 1, rounds: int = 2, nodes: int = 13) -> ScenarioConfig:
    """Fixed population, varying committee size, so request load is constant."""
    return ScenarioConfig(nodes=nodes, need=need, rounds=rounds, seed=seed, train=False, block_mode="immediate",
                          bootstrap_elect=False, elect_times=rounds + 1)


def preset_message_scaling(committees: Sequence[int] = DEFAULT_COMMITTEES, seed: int = 1, rounds: int = 2,
                           out: Optional[Path] = None, jobs: int = 1) -> list[ScalingRow]:
    rows = _map(_scaling_run, [committee_scaling_config(n, seed, rounds) for n in committees], jobs)
    if out is not None:
        _write_csv(Path(out) / "message_scaling.csv", ["committee", "messages", "pbft_messages"],
                   [(r.committee, f"{r.messages:.1f}", f"{r.pbft_messages:.1f}") for r in rows])
    return rows


def quadratic_r2(x: Sequence[float], y: Sequence[float]) -> float:
    """Coefficient of determination of a least-squares degree-2 polynomial fit."""
    xs = np.asarray(x, dtype=float)
    ys = np.asarray(y, dtype=float)
    coef = np.polyfit(xs, ys, 2)
    fit = np.polyval(coef, xs)
    ss_res = float(np.sum((ys - fit) ** 2))
    ss_tot = float(np.sum((ys - ys.mean()) ** 2))
    return 1.0 - ss_res / ss_tot if ss_tot else 1.0


# -- phase breakdown and latency ---------------------------------------------------------


def preset_phase_breakdown(cfg: Optional[ScenarioConfig] = None, rounds: int = 10,
                           out: Optional[Path] = None) -> dict[Phase, float]:
    cfg = replace(cfg or ScenarioConfig(), rounds=max(rounds, 10))
    if not cfg.train:
        raise ValueError("the phase breakdown needs the learning load")
    res = run_scenario(cfg)
    if not res.ok:
        raise RuntimeError("phase-breakdown scenario did not finish")
    shares = res.metrics.phase_shares()
    if out is not None:
        _write_csv(Path(out) / "phase_breakdown.csv", ["phase", "share"],
                   [(str(p), f"{shares[p]:.6f}") for p in Phase])
    return shares


@dataclass(frozen=True)
class LatencySummary:
    samples: int
    unconfirmed: int
    within_one_window: float
    within_three_windows: float
    p50: float
    p90: float
    p99: float
    max: float


def summarize_latency(values: Sequence[Optional[int]], window_ms: int) -> LatencySummary:
    done = np.asarray([v for v in values if v is not None], dtype=float)
    n = len(values)
    if n == 0:
        return LatencySummary(0, 0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    q = np.quantile(done, [0.5, 0.9, 0.99]) if done.size else np.zeros(3)
    return LatencySummary(
        n, n - done.size,
        float(np.sum(done <= window_ms)) / n,
        float(np.sum(done <= 3 * window_ms)) / n,
        float(q[0]), float(q[1]), float(q[2]), float(done.max()) if done.size else 0.0,
    )


def preset_consensus_latency(cfg: Optional[ScenarioConfig] = None, out: Optional[Path] = None,
                             bin_ms: int = 500) -> tuple[LatencySummary, RunResult]:
    cfg = cfg or ScenarioConfig(rounds=5)
    if cfg.aggregation_window_ms <= 0:
        raise ValueError("the latency preset needs a positive aggregation window")
    res = run_scenario(cfg)
    values = res.metrics.latency_values()
    summary = summarize_latency(values, cfg.aggregation_window_ms)
    if out is not None:
        done = [v for v in values if v is not None]
        top = max(done, default=0)
        edges = list(range(0, top + bin_ms, bin_ms)) or [0]
        counts = np.histogram(done, bins=edges + [edges[-1] + bin_ms])[0] if done else []
        _write_csv(Path(out) / "latency_histogram.csv", ["bin_start_ms", "bin_end_ms", "count"],
                   [(lo, lo + bin_ms, int(c)) for lo, c in zip(edges, counts)])
        _write_csv(Path(out) / "latency_summary.csv", list(LatencySummary.__dataclass_fields__),
                   [[getattr(summary, k) for k in LatencySummary.__dataclass_fields__]])
    return summary, res
