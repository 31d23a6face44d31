"""Scenario configuration, the simulated mempool/block clock, and metrics output."""

from __future__ import annotations

import configparser
import csv
import heapq
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Optional

import numpy as np

from .codec import decode
from .committee import fault_tolerance
from .contract import AccuracyPriceCurve, ContractConfig, ContractError, GasSchedule, StateChange, StateContract
from .fl import Dataset, DpConfig, init_params, load_delimited, make_blobs, make_moons, partition
from .identity import Identity, KeyDirectory, digest, short
from .incentives import EXPONENTIAL, UNIT, IncentiveKind
from .messages import ClientAck, ConsensusRequest, NewView, PbftMessage, Phase, ReplyMsg, ViewChange, WorkBody
from .netsim import AdversarySpec, Behavior, LatencyModel, Simulator, derive_seed
from .node import CostModel, Node, NodeConfig
from .pbft import PbftConfig
from .store import ContentStore

CONSENSUS_MESSAGES = (ConsensusRequest, PbftMessage, ViewChange, NewView, ReplyMsg, ClientAck)
CONSENSUS_NAMES = frozenset(t.__name__ for t in CONSENSUS_MESSAGES)
BLOCK_MODES = ("fixed", "stochastic", "immediate")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AdversaryRule:
    """``target`` is ``cK`` (K-th genesis committee member) or ``nK`` (K-th node)."""

    target: str
    behavior: Behavior
    first_round: int = 1
    last_round: Optional[int] = None


@dataclass(frozen=True)
class ScenarioConfig:
    nodes: int = 10
    rounds: int = 3
    seed: int = 1
    time_limit_ms: int = 0
    trace: bool = False
    # committee
    need: int = 4
    p: float = 0.3
    elect_times: int = 2
    bootstrap_elect: bool = True
    # timing
    mt: tuple[int, int, int, int] = (30_000, 30_000, 120_000, 120_000)
    aggregation_window_ms: int = 5000
    view_change_timeout_ms: int = 12_000
    max_batch: int = 4
    block_interval_ms: int = 13_000
    block_mode: str = "fixed"
    latency_base_ms: int = 50
    latency_jitter_ms: int = 30
    drop_rate: float = 0.0
    per_message_ms: int = 1
    think_ms: int = 2000
    train_ms_per_sample_epoch: float = 40.0
    eval_ms_per_sample: float = 5.0
    speed_spread: float = 0.2
    retransmit_windows: int = 3
    # economy, integer milli-units
    deposit: int = 1000 * UNIT
    pledge: int = 10 * UNIT
    candidate_pledge: int = 20 * UNIT
    min_deposit: int = UNIT
    min_pledge: int = UNIT
    reward_pool: int = 1000 * UNIT
    payout_rate: Fraction = Fraction(1, 10)
    gas: GasSchedule = GasSchedule()
    curve: tuple[tuple[float, int], ...] = ((0.5, 1000), (0.8, 2000), (0.9, 3000))
    model_reward_budget: int = 10 * UNIT
    malicious_rate: float = 0.5
    # learning
    train: bool = True
    dataset: str = "blobs"
    classes: int = 3
    dim: int = 5
    samples_per_node: int = 200
    test_samples: int = 500
    hidden: tuple[int, ...] = ()
    epochs: int = 2
    lr: float = 0.01
    batch_size: int = 32
    skew: Optional[float] = None
    separation: float = 1.5
    spread: float = 1.0
    weight_by_samples: bool = False
    dp: Optional[DpConfig] = None
    adversaries: tuple[AdversaryRule, ...] = ()

    def __post_init__(self) -> None:
        errors = []
        if self.nodes < self.need:
            errors.append(f"nodes={self.nodes} is smaller than the committee need={self.need}")
        try:
            fault_tolerance(self.need)
        except ValueError as exc:
            errors.append(str(exc))
        if self.rounds < 1:
            errors.append("rounds must be >= 1")
        if self.elect_times < 1:
            errors.append("elect_times must be >= 1")
        if not 0.0 <= self.p <= 1.0:
            errors.append("p must lie in [0, 1]")
        if len(self.mt) != 4 or any(m <= 0 for m in self.mt):
            errors.append("every mt must be positive")
        if self.block_mode not in BLOCK_MODES:
            errors.append(f"block_mode must be one of {', '.join(BLOCK_MODES)}")
        if self.block_mode != "immediate" and self.block_interval_ms <= 0:
            errors.append("block_interval_ms must be positive unless block_mode is immediate")
        if not 0.0 <= self.drop_rate < 1.0:
            errors.append("drop_rate must lie in [0, 1)")
        if min(self.latency_base_ms, self.latency_jitter_ms, self.aggregation_window_ms) < 0:
            errors.append("latencies and windows must be non-negative")
        if self.deposit < self.min_deposit:
            errors.append("deposit is below min_deposit")
        if self.candidate_pledge < self.min_pledge:
            errors.append("candidate_pledge is below min_pledge")
        if self.max_batch < 0:
            errors.append("max_batch must be >= 0")
        if self.pledge <= 0:
            errors.append("pledge must be positive")
        if self.classes < 2 or self.dim < 1 or self.samples_per_node < 1 or self.test_samples < 1:
            errors.append("dataset sizes must be positive and classes >= 2")
        if not 0.0 < self.malicious_rate <= 1.0:
            errors.append("malicious_rate must lie in (0, 1]")
        if errors:
            raise ConfigError("; ".join(errors))

    @property
    def mt_by_phase(self) -> dict[Phase, int]:
        return dict(zip(Phase, self.mt))


# -- INI loading -----------------------------------------------------------------------


def _bool(text: str) -> bool:
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _curve(text: str) -> tuple[tuple[float, int], ...]:
    points = []
    for item in text.split(","):
        if not item.strip():
            continue
        acc, _, price = item.partition(":")
        points.append((float(acc), int(price)))
    return tuple(points)


def _adversary(target: str, text: str) -> list[AdversaryRule]:
    target = target.strip().lower()
    if len(target) < 2 or target[0] not in "cn" or not target[1:].isdigit():
        raise ConfigError(f"adversary target must be cK or nK, got {target!r}")
    parts = text.split()
    if not parts:
        raise ConfigError(f"adversary {target} has no behavior")
    first, last = 1, None
    if len(parts) > 1:
        lo, _, hi = parts[1].partition("-")
        first = int(lo)
        last = int(hi) if hi else (None if "-" in parts[1] else first)
    try:
        return [AdversaryRule(target, Behavior.parse(b), first, last) for b in parts[0].split("+")]
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


_INT_KEYS = {
    "scenario": ("nodes", "rounds", "seed", "time_limit_ms"),
    "committee": ("need", "elect_times"),
    "timing": ("aggregation_window_ms", "view_change_timeout_ms", "max_batch", "block_interval_ms",
               "latency_base_ms", "latency_jitter_ms", "per_message_ms", "think_ms", "retransmit_windows"),
    "economy": ("deposit", "pledge", "candidate_pledge", "min_deposit", "min_pledge", "reward_pool",
                "model_reward_budget"),
    "fl": ("classes", "dim", "samples_per_node", "test_samples", "epochs", "batch_size"),
}
_FLOAT_KEYS = {
    "committee": ("p",),
    "timing": ("drop_rate", "train_ms_per_sample_epoch", "eval_ms_per_sample", "speed_spread"),
    "economy": ("malicious_rate",),
    "fl": ("lr", "separation", "spread"),
}
_BOOL_KEYS = {"scenario": ("trace",), "committee": ("bootstrap_elect",), "fl": ("train", "weight_by_samples")}
_KNOWN = {
    "scenario": {"nodes", "rounds", "seed", "time_limit_ms", "trace"},
    "committee": {"need", "p", "elect_times", "bootstrap_elect"},
    "timing": {"mt_elect_ms", "mt_pledge_ms", "mt_commit_ms", "mt_work_ms", "aggregation_window_ms",
               "view_change_timeout_ms", "max_batch", "block_interval_ms", "block_mode", "latency_base_ms",
               "latency_jitter_ms", "drop_rate", "per_message_ms", "think_ms", "train_ms_per_sample_epoch",
               "eval_ms_per_sample", "speed_spread", "retransmit_windows"},
    "economy": {"deposit", "pledge", "candidate_pledge", "min_deposit", "min_pledge", "reward_pool",
                "payout_rate", "gas_base", "gas_per_signature", "gas_per_tuple", "gas_price", "curve",
                "model_reward_budget", "malicious_rate"},
    "fl": {"train", "dataset", "classes", "dim", "samples_per_node", "test_samples", "hidden", "epochs",
           "lr", "batch_size", "skew", "separation", "spread", "weight_by_samples"},
    "dp": {"epsilon", "delta", "clip_norm"},
}


def parse_config(text: str, **overrides: Any) -> ScenarioConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    kw: dict[str, Any] = {}
    try:
        for section in cp.sections():
            if section == "adversaries":
                continue
            if section not in _KNOWN:
                raise ConfigError(f"unknown section [{section}]")
            unknown = set(cp[section]) - _KNOWN[section]
            if unknown:
                raise ConfigError(f"unknown keys in [{section}]: {', '.join(sorted(unknown))}")
        for section, keys in _INT_KEYS.items():
            for k in keys:
                if cp.has_option(section, k):
                    kw[k] = cp.getint(section, k)
        for section, keys in _FLOAT_KEYS.items():
            for k in keys:
                if cp.has_option(section, k):
                    kw[k] = cp.getfloat(section, k)
        for section, keys in _BOOL_KEYS.items():
            for k in keys:
                if cp.has_option(section, k):
                    kw[k] = _bool(cp.get(section, k))
        if cp.has_section("timing"):
            t = cp["timing"]
            defaults = ScenarioConfig.__dataclass_fields__["mt"].default
            names = ("mt_elect_ms", "mt_pledge_ms", "mt_commit_ms", "mt_work_ms")
            kw["mt"] = tuple(int(t.get(n, str(d))) for n, d in zip(names, defaults))
            if "block_mode" in t:
                kw["block_mode"] = t["block_mode"].strip().lower()
        if cp.has_section("economy"):
            e = cp["economy"]
            g = GasSchedule()
            kw["gas"] = GasSchedule(int(e.get("gas_base", g.base)), int(e.get("gas_per_signature", g.per_signature)),
                                    int(e.get("gas_per_tuple", g.per_tuple)), Fraction(e.get("gas_price", str(g.price))))
            if "payout_rate" in e:
                kw["payout_rate"] = Fraction(e["payout_rate"])
            if "curve" in e:
                kw["curve"] = _curve(e["curve"])
        if cp.has_section("fl"):
            f = cp["fl"]
            if "dataset" in f:
                kw["dataset"] = f["dataset"].strip()
            if f.get("hidden", "").strip():
                kw["hidden"] = tuple(int(h) for h in f["hidden"].split(","))
            if f.get("skew", "").strip():
                kw["skew"] = float(f["skew"])
        if cp.has_section("dp") and cp["dp"].get("epsilon", "").strip():
            d = cp["dp"]
            kw["dp"] = DpConfig(float(d["epsilon"]), float(d.get("delta", "1e-5")), float(d.get("clip_norm", "1.0")))
        if cp.has_section("adversaries"):
            rules = []
            for target, value in cp["adversaries"].items():
                rules.extend(_adversary(target, value))
            kw["adversaries"] = tuple(rules)
        kw.update({k: v for k, v in overrides.items() if v is not None})
        return ScenarioConfig(**kw)
    except ConfigError:
        raise
    except (ValueError, TypeError, ContractError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str | Path, **overrides: Any) -> ScenarioConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, **overrides)


# -- metrics ---------------------------------------------------------------------------


@dataclass
class PhaseRecord:
    round: int
    phase: Phase
    start: int
    end: int
    requests: int
    result_digest: str
    view_changes: int = 0


@dataclass
class LatencySample:
    node: str
    round: int
    phase: Phase
    req: str
    sent: int
    confirmed: Optional[int] = None

    @property
    def latency(self) -> Optional[int]:
        return None if self.confirmed is None else self.confirmed - self.sent


@dataclass
class Metrics:
    phases: list[PhaseRecord] = field(default_factory=list)
    latencies: dict[bytes, LatencySample] = field(default_factory=dict)
    accuracy: list[tuple[int, str, int, int]] = field(default_factory=list)
    messages: list[tuple[int, int, int, int]] = field(default_factory=list)
    stage_ends: list[tuple[int, str, int, int]] = field(default_factory=list)

    def stage_detected(self, node: Node, now: int) -> None:
        self.stage_ends.append((node.view.round, short(node.id), int(node.view.phase), now))

    def request_sent(self, node: Node, req: ConsensusRequest, at: int) -> None:
        if req.id not in self.latencies:
            self.latencies[req.id] = LatencySample(short(node.id), req.round, req.phase, req.id.hex()[:16], at)

    def request_confirmed(self, node: Node, req: ConsensusRequest, sent: int, now: int) -> None:
        s = self.latencies.get(req.id)
        if s is not None and s.confirmed is None:
            s.confirmed = now

    def iteration_times(self) -> dict[int, int]:
        """Round -> virtual ms from its first phase start to its Work finalization."""
        out: dict[int, tuple[int, int]] = {}
        for r in self.phases:
            lo, hi = out.get(r.round, (r.start, r.end))
            out[r.round] = (min(lo, r.start), max(hi, r.end))
        return {k: hi - lo for k, (lo, hi) in sorted(out.items())
                if any(p.round == k and p.phase is Phase.WORK for p in self.phases)}

    def iteration_rows(self) -> list[tuple[int, int, int, int, int, int]]:
        """One row per finished round: start, end, duration, requests, view changes."""
        rows = []
        for rnd in self.iteration_times():
            recs = [r for r in self.phases if r.round == rnd]
            lo, hi = min(r.start for r in recs), max(r.end for r in recs)
            rows.append((rnd, lo, hi, hi - lo, sum(r.requests for r in recs), sum(r.view_changes for r in recs)))
        return rows

    def phase_shares(self) -> dict[Phase, float]:
        totals = {p: 0 for p in Phase}
        for r in self.phases:
            totals[r.phase] += r.end - r.start
        whole = sum(totals.values())
        return {p: (t / whole if whole else 0.0) for p, t in totals.items()}

    def latency_values(self) -> list[Optional[int]]:
        return [s.latency for s in self.latencies.values()]


# -- runner ---------------------------------------------------------------------------


@dataclass
class RunResult:
    status: str  # "ok" | "deadlock"
    config: ScenarioConfig
    now: int
    rounds_completed: int
    metrics: Metrics
    contract: StateContract
    report: Any
    runner: "ScenarioRunner"

    @property
    def ok(self) -> bool:
        return self.status == "ok"


def _build_data(cfg: ScenarioConfig) -> tuple[list[Optional[Dataset]], Optional[Dataset]]:
    if not cfg.train:
        return [None] * cfg.nodes, None
    seed = derive_seed(cfg.seed, "data")
    total = cfg.nodes * cfg.samples_per_node + cfg.test_samples
    if cfg.dataset == "blobs":
        full = make_blobs(total, cfg.classes, cfg.dim, seed, spread=cfg.spread, separation=cfg.separation)
    elif cfg.dataset == "moons":
        full = make_moons(total, seed)
    else:
        try:
            full = load_delimited(cfg.dataset, "train")
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot load dataset {cfg.dataset}: {exc}") from None
    rng = np.random.default_rng(derive_seed(seed, "split"))
    order = rng.permutation(len(full))
    n_test = min(cfg.test_samples, len(full) // 5) if cfg.dataset not in ("blobs", "moons") else cfg.test_samples
    test = full.subset(np.sort(order[:n_test]), role="test")
    train = full.subset(np.sort(order[n_test:]))
    parts = partition(train, cfg.nodes, derive_seed(seed, "partition"), cfg.skew)
    return list(parts), test


def _dims(cfg: ScenarioConfig, test: Optional[Dataset]) -> tuple[int, ...]:
    dim = test.dim if test is not None else cfg.dim
    classes = test.n_classes if test is not None else cfg.classes
    return (dim, *cfg.hidden, classes)


class ScenarioRunner:
    def __init__(self, cfg: ScenarioConfig):
        self.cfg = cfg
        lat = LatencyModel(cfg.latency_base_ms, cfg.latency_jitter_ms, cfg.drop_rate)
        self.sim = Simulator(cfg.seed, lat, trace=cfg.trace)
        self.keys = KeyDirectory()
        self.store = ContentStore()
        self.metrics = Metrics()
        try:
            ccfg = ContractConfig(cfg.need, cfg.p, cfg.elect_times, cfg.min_deposit, cfg.min_pledge, cfg.gas,
                                  payout_rate=cfg.payout_rate, model_reward_budget=cfg.model_reward_budget)
            self.curve = AccuracyPriceCurve(cfg.curve)
        except (ContractError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        self.contract = StateContract(self.keys, ccfg)
        self._block_rng = np.random.default_rng(derive_seed(cfg.seed, "blocks"))
        self._next_block = 0
        self._block_no = 0
        self._block_pending = False
        self._mempool: list[tuple[int, int, Node, Any, tuple]] = []
        self._tx_seq = 0
        self._fanout: list = []
        self.tx_log: list[tuple[int, str, int, str, bool, str]] = []
        self._phase_start = 0
        self._messages_at_round: int = 0

        parts, self.test_set = _build_data(cfg)
        self.dims = _dims(cfg, self.test_set)
        costs = CostModel(cfg.per_message_ms, cfg.think_ms, cfg.train_ms_per_sample_epoch,
                          cfg.eval_ms_per_sample, cfg.speed_spread)
        ncfg = NodeConfig(
            dims=self.dims, mt=cfg.mt_by_phase,
            pbft=PbftConfig(cfg.aggregation_window_ms, cfg.view_change_timeout_ms, max_batch=cfg.max_batch),
            costs=costs, pledge_money=cfg.pledge, candidate_money=cfg.candidate_pledge,
            epochs=cfg.epochs, lr=cfg.lr, batch_size=cfg.batch_size, dp=cfg.dp,
            malicious_rate=cfg.malicious_rate, weight_by_samples=cfg.weight_by_samples,
            train=cfg.train, retransmit_windows=cfg.retransmit_windows,
        )
        self.nodes: list[Node] = []
        for i in range(cfg.nodes):
            ident = Identity.from_seed(derive_seed(cfg.seed, "identity", i))
            self.keys.add(ident.node_id, ident.keys.public)
            node = Node(ident, self, parts[i], ncfg, cfg.seed)
            self.nodes.append(node)
            self.sim.add_node(node.id, node)
        self.by_id = {n.id: n for n in self.nodes}
        self.genesis_committee = tuple(sorted(self.by_id))[: cfg.need]
        for rule in cfg.adversaries:
            idx = int(rule.target[1:])
            pool = self.genesis_committee if rule.target[0] == "c" else tuple(n.id for n in self.nodes)
            if idx >= len(pool):
                raise ConfigError(f"adversary target {rule.target} is out of range")
            self.sim.inject_adversary(AdversarySpec(pool[idx], rule.behavior, rule.first_round, rule.last_round))
        self.contract.subscribe(self._on_event)

    # -- block clock and mempool ----------------------------------------------------

    def _block_after(self, at: int) -> int:
        cfg = self.cfg
        if cfg.block_mode == "fixed":
            return (at // cfg.block_interval_ms + 1) * cfg.block_interval_ms
        while self._next_block <= at:
            gap = max(1, int(round(self._block_rng.exponential(cfg.block_interval_ms))))
            self._next_block += gap
        return self._next_block

    def submit_tx(self, node: Node, proof, originals: tuple, at: int) -> None:
        self._tx_seq += 1
        heapq.heappush(self._mempool, (at, self._tx_seq, node, proof, originals))
        if self.cfg.block_mode == "immediate":
            self.sim.call_at(at, self._mine)
        elif not self._block_pending:
            self._block_pending = True
            self.sim.call_at(self._block_after(at), self._mine)

    def _mine(self, now: int) -> None:
        self._block_pending = False
        self._block_no += 1
        self.contract.set_block(self._block_no, now)
        later = []
        while self._mempool:
            tx = heapq.heappop(self._mempool)
            if tx[0] > now:
                later.append(tx)
                continue
            at, _, node, proof, originals = tx
            out = self.contract.submit_transition(node.id, proof, originals)
            self.tx_log.append((now, short(node.id), proof.round, str(proof.phase), out.accepted, out.reason))
        for tx in later:
            heapq.heappush(self._mempool, tx)
        if later and self.cfg.block_mode != "immediate":
            self._block_pending = True
            self.sim.call_at(self._block_after(now), self._mine)
        self._dispatch(now)

    def _on_event(self, rec) -> None:
        self._fanout.append(rec)
        if rec.kind == "state-change":
            self._record_phase(rec.value, rec.time)

    def _dispatch(self, now: int) -> None:
        events, self._fanout = self._fanout, []
        if not events:
            return

        def deliver(t: int, events=events) -> None:
            for node in self.nodes:
                for rec in events:
                    node.on_contract_event(rec, t)

        self.sim.call_at(now, deliver)

    def _record_phase(self, sc: StateChange, now: int) -> None:
        result = decode(sc.result)
        vcs = sum(n.view_changes for n in self.nodes)
        self.metrics.phases.append(PhaseRecord(sc.round, sc.phase, self._phase_start, now,
                                               result.request_count, digest(sc.result).hex()[:16], vcs))
        self._phase_start = now
        if sc.phase is Phase.WORK and isinstance(result.body, WorkBody):
            for node, score in result.body.scores:
                self.metrics.accuracy.append((sc.round, short(node), int(score), int(result.body.global_score)))
            total = sum(self.sim.by_type.values())
            consensus = sum(v for k, v in self.sim.by_type.items() if k in CONSENSUS_NAMES)
            self.metrics.messages.append((sc.round, now, total, consensus))

    # -- running --------------------------------------------------------------------

    def time_limit(self) -> int:
        cfg = self.cfg
        if cfg.time_limit_ms > 0:
            return cfg.time_limit_ms
        per_phase_slack = 3 * max(cfg.block_interval_ms, 1000) + 6 * cfg.aggregation_window_ms \
            + 8 * cfg.view_change_timeout_ms
        return cfg.rounds * (sum(cfg.mt) + 4 * per_phase_slack) + 60_000

    def run(self) -> RunResult:
        cfg = self.cfg
        genesis_model = init_params(self.dims, derive_seed(cfg.seed, "init"))
        gd = self.store.put_model(genesis_model)
        dp = (cfg.dp.eps, cfg.dp.delta, cfg.dp.clip_norm) if cfg.dp else (0.0, 0.0, 0.0)

        def genesis(now: int) -> None:
            self.contract.set_block(0, now)
            committee = None if cfg.bootstrap_elect else self.genesis_committee
            self.contract.initialize([(n.id, cfg.deposit) for n in self.nodes], self.curve, gd, dp,
                                     committee=committee, reward_pool=cfg.reward_pool)
            self._dispatch(now)

        self.sim.call_at(0, genesis)
        report = self.sim.run_until(lambda: self.contract.round > cfg.rounds, self.time_limit())
        status = "ok" if self.contract.round > cfg.rounds else "deadlock"
        return RunResult(status, cfg, self.sim.now, self.contract.round - 1, self.metrics, self.contract,
                         report, self)


def run_scenario(cfg: ScenarioConfig) -> RunResult:
    return ScenarioRunner(cfg).run()


# -- output ------------------------------------------------------------------------------

METRICS_SCHEMA_VERSION = 1

SCHEMAS = {
    "iterations.csv": ["round", "start_ms", "end_ms", "duration_ms", "requests", "view_changes"],
    "phases.csv": ["round", "phase", "start_ms", "end_ms", "duration_ms", "requests", "result_digest",
                   "view_changes"],
    "phase_shares.csv": ["phase", "total_ms", "share"],
    "accuracy.csv": ["round", "node", "local_score", "global_score"],
    "latency.csv": ["node", "round", "phase", "request", "sent_ms", "confirmed_ms", "latency_ms"],
    "messages.csv": ["round", "time_ms", "messages_total", "consensus_messages"],
    "transactions.csv": ["block_time_ms", "caller", "round", "phase", "accepted", "reason"],
    "incentives.csv": ["round", "node", "score_delta", "payout", "penalties", "offense_counters"],
}


def incentive_rows(contract: StateContract) -> list[tuple[int, str, int, int, int, str]]:
    """Per-round, per-node incentive report rebuilt from the contract event log.

    ``offense_counters`` lists the node's cumulative exponential-offense
    counters as ``KIND=count`` pairs, as of its last entry in that round.
    """
    per: dict[tuple[int, bytes], list[int]] = {}
    counters: dict[bytes, dict[str, int]] = {}
    snapshot: dict[tuple[int, bytes], str] = {}

    def touch(rnd: int, node: bytes) -> list[int]:
        snapshot[(rnd, node)] = ";".join(f"{k}={v}" for k, v in sorted(counters.get(node, {}).items()))
        return per.setdefault((rnd, node), [0, 0, 0])

    for rec in contract.events:
        if rec.kind == "incentive":
            applied = rec.value
            ev = applied.event
            kind = IncentiveKind(ev.kind)
            if kind in EXPONENTIAL:
                mine = counters.setdefault(ev.subject, {})
                mine[kind.name] = mine.get(kind.name, 0) + 1
            row = touch(ev.round, ev.subject)
            row[0] += applied.points
            row[2] += applied.deduction
        elif rec.kind == "payout":
            pay = rec.value
            for node, amount in pay.shares:
                touch(pay.round, node)[1] += amount
    return [(rnd, short(node), *vals, snapshot[(rnd, node)])
            for (rnd, node), vals in sorted(per.items(), key=lambda kv: (kv[0][0], short(kv[0][1])))]


def _write(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"# schema v{METRICS_SCHEMA_VERSION}"])
        w.writerow(header)
        w.writerows(rows)


def write_outputs(result: RunResult, out: str | Path) -> list[Path]:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    m = result.metrics
    _write(out / "iterations.csv", SCHEMAS["iterations.csv"], m.iteration_rows())
    _write(out / "phases.csv", SCHEMAS["phases.csv"],
           [(r.round, str(r.phase), r.start, r.end, r.end - r.start, r.requests, r.result_digest, r.view_changes)
            for r in m.phases])
    totals = {p: 0 for p in Phase}
    for r in m.phases:
        totals[r.phase] += r.end - r.start
    shares = m.phase_shares()
    _write(out / "phase_shares.csv", SCHEMAS["phase_shares.csv"],
           [(str(p), totals[p], f"{shares[p]:.6f}") for p in Phase])
    _write(out / "accuracy.csv", SCHEMAS["accuracy.csv"], m.accuracy)
    _write(out / "latency.csv", SCHEMAS["latency.csv"],
           [(s.node, s.round, str(s.phase), s.req, s.sent, "" if s.confirmed is None else s.confirmed,
             "" if s.latency is None else s.latency) for s in m.latencies.values()])
    _write(out / "messages.csv", SCHEMAS["messages.csv"], m.messages)
    _write(out / "transactions.csv", SCHEMAS["transactions.csv"], result.runner.tx_log)
    _write(out / "incentives.csv", SCHEMAS["incentives.csv"], incentive_rows(result.contract))
    result.contract.export_events(out / "events.jsonl")
    result.contract.export_history(out / "history.csv")
    written = [out / name for name in SCHEMAS] + [out / "events.jsonl", out / "history.csv"]
    if result.config.trace:
        result.runner.sim.export_trace(out / "trace.jsonl")
        written.append(out / "trace.jsonl")
    return written


def check_outputs(out: str | Path) -> list[str]:
    """Schema self-check of a metrics directory; returns a list of problems."""
    problems = []
    for name, header in SCHEMAS.items():
        path = Path(out) / name
        if not path.exists():
            problems.append(f"{name}: missing")
            continue
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        if len(rows) < 2 or rows[0] != [f"# schema v{METRICS_SCHEMA_VERSION}"] or rows[1] != header:
            problems.append(f"{name}: bad header")
            continue
        for i, row in enumerate(rows[2:], start=3):
            if len(row) != len(header):
                problems.append(f"{name}:{i}: expected {len(header)} fields, got {len(row)}")
    return problems
