"""Seeded discrete-event network simulator on a virtual millisecond clock."""

from __future__ import annotations

import enum
import hashlib
import heapq
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Optional, Protocol

import numpy as np

from .codec import encode
from .identity import NodeId


def derive_seed(seed: int, *labels: Any) -> int:
    """Independent 63-bit sub-seed for a labelled random stream."""
    h = hashlib.sha256(repr((int(seed),) + tuple(labels)).encode())
    return int.from_bytes(h.digest()[:8], "big") >> 1


class SimulationError(RuntimeError):
    pass


# -- clock -----------------------------------------------------------------------------


class VirtualClock:
    """Priority queue of (time, insertion seq); time never moves backwards."""

    def __init__(self) -> None:
        self.now = 0
        self._queue: list[tuple[int, int, Any]] = []
        self._seq = 0

    def push(self, at: int, item: Any) -> None:
        if at < self.now:
            raise SimulationError(f"cannot schedule at {at} before now={self.now}")
        heapq.heappush(self._queue, (int(at), self._seq, item))
        self._seq += 1

    def pop(self) -> tuple[int, Any]:
        at, _, item = heapq.heappop(self._queue)
        self.now = at
        return at, item

    def peek_time(self) -> Optional[int]:
        return self._queue[0][0] if self._queue else None

    def __len__(self) -> int:
        return len(self._queue)


# -- network model ---------------------------------------------------------------------


@dataclass(frozen=True)
class LatencyModel:
    base_ms: int = 50
    jitter_ms: int = 30
    drop_rate: float = 0.0

    def __post_init__(self) -> None:
        if self.base_ms < 0 or self.jitter_ms < 0:
            raise ValueError("latency must be non-negative")
        if not 0.0 <= self.drop_rate < 1.0:
            raise ValueError("drop_rate must lie in [0, 1)")

    def sample(self, rng: np.random.Generator) -> int:
        if self.jitter_ms == 0:
            return self.base_ms
        return self.base_ms + int(rng.integers(0, self.jitter_ms + 1))


@dataclass
class Envelope:
    src: NodeId
    dst: NodeId
    payload: bytes
    send_time: int
    deliver_time: int
    msg: Any = field(default=None, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.deliver_time < self.send_time:
            raise SimulationError("deliver_time precedes send_time")


class Behavior(enum.Enum):
    SILENT = "silent"
    EQUIVOCATING_MASTER = "equivocating-master"
    WRONG_HASH_REPLIER = "wrong-hash-replier"
    REPLAYER = "replayer"
    LOW_QUALITY_SUBMITTER = "low-quality-submitter"
    NO_SUBMIT_AFTER_PLEDGE = "no-submit-after-pledge"

    @classmethod
    def parse(cls, text: str) -> "Behavior":
        try:
            return cls(text.strip().lower())
        except ValueError:
            raise ValueError(f"unknown adversary behavior {text!r}") from None


@dataclass(frozen=True)
class AdversarySpec:
    node: NodeId
    behavior: Behavior
    first_round: int = 1
    last_round: Optional[int] = None

    def __post_init__(self) -> None:
        if not isinstance(self.behavior, Behavior):
            object.__setattr__(self, "behavior", Behavior.parse(str(self.behavior)))

    def active(self, round_: int) -> bool:
        return round_ >= self.first_round and (self.last_round is None or round_ <= self.last_round)


class Handler(Protocol):
    def deliver(self, src: NodeId, msg: Any, now: int) -> None: ...

    def on_timer(self, name: tuple, now: int) -> None: ...

    def current_round(self) -> int: ...


# -- simulator -------------------------------------------------------------------------


@dataclass
class SimReport:
    stop: str  # "predicate" | "limit" | "deadlock"
    now: int
    delivered: int
    dropped: int
    by_type: dict[str, int]
    trace_digest: str

    @property
    def deadlocked(self) -> bool:
        return self.stop == "deadlock"


class Simulator:
    """Single event loop driving every node handler, timer and callback."""

    def __init__(self, seed: int, latency: LatencyModel = LatencyModel(), trace: bool = False):
        self.seed = seed
        self.latency = latency
        self.clock = VirtualClock()
        self._rng = np.random.default_rng(derive_seed(seed, "net"))
        self.handlers: dict[NodeId, Handler] = {}
        self.adversaries: dict[NodeId, list[AdversarySpec]] = {}
        self.scheduled = 0
        self.delivered = 0
        self.dropped = 0
        self.by_type: Counter[str] = Counter()
        self.pbft_messages = 0
        self._trace_hash = hashlib.sha256()
        self.keep_trace = trace
        self.trace: list[dict] = []
        self.dropped_log: list[tuple[int, str, str, str]] = []

    @property
    def now(self) -> int:
        return self.clock.now

    def add_node(self, node: NodeId, handler: Handler) -> None:
        self.handlers[node] = handler

    def inject_adversary(self, spec: AdversarySpec) -> None:
        if spec.node not in self.handlers:
            raise SimulationError(f"no node {spec.node.hex()[:12]} to corrupt")
        self.adversaries.setdefault(spec.node, []).append(spec)

    def behaviors(self, node: NodeId, round_: int) -> set[Behavior]:
        return {s.behavior for s in self.adversaries.get(node, ()) if s.active(round_)}

    def is_silent(self, node: NodeId) -> bool:
        h = self.handlers.get(node)
        return h is not None and Behavior.SILENT in self.behaviors(node, h.current_round())

    # -- scheduling ---------------------------------------------------------

    def schedule(self, item: Envelope | tuple) -> None:
        """Enqueue an envelope, or a ``("timer", node, name, at)`` / ``("call", fn, at)`` tuple."""
        if isinstance(item, Envelope):
            self.clock.push(item.deliver_time, item)
            self.scheduled += 1
        elif item[0] == "timer":
            self.clock.push(item[3], item)
        elif item[0] == "call":
            self.clock.push(item[2], item)
        else:
            raise SimulationError(f"unknown schedule item {item[0]!r}")

    def send(self, src: NodeId, dst: NodeId, msg: Any, at: Optional[int] = None,
             payload: Optional[bytes] = None) -> Optional[Envelope]:
        if self.is_silent(src):
            return None
        send_time = self.now if at is None else max(at, self.now)
        if self.latency.drop_rate and self._rng.random() < self.latency.drop_rate:
            self.dropped += 1
            self.dropped_log.append((send_time, src.hex(), dst.hex(), type(msg).__name__))
            return None
        raw = payload if payload is not None else encode(msg)
        delay = 0 if src == dst else self.latency.sample(self._rng)
        env = Envelope(src, dst, raw, send_time, send_time + delay, msg)
        self.schedule(env)
        return env

    def broadcast(self, src: NodeId, dsts: Iterable[NodeId], msg: Any, at: Optional[int] = None) -> None:
        raw = None
        for dst in dsts:
            if dst == src:
                continue
            if raw is None:
                raw = encode(msg)
            self.send(src, dst, msg, at, raw)

    def set_timer(self, node: NodeId, name: tuple, at: int) -> None:
        self.schedule(("timer", node, name, max(at, self.now)))

    def call_at(self, at: int, fn: Callable[[int], None]) -> None:
        self.schedule(("call", fn, max(at, self.now)))

    # -- running ------------------------------------------------------------

    def _record(self, env: Envelope) -> None:
        name = type(env.msg).__name__
        self.by_type[name] += 1
        line = f"{env.deliver_time}|{env.src.hex()}|{env.dst.hex()}|{name}|"
        self._trace_hash.update(line.encode() + hashlib.sha256(env.payload).digest())
        if self.keep_trace:
            self.trace.append({
                "send": env.send_time, "deliver": env.deliver_time, "src": env.src.hex(),
                "dst": env.dst.hex(), "type": name, "bytes": len(env.payload),
                "digest": hashlib.sha256(env.payload).hexdigest(),
            })

    def step(self) -> None:
        at, item = self.clock.pop()
        if isinstance(item, Envelope):
            handler = self.handlers.get(item.dst)
            self.delivered += 1
            self._record(item)
            if handler is not None:
                handler.deliver(item.src, item.msg, at)
        elif item[0] == "timer":
            handler = self.handlers.get(item[1])
            if handler is not None:
                handler.on_timer(item[2], at)
        else:
            item[1](at)

    def run_until(self, predicate: Optional[Callable[[], bool]] = None,
                  limit: Optional[int] = None) -> SimReport:
        stop = "deadlock"
        while True:
            if predicate is not None and predicate():
                stop = "predicate"
                break
            nxt = self.clock.peek_time()
            if nxt is None:
                stop = "deadlock"
                break
            if limit is not None and nxt > limit:
                self.clock.now = max(self.clock.now, limit)
                stop = "limit"
                break
            self.step()
        return SimReport(stop, self.now, self.delivered, self.dropped, dict(self.by_type),
                         self._trace_hash.hexdigest())

    def trace_digest(self) -> str:
        return self._trace_hash.hexdigest()

    def export_trace(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.trace:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
