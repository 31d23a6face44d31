"""Simulated state contract.

The contract is the single source of truth for the round, phase, committee,
fund pools and incentive scores. Committee nodes push a phase forward by
submitting a :class:`~dflsim.messages.TransitionProof` together with the
signed request tuples of the participants whose pledges it debits. Only the
first valid proof per (round, phase) is accepted.

Currency is held in integer milli-coins. Conservation holds at every point::

    sum(fund_pools) + reward_pool + sum(payouts) + gas_burned == sum(deposits)
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from fractions import Fraction
from functools import cached_property
from pathlib import Path
from typing import Any, Callable, Iterable, Optional, Sequence

import numpy as np

from .codec import decode, encode, walk, wire
from .committee import CommitteeView, after_work, fault_tolerance, should_reelect
from .fl import ModelParams
from .identity import Digest, KeyDirectory, NodeId, digest
from .incentives import (
    UNIT,
    IncentiveEvent,
    IncentiveKind,
    PenaltyPolicy,
    RewardLedger,
    apply_event,
    settle_pool,
)
from .messages import (
    CommitBody,
    CommitEntry,
    ElectBody,
    Phase,
    PhaseResult,
    PledgeBody,
    RequestTuple,
    TransitionProof,
    WorkBody,
)
from .pbft import verify_proof

logger = logging.getLogger(__name__)


class ContractError(ValueError):
    """A rejected contract call (configuration or protocol violation)."""


class PrivateDataError(AssertionError):
    """An event payload carried model parameters; this is a programming error."""


class NotFound(KeyError):
    pass


# -- accuracy-price curve -------------------------------------------------------------


@wire(80)
@dataclass(frozen=True)
class AccuracyPriceCurve:
    points: tuple[tuple[float, int], ...]

    def __post_init__(self) -> None:
        pts = tuple((float(a), int(p)) for a, p in self.points)
        object.__setattr__(self, "points", pts)
        if len(pts) < 2:
            raise ContractError("a price curve needs at least two points")
        accs = [a for a, _ in pts]
        if any(not 0.0 <= a <= 1.0 for a in accs):
            raise ContractError("curve accuracies must lie in [0, 1]")
        if any(b <= a for a, b in zip(accs, accs[1:])):
            raise ContractError("curve accuracies must be strictly increasing")


def price_of(curve: AccuracyPriceCurve, acc: float) -> Fraction:
    """Exact point price, the mean of the two neighbours in between, clamped outside."""
    if not 0.0 <= acc <= 1.0:
        raise ValueError("accuracy must lie in [0, 1]")
    pts = curve.points
    if acc <= pts[0][0]:
        return Fraction(pts[0][1])
    if acc >= pts[-1][0]:
        return Fraction(pts[-1][1])
    for (a1, p1), (a2, p2) in zip(pts, pts[1:]):
        if acc == a1:
            return Fraction(p1)
        if a1 < acc < a2:
            return Fraction(p1 + p2, 2)
    return Fraction(pts[-1][1])  # pragma: no cover - covered by the clamp above


# -- gas --------------------------------------------------------------------------------


@dataclass(frozen=True)
class GasSchedule:
    base: int = 21000
    per_signature: int = 3000
    per_tuple: int = 5000
    price: Fraction = Fraction(1, 1000)  # milli-coins per gas unit

    def __post_init__(self) -> None:
        object.__setattr__(self, "price", Fraction(self.price))
        if self.price < 0:
            raise ContractError("gas price must be non-negative")


@dataclass(frozen=True)
class GasMeter:
    gas_used: int
    gas_price: Fraction

    @property
    def cost(self) -> int:
        return math.ceil(self.gas_used * self.gas_price)


def meter_call(schedule: GasSchedule, signatures: int, tuples: int) -> GasMeter:
    return GasMeter(schedule.base + schedule.per_signature * signatures
                    + schedule.per_tuple * tuples, schedule.price)


# -- events -----------------------------------------------------------------------------


@wire(70)
@dataclass(frozen=True)
class StateChange:
    """Finalization of one (round, phase) together with the state it leads to."""

    round: int
    phase: Phase
    result: bytes
    next_round: int
    next_phase: Phase
    committee: CommitteeView
    stake_list: tuple[NodeId, ...]
    commits: tuple[CommitEntry, ...]
    global_digest: Digest
    global_score: int
    caller: NodeId


@wire(71)
@dataclass(frozen=True)
class Genesis:
    round: int
    phase: Phase
    committee: CommitteeView
    curve: AccuracyPriceCurve
    global_digest: Digest
    dp: tuple[float, float, float]
    elect_times: int
    need: int
    p: float
    min_pledge: int
    registered: tuple[tuple[NodeId, int], ...]
    reward_pool: int


@wire(72)
@dataclass(frozen=True)
class Registered:
    node: NodeId
    deposit: int


@wire(73)
@dataclass(frozen=True)
class Rejected:
    caller: NodeId
    round: int
    phase: Phase
    reason: str


@wire(74)
@dataclass(frozen=True)
class ReplayFlag:
    address: NodeId
    it: int
    status: Phase
    digest: Digest
    reason: str


@wire(75)
@dataclass(frozen=True)
class IncentiveApplied:
    event: IncentiveEvent
    points: int
    deduction: int


@wire(76)
@dataclass(frozen=True)
class PayoutMade:
    round: int
    shares: tuple[tuple[NodeId, int], ...]


@dataclass(frozen=True)
class EventRecord:
    seq: int
    block: int
    kind: str
    payload: bytes
    time: int = 0

    @cached_property
    def value(self) -> Any:
        return decode(self.payload)


def _check_private(value: Any) -> None:
    for item in walk(value):
        if isinstance(item, (ModelParams, np.ndarray)):
            raise PrivateDataError("event payloads must not contain model parameters")
    if isinstance(value, StateChange):
        _check_private(decode(value.result))


@dataclass(frozen=True)
class HistoryRecord:
    round: int
    phase: Phase
    result_digest: Digest
    proof_digest: Digest
    block: int
    gas: int
    committee: tuple[NodeId, ...]


@dataclass(frozen=True)
class SubmitOutcome:
    accepted: bool
    reason: str = ""
    gas_used: int = 0
    cost: int = 0
    replays: tuple[Digest, ...] = ()
    excluded: tuple[Digest, ...] = ()


# -- configuration ------------------------------------------------------------------


@dataclass(frozen=True)
class ContractConfig:
    need: int = 4
    p: float = 0.3
    elect_times: int = 2
    min_deposit: int = 1 * UNIT
    min_pledge: int = 1 * UNIT
    gas: GasSchedule = GasSchedule()
    penalty: PenaltyPolicy = PenaltyPolicy()
    payout_rate: Fraction = Fraction(1, 10)
    model_reward_budget: int = 10 * UNIT
    master_base_score: int = UNIT
    plus_one: int = UNIT

    def __post_init__(self) -> None:
        try:
            fault_tolerance(self.need)
        except ValueError as exc:
            raise ContractError(str(exc)) from None
        if self.elect_times < 1:
            raise ContractError("ElectTimes must be >= 1")
        object.__setattr__(self, "payout_rate", Fraction(self.payout_rate))
        if not 0 <= self.payout_rate <= 1:
            raise ContractError("payout_rate must lie in [0, 1]")


def successor(phase: Phase, view: CommitteeView) -> Phase:
    if phase is Phase.ELECT:
        return Phase.PLEDGE
    if phase is Phase.PLEDGE:
        return Phase.COMMIT
    if phase is Phase.COMMIT:
        return Phase.WORK
    return Phase.ELECT if should_reelect(view) else Phase.PLEDGE


# -- the contract -----------------------------------------------------------------------


class StateContract:
    def __init__(self, keys: KeyDirectory, config: ContractConfig = ContractConfig()):
        self.keys = keys
        self.config = config
        self.initialized = False
        self.round = 0
        self.phase = Phase.ELECT
        self.committee: Optional[CommitteeView] = None
        self.curve: Optional[AccuracyPriceCurve] = None
        self.registry: dict[NodeId, int] = {}
        self.fund_pools: dict[NodeId, int] = {}
        self.ledger = RewardLedger()
        self.payouts: dict[NodeId, int] = {}
        self.gas_burned = 0
        self.deposits = 0
        self.stake_list: tuple[NodeId, ...] = ()
        self.commits: tuple[CommitEntry, ...] = ()
        self.global_digest: Digest = b"\x00" * 32
        self.global_score = 0
        self.score_history: dict[NodeId, list[int]] = {}
        self.history: list[HistoryRecord] = []
        self._history_index: dict[tuple[int, Phase], HistoryRecord] = {}
        self.events: list[EventRecord] = []
        self._subscribers: list[tuple[Callable[[EventRecord], None], Optional[frozenset]]] = []
        self.accepted_tuples: set[Digest] = set()
        self._used_slots: set[tuple[NodeId, int, Phase]] = set()
        self.replays: list[ReplayFlag] = []
        self.rejections: list[Rejected] = []
        self.accepted_proofs: dict[tuple[int, Phase], Digest] = {}
        self.block = 0
        self.now = 0
        self.incentive_log: list[IncentiveApplied] = []

    # -- accounting helpers ------------------------------------------------------

    @property
    def reward_pool(self) -> int:
        return self.ledger.tm

    def total_value(self) -> int:
        return sum(self.fund_pools.values()) + self.ledger.tm + sum(self.payouts.values()) + self.gas_burned

    def conserved(self) -> bool:
        return self.total_value() == self.deposits

    def _debit(self, node: NodeId, amount: int) -> int:
        take = min(max(amount, 0), self.fund_pools.get(node, 0))
        if take:
            self.fund_pools[node] -= take
        return take

    def set_block(self, block: int, now: int) -> None:
        self.block = block
        self.now = now

    # -- events -------------------------------------------------------------------------

    def emit_event(self, kind: str, value: Any) -> EventRecord:
        _check_private(value)
        rec = EventRecord(len(self.events), self.block, kind, encode(value), self.now)
        self.events.append(rec)
        for fn, kinds in list(self._subscribers):
            if kinds is None or kind in kinds:
                fn(rec)
        return rec

    def subscribe(self, fn: Callable[[EventRecord], None], kinds: Optional[Iterable[str]] = None) -> None:
        """Attach a listener; it first receives the full backlog, in order."""
        flt = frozenset(kinds) if kinds is not None else None
        for rec in list(self.events):
            if flt is None or rec.kind in flt:
                fn(rec)
        self._subscribers.append((fn, flt))

    # -- genesis and registration -------------------------------------------------

    def initialize(self, genesis: Sequence[tuple[NodeId, int]], curve: AccuracyPriceCurve,
                   global_digest: Digest, dp: tuple[float, float, float],
                   committee: Optional[Sequence[NodeId]] = None, reward_pool: int = 0) -> StateChange | Genesis:
        if self.initialized:
            raise ContractError("contract already initialized")
        if not isinstance(curve, AccuracyPriceCurve):
            raise ContractError("curve must be an AccuracyPriceCurve")
        cfg = self.config
        for node, deposit in genesis:
            self._register(node, deposit, emit=False)
        if reward_pool < 0:
            raise ContractError("reward pool seed must be non-negative")
        self.ledger.tm = reward_pool
        self.deposits += reward_pool
        if committee:
            members = tuple(committee)
            if len(members) != cfg.need:
                raise ContractError(f"genesis committee has {len(members)} members, need {cfg.need}")
            if any(m not in self.registry for m in members):
                raise ContractError("genesis committee members must be registered")
            self.phase = Phase.PLEDGE
        else:
            ordered = sorted(self.registry)
            if len(ordered) < cfg.need:
                raise ContractError("not enough genesis registrants to bootstrap a committee")
            members = tuple(ordered[: cfg.need])
            self.phase = Phase.ELECT
        self.committee = CommitteeView(members, cfg.elect_times, 0)
        self.round = 1
        self.curve = curve
        self.global_digest = global_digest
        self.initialized = True
        g = Genesis(self.round, self.phase, self.committee, curve, global_digest,
                    tuple(float(x) for x in dp), cfg.elect_times, cfg.need, float(cfg.p),
                    cfg.min_pledge, tuple(sorted(self.registry.items())), reward_pool)
        self.emit_event("init", g)
        return g

    def _register(self, node: NodeId, deposit: int, emit: bool = True) -> None:
        if node in self.registry:
            raise ContractError("node already registered")
        if node not in self.keys:
            raise ContractError("node has no known public key")
        if deposit < self.config.min_deposit:
            raise ContractError(f"deposit {deposit} below minimum {self.config.min_deposit}")
        self.registry[node] = deposit
        self.fund_pools[node] = deposit
        self.deposits += deposit
        if emit:
            self.emit_event("register", Registered(node, deposit))

    def register(self, node: NodeId, deposit: int) -> None:
        if not self.initialized:
            raise ContractError("contract not initialized")
        self._register(node, deposit)

    # -- queries ------------------------------------------------------------------------

    def query_history(self, round_: int, phase: Phase) -> HistoryRecord:
        try:
            return self._history_index[(round_, Phase(phase))]
        except KeyError:
            raise NotFound(f"no finalized record for round {round_} {Phase(phase)}") from None

    def average_accuracy(self, node: NodeId) -> float:
        hist = self.score_history.get(node)
        return sum(hist) / (len(hist) * 1000) if hist else 0.0

    def price(self, acc: Optional[float] = None) -> Fraction:
        return price_of(self.curve, self.global_score / 1000 if acc is None else acc)

    # -- transition -----------------------------------------------------------------

    def _reject(self, caller: NodeId, proof: TransitionProof, reason: str, gas: GasMeter) -> SubmitOutcome:
        burned = self._debit(caller, gas.cost)
        self.gas_burned += burned
        rec = Rejected(caller, proof.round, proof.phase, reason)
        self.rejections.append(rec)
        self.emit_event("rejected", rec)
        return SubmitOutcome(False, reason, gas.gas_used, burned)

    def _tuple_problem(self, t: RequestTuple) -> Optional[str]:
        """None if the tuple authorizes this phase, else a reason."""
        if t.digest in self.accepted_tuples or (t.address, t.it, t.status) in self._used_slots:
            return "replay"
        if (t.it, t.status) != (self.round, self.phase):
            return "replay"
        if not t.verify(self.keys):
            return "bad-signature"
        if t.address not in self.registry:
            return "unregistered"
        if self.fund_pools.get(t.address, 0) < t.money:
            return "insufficient-balance"
        return None

    def submit_transition(self, caller: NodeId, proof: TransitionProof,
                          originals: Sequence[RequestTuple]) -> SubmitOutcome:
        if not self.initialized:
            raise ContractError("contract not initialized")
        cfg = self.config
        base = meter_call(cfg.gas, 0, 0)
        if caller not in self.registry:
            return SubmitOutcome(False, "unregistered-caller")
        if caller not in self.committee.members:
            return self._reject(caller, proof, "caller-not-in-committee", base)
        slot = (proof.round, Phase(proof.phase))
        if slot in self.accepted_proofs:
            return self._reject(caller, proof, "duplicate", base)
        if slot != (self.round, self.phase):
            return self._reject(caller, proof, "wrong-phase", base)
        if not verify_proof(proof, self.committee.members, self.keys):
            return self._reject(caller, proof, "invalid-proof", meter_call(cfg.gas, len(proof.replies), 0))
        try:
            result = decode(proof.result)
        except Exception:
            return self._reject(caller, proof, "undecodable-result", base)
        if (not isinstance(result, PhaseResult) or result.round != self.round
                or result.phase != self.phase):
            return self._reject(caller, proof, "result-mismatch", base)
        body_tuples = tuple(result.body.tuples)
        if sorted(t.digest for t in originals) != sorted(t.digest for t in body_tuples):
            return self._reject(caller, proof, "originals-mismatch", base)

        gas = meter_call(cfg.gas, len(proof.replies), len(originals))
        good: list[RequestTuple] = []
        replays: list[Digest] = []
        excluded: list[Digest] = []
        for t in originals:
            problem = self._tuple_problem(t)
            if problem is None:
                good.append(t)
                continue
            excluded.append(t.digest)
            if problem == "replay":
                replays.append(t.digest)
            flag = ReplayFlag(t.address, t.it, t.status, t.digest, problem)
            if problem == "replay":
                self.replays.append(flag)
            self.emit_event("replay" if problem == "replay" else "excluded", flag)

        burned = self._debit(caller, gas.cost)
        self.gas_burned += burned
        # the call reward is priced on the ledger as it stood before this call
        self._incentive(IncentiveEvent(IncentiveKind.COMMITTEE_CONTRACT_SUBMIT, caller, slot[0],
                                       amount=burned))
        before = self.phase
        signers = self.committee.members
        self._apply(result, good)
        for t in good:
            self.accepted_tuples.add(t.digest)
            self._used_slots.add((t.address, t.it, t.status))
        if result.master in signers:
            self._incentive(IncentiveEvent(IncentiveKind.COMMITTEE_MASTER_WORKING, result.master,
                                           slot[0], amount=result.request_count,
                                           numerator=cfg.master_base_score))
        self.accepted_proofs[slot] = digest(encode(proof))
        rec = HistoryRecord(slot[0], slot[1], digest(proof.result), self.accepted_proofs[slot],
                            self.block, gas.gas_used, signers)
        self.history.append(rec)
        self._history_index[slot] = rec
        if before is Phase.WORK:
            self._settle(slot[0])
        self.emit_event("state-change", StateChange(
            slot[0], slot[1], proof.result, self.round, self.phase, self.committee,
            self.stake_list, self.commits, self.global_digest, self.global_score, caller))
        return SubmitOutcome(True, "", gas.gas_used, burned, tuple(replays), tuple(excluded))

    # -- phase effects --------------------------------------------------------------

    def _incentive(self, event: IncentiveEvent) -> IncentiveApplied:
        cfg = self.config
        if event.subject not in self.registry:
            raise ContractError("incentive subject is not registered")
        eff = apply_event(self.ledger, event, policy=cfg.penalty,
                          balance=self.fund_pools.get(event.subject, 0),
                          model_reward_budget=cfg.model_reward_budget, plus_one=cfg.plus_one)
        taken = self._debit(event.subject, eff.deduction)
        self.ledger.tm += taken
        rec = IncentiveApplied(event, eff.points, taken)
        self.incentive_log.append(rec)
        self.emit_event("incentive", rec)
        return rec

    def _apply(self, result: PhaseResult, good: list[RequestTuple]) -> None:
        cfg = self.config
        body = result.body
        good_by_addr: dict[NodeId, RequestTuple] = {}
        for t in good:
            good_by_addr.setdefault(t.address, t)
        phase = self.phase
        if phase is Phase.ELECT:
            assert isinstance(body, ElectBody)
            elected = tuple(body.committee)
            ok = (body.succeeded and len(elected) == cfg.need
                  and all(m in good_by_addr and good_by_addr[m].money >= cfg.min_pledge
                          for m in elected))
            if ok:
                for m in elected:
                    self.ledger.tm += self._debit(m, good_by_addr[m].money)
                members = elected
            else:
                members = self.committee.members
            self.committee = CommitteeView(members, cfg.elect_times, self.committee.epoch + 1)
        elif phase is Phase.PLEDGE:
            assert isinstance(body, PledgeBody)
            stakers = []
            for addr in sorted(good_by_addr):
                t = good_by_addr[addr]
                self.ledger.tm += self._debit(addr, t.money)
                stakers.append(addr)
            self.stake_list = tuple(stakers)
        elif phase is Phase.COMMIT:
            assert isinstance(body, CommitBody)
            stake = set(self.stake_list)
            entries = []
            seen = set()
            for e in sorted(body.entries, key=lambda e: e.owner):
                t = good_by_addr.get(e.owner)
                if t is None or e.owner not in stake or e.owner in seen or t.digest != e.auth.digest:
                    continue
                seen.add(e.owner)
                entries.append(e)
            self.commits = tuple(entries)
            for node in sorted(stake - seen):
                self._incentive(IncentiveEvent(IncentiveKind.NO_SUBMIT_AFTER_PLEDGE, node, self.round))
        else:
            assert isinstance(body, WorkBody)
            committed = {e.owner for e in self.commits}
            for node, score in body.scores:
                if node in committed:
                    self.score_history.setdefault(node, []).append(int(score))
            self.global_digest = body.global_digest
            self.global_score = int(body.global_score)
            allowed = {
                IncentiveKind.COMMITTEE_EVALUATION_CORRECT, IncentiveKind.COMMITTEE_AGGREGATION_CORRECT,
                IncentiveKind.HIGH_QUALITY_MODEL, IncentiveKind.REGULAR_QUALITY_MODEL,
                IncentiveKind.LOW_QUALITY_MODEL,
            }
            members = set(self.committee.members)
            for ev in body.outcomes:
                if not isinstance(ev, IncentiveEvent) or ev.kind not in allowed or ev.round != self.round:
                    continue
                is_member_event = ev.kind in (IncentiveKind.COMMITTEE_EVALUATION_CORRECT,
                                               IncentiveKind.COMMITTEE_AGGREGATION_CORRECT)
                if (is_member_event and ev.subject not in members) or (
                        not is_member_event and ev.subject not in committed):
                    continue
                self._incentive(ev)
            for m in self.committee.members:
                kind = (IncentiveKind.COMMITTEE_RESPONDS if m in good_by_addr
                        else IncentiveKind.COMMITTEE_UNANSWERED)
                self._incentive(IncentiveEvent(kind, m, self.round))
            self.committee = after_work(self.committee)
        nxt = successor(phase, self.committee)
        if phase is Phase.WORK:
            self.round += 1
            self.stake_list = ()
            self.commits = ()
        self.phase = nxt

    def _settle(self, round_: int) -> None:
        total = int(self.ledger.tm * self.config.payout_rate)
        shares = settle_pool(self.ledger.scores, total)
        if not shares:
            return
        for node, amount in shares.items():
            self.payouts[node] = self.payouts.get(node, 0) + amount
        self.ledger.tm -= sum(shares.values())
        self.emit_event("payout", PayoutMade(round_, tuple(sorted(shares.items()))))

    # -- export ---------------------------------------------------------------------

    def export_events(self, path: str | Path) -> None:
        """Hash-chained JSON lines: each record embeds the digest of the previous one."""
        prev = "00" * 32
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.events:
                body = {"seq": rec.seq, "block": rec.block, "time": rec.time, "kind": rec.kind,
                        "payload": rec.payload.hex(), "prev": prev}
                line = json.dumps(body, sort_keys=True)
                prev = digest(line.encode()).hex()
                fh.write(line + "\n")

    def export_history(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["round", "phase", "result_digest", "proof_digest", "block", "gas"])
            for r in self.history:
                w.writerow([r.round, str(r.phase), r.result_digest.hex(), r.proof_digest.hex(),
                            r.block, r.gas])


def verify_event_chain(path: str | Path) -> bool:
    prev = "00" * 32
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if json.loads(line)["prev"] != prev:
                return False
            prev = digest(line.encode()).hex()
    return True
