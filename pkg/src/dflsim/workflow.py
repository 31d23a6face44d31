"""Four-phase iteration logic shared by committee members and participants.

Phase results are pure functions of the executed request set and the
finalized state mirrored from contract events, encoded canonically so that
every honest committee member hashes identical bytes.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from typing import Iterable, Optional, Sequence

from .codec import decode, encode
from .committee import Candidate, CommitteeView, ElectionConfig, run_election
from .contract import Genesis, StateChange, successor
from .fl import Dataset, evaluate, fed_avg
from .identity import Digest, Identity, NodeId, digest
from .incentives import IncentiveEvent, IncentiveKind, model_quality_outcomes
from .messages import (
    CommitBody,
    CommitEntry,
    CommitPayload,
    ConsensusRequest,
    ElectBody,
    ElectPayload,
    Phase,
    PhaseResult,
    PledgeBody,
    PledgePayload,
    RequestTuple,
    WorkBody,
    WorkPayload,
)
from .store import ContentStore

DEFAULT_MT_MS = {Phase.ELECT: 30_000, Phase.PLEDGE: 30_000, Phase.COMMIT: 120_000, Phase.WORK: 120_000}
TIMER2_THRESHOLD = Fraction(4, 5)


@lru_cache(maxsize=64)
def decode_result(raw: bytes) -> PhaseResult:
    """Decoded phase results are immutable, so every node can share one copy."""
    return decode(raw)


def phase_successor(phase: Phase, view: CommitteeView) -> Phase:
    return successor(Phase(phase), view)


# -- state-transition detector ----------------------------------------------------------


class DetectorAction(enum.Enum):
    NONE = "none"
    START_TIMER2 = "start-timer2"
    RESET_TIMER2 = "reset-timer2"
    HALVE_AND_REARM = "halve-and-rearm"
    END_STAGE = "end-stage"


@dataclass
class TimerState:
    mt: int
    t: int = 0
    timer2_active: bool = False
    ended: bool = False


@dataclass
class PhaseContext:
    round: int
    phase: Phase
    tot: int
    start: int
    arrivals: list[int] = field(default_factory=list)
    accepted_requests: list[ConsensusRequest] = field(default_factory=list)
    local_result: Optional[bytes] = None


def initial_gap(ctx: PhaseContext) -> int:
    """Mean inter-arrival gap in ms; a lone arrival is measured from stage start."""
    arr = ctx.arrivals
    if len(arr) >= 2:
        return (arr[-1] - arr[0]) // (len(arr) - 1)
    return arr[-1] - ctx.start


def transition_detector(ts: TimerState, ctx: PhaseContext, event: str, now: int
                        ) -> tuple[DetectorAction, Optional[int]]:
    """Advance the adaptive end-of-stage detector by one event.

    ``event`` is ``"arrival"``, ``"timer1"`` or ``"timer2"``. Returns the
    action and, for timer-2 actions, the new timer-2 deadline.
    """
    if ts.ended:
        return DetectorAction.NONE, None
    if event == "timer1":
        ts.ended = True
        ts.timer2_active = False
        return DetectorAction.END_STAGE, None
    if event == "arrival":
        ctx.arrivals.append(now)
        if ts.timer2_active:
            return DetectorAction.RESET_TIMER2, now + ts.t
        if ctx.tot > 0 and Fraction(len(ctx.arrivals), ctx.tot) >= TIMER2_THRESHOLD:
            ts.t = max(0, initial_gap(ctx))
            ts.timer2_active = True
            return DetectorAction.START_TIMER2, now + ts.t
        return DetectorAction.NONE, None
    if event == "timer2":
        if not ts.timer2_active:
            return DetectorAction.NONE, None
        ts.t //= 2
        if ts.t == 0:
            ts.ended = True
            ts.timer2_active = False
            return DetectorAction.END_STAGE, None
        return DetectorAction.HALVE_AND_REARM, now + ts.t
    raise ValueError(f"unknown detector event {event!r}")


class TransitionDetector:
    """Stateful wrapper used by committee nodes; timer-2 deadlines carry a generation."""

    def __init__(self, ctx: PhaseContext, mt: int):
        self.ctx = ctx
        self.ts = TimerState(mt)
        self.gen = 0
        self.ended_at: Optional[int] = None

    @property
    def timer1_at(self) -> int:
        return self.ctx.start + self.ts.mt

    def feed(self, event: str, now: int, gen: Optional[int] = None
             ) -> tuple[DetectorAction, Optional[int], int]:
        if event == "timer2" and gen != self.gen:
            return DetectorAction.NONE, None, self.gen
        action, at = transition_detector(self.ts, self.ctx, event, now)
        if at is not None:
            self.gen += 1
        if action is DetectorAction.END_STAGE:
            self.ended_at = now
        return action, at, self.gen


def expected_total(phase: Phase, registered: int, stake_list: int, committee: int) -> int:
    if phase in (Phase.ELECT, Phase.PLEDGE):
        return registered
    if phase is Phase.COMMIT:
        return stake_list
    return committee


def submission_deadline_check(phase_start: int, mt: int, ready_at: int) -> str:
    """``"proceed"`` if work finishing at ``ready_at`` is inside the stage's mt."""
    return "proceed" if ready_at <= phase_start + mt else "abandon"


# -- mirrored contract state -----------------------------------------------------------


@dataclass
class NodeView:
    """A node's copy of finalized contract state, kept current from events."""

    round: int = 0
    phase: Phase = Phase.ELECT
    committee: Optional[CommitteeView] = None
    stake_list: tuple[NodeId, ...] = ()
    commits: tuple[CommitEntry, ...] = ()
    global_digest: Digest = b"\x00" * 32
    global_score: int = 0
    registered: dict[NodeId, int] = field(default_factory=dict)
    score_history: dict[NodeId, list[int]] = field(default_factory=dict)
    finalized: list[tuple[int, Phase]] = field(default_factory=list)
    last_results: dict[Phase, PhaseResult] = field(default_factory=dict)
    need: int = 4
    p: float = 0.3
    min_pledge: int = 0
    dp: tuple[float, float, float] = (0.0, 1e-5, 1.0)

    @property
    def key(self) -> tuple[int, Phase]:
        return (self.round, self.phase)

    def average_accuracy(self, node: NodeId) -> float:
        hist = self.score_history.get(node)
        return sum(hist) / (len(hist) * 1000) if hist else 0.0

    def apply_genesis(self, g: Genesis) -> None:
        if self.committee is not None:
            return
        self.round, self.phase = g.round, g.phase
        self.committee = g.committee
        self.global_digest = g.global_digest
        self.registered = dict(g.registered)
        self.need, self.p, self.min_pledge, self.dp = g.need, g.p, g.min_pledge, g.dp

    def on_register(self, node: NodeId, deposit: int) -> None:
        self.registered.setdefault(node, deposit)

    def on_state_change_event(self, ev: StateChange) -> bool:
        """Adopt a finalization; returns False for stale or repeated events."""
        if self.committee is None:
            return False
        if (ev.next_round, int(ev.next_phase)) <= (self.round, int(self.phase)):
            return False
        result = decode_result(ev.result)
        self.last_results[ev.phase] = result
        if ev.phase is Phase.WORK and isinstance(result.body, WorkBody):
            # scores are listed only for finalized commits, so a node that
            # missed the Commit event still records the same history
            for node, score in result.body.scores:
                self.score_history.setdefault(node, []).append(int(score))
        self.finalized.append((ev.round, ev.phase))
        self.round, self.phase = ev.next_round, ev.next_phase
        self.committee = ev.committee
        self.stake_list = ev.stake_list
        self.commits = ev.commits
        self.global_digest = ev.global_digest
        self.global_score = ev.global_score
        return True


# -- requests -----------------------------------------------------------------------------


class IneligibleError(ValueError):
    pass


def build_phase_request(phase: Phase, identity: Identity, view: NodeView, *, money: int = 0,
                        balance: Optional[int] = None, model_digest: Digest = b"",
                        samples: int = 0, scores: Sequence[tuple[NodeId, int]] = (),
                        global_digest: Digest = b"", global_score: int = 0) -> ConsensusRequest:
    me = identity.node_id
    if me not in view.registered:
        raise IneligibleError("node is not registered")
    auth = RequestTuple.make(view.round, phase, money, identity)
    if phase is Phase.ELECT:
        acc = view.average_accuracy(me)
        body = ElectPayload(auth, digest(encode((me, round(acc * 1000)))))
    elif phase is Phase.PLEDGE:
        if balance is not None and balance < money:
            raise IneligibleError("fund pool below the pledge amount")
        body = PledgePayload(auth)
    elif phase is Phase.COMMIT:
        if me not in view.stake_list:
            raise IneligibleError("node is not on the stake list")
        body = CommitPayload(auth, model_digest, samples)
    else:
        if view.committee is None or me not in view.committee:
            raise IneligibleError("only committee members submit work")
        body = WorkPayload(auth, tuple(scores), global_digest, global_score)
    return ConsensusRequest.make(body, identity)


def primary_verification(req: ConsensusRequest, view: NodeView, keys) -> bool:
    """Committee-side check: registered, correctly signed, eligible for the phase.

    Balances and (it, status) freshness are left to the contract.
    """
    body = req.body
    auth = getattr(body, "auth", None)
    if not isinstance(auth, RequestTuple) or auth.status != view.phase:
        return False
    if req.sender not in view.registered or auth.address not in view.registered:
        return False
    if not auth.verify(keys):
        return False
    if isinstance(body, ElectPayload):
        return auth.money >= view.min_pledge
    if isinstance(body, PledgePayload):
        return auth.money > 0
    if isinstance(body, CommitPayload):
        return auth.address in view.stake_list
    if isinstance(body, WorkPayload):
        return view.committee is not None and auth.address in view.committee
    return False


# -- phase results ---------------------------------------------------------------------


@dataclass(frozen=True)
class ResultContext:
    """Everything besides the request set that a phase result depends on."""

    view: NodeView
    store: ContentStore
    test: Optional[Dataset]
    malicious_rate: float = 0.5
    weight_by_samples: bool = False


def _fresh(t: RequestTuple, view: NodeView) -> bool:
    return (t.it, t.status) == (view.round, view.phase)


def _unique(requests: Iterable[ConsensusRequest]) -> list[ConsensusRequest]:
    seen: dict[Digest, ConsensusRequest] = {}
    for r in requests:
        if not r.is_end:
            seen.setdefault(r.id, r)
    return [seen[k] for k in sorted(seen)]


_eval_cache: dict[tuple[Digest, Digest], int] = {}


def _test_digest(test: Dataset) -> Digest:
    return digest(test.features.tobytes() + test.labels.tobytes())


def score_model(store: ContentStore, model_digest: Digest, test: Dataset) -> int:
    key = (model_digest, _test_digest(test))
    hit = _eval_cache.get(key)
    if hit is None:
        model = store.get_model(model_digest)
        if model is None:
            return 0
        hit = _eval_cache[key] = evaluate(model, test)
    return hit


@dataclass(frozen=True)
class WorkOutcome:
    scores: tuple[tuple[NodeId, int], ...]
    admitted: tuple[NodeId, ...]
    global_digest: Digest
    global_score: int
    quality: dict


def evaluate_commits(ctx: ResultContext) -> WorkOutcome:
    """Score every finalized sub-model, judge quality, aggregate the admitted ones."""
    view, store, test = ctx.view, ctx.store, ctx.test
    entries = sorted(view.commits, key=lambda e: e.owner)
    if not entries or test is None:
        return WorkOutcome((), (), view.global_digest, view.global_score, {})
    scores = tuple((e.owner, score_model(store, e.model_digest, test)) for e in entries)
    quality = model_quality_outcomes(scores, ctx.malicious_rate)
    admitted = [e for e in entries if quality[e.owner].verdict != "punish"]
    if not admitted:
        return WorkOutcome(scores, (), view.global_digest, view.global_score, quality)
    parts = [(store.get_model(e.model_digest), float(e.samples) if ctx.weight_by_samples and e.samples > 0
              else 1.0) for e in admitted]
    global_params = fed_avg(parts)
    gd = store.put_model(global_params)
    return WorkOutcome(scores, tuple(e.owner for e in admitted), gd, evaluate(global_params, test), quality)


def compute_phase_result(phase: Phase, accepted: Sequence[ConsensusRequest], ctx: ResultContext,
                         master: NodeId) -> bytes:
    view = ctx.view
    phase = Phase(phase)
    reqs = [r for r in _unique(accepted) if r.phase == phase]
    round_ = view.round
    if phase is Phase.ELECT:
        payloads = [r.body for r in reqs if isinstance(r.body, ElectPayload)]
        tuples = sorted({p.auth.digest: p.auth for p in payloads}.values(), key=lambda t: t.digest)
        cands = [Candidate(t.address, float(t.money), view.average_accuracy(t.address))
                 for t in tuples if _fresh(t, view)]
        elected = run_election(cands, ElectionConfig(view.p, view.need, float(view.min_pledge)))
        if elected:
            body = ElectBody(tuple(elected), tuple(tuples), True)
        else:
            body = ElectBody(tuple(view.committee.members), tuple(tuples), False)
    elif phase is Phase.PLEDGE:
        tuples = {r.body.auth.digest: r.body.auth for r in reqs if isinstance(r.body, PledgePayload)}
        body = PledgeBody(tuple(sorted(tuples.values(), key=lambda t: (t.address, t.digest))))
    elif phase is Phase.COMMIT:
        entries = {}
        for r in reqs:
            p = r.body
            if not isinstance(p, CommitPayload) or p.model_digest not in ctx.store:
                continue
            entries[p.auth.digest] = CommitEntry(p.auth.address, p.model_digest, p.samples, p.auth)
        body = CommitBody(tuple(sorted(entries.values(), key=lambda e: (e.owner, e.auth.digest))))
    else:
        out = evaluate_commits(ctx)
        payloads = [r.body for r in reqs if isinstance(r.body, WorkPayload)]
        tuples = sorted({p.auth.digest: p.auth for p in payloads}.values(), key=lambda t: t.digest)
        events: list[IncentiveEvent] = []
        reported: set[NodeId] = set()
        for p in sorted(payloads, key=lambda p: p.auth.digest):
            member = p.auth.address
            if not _fresh(p.auth, view) or member in reported:
                continue
            reported.add(member)
            if tuple(p.scores) == out.scores:
                events.append(IncentiveEvent(IncentiveKind.COMMITTEE_EVALUATION_CORRECT, member, round_))
            if p.global_digest == out.global_digest:
                events.append(IncentiveEvent(IncentiveKind.COMMITTEE_AGGREGATION_CORRECT, member, round_))
        for node, q in sorted(out.quality.items()):
            if q.verdict == "punish":
                events.append(IncentiveEvent(IncentiveKind.LOW_QUALITY_MODEL, node, round_))
            elif q.verdict == "reward":
                events.append(IncentiveEvent(IncentiveKind.HIGH_QUALITY_MODEL, node, round_,
                                             numerator=q.fraction.numerator,
                                             denominator=q.fraction.denominator))
            else:
                events.append(IncentiveEvent(IncentiveKind.REGULAR_QUALITY_MODEL, node, round_))
        body = WorkBody(out.global_digest, out.global_score, out.scores, out.admitted,
                        tuple(events), tuple(tuples))
    return PhaseResult(round_, phase, master, len(reqs), body).to_bytes()
