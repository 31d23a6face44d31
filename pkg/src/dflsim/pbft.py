"""PBFT replica with the End/Reply transition-proof extension.

One :class:`Replica` runs per committee member per committee epoch. Its log
is scoped to the current (epoch, round, phase): sequence numbers restart at 1
in every phase, and the whole log is dropped when the contract finalizes the
phase. The view number survives phase changes within an epoch.

Closing a stage works as follows. Every committee member that decides the
stage is over orders an ``End`` request through PBFT. When the F+1-th End
from distinct members executes, each replica freezes the stage. The result
is then a pure function of the requests executed before that point, so all
honest replicas compute the same bytes. Every executed End whose hash
matches the frozen result gets a signed ``Reply`` carrying the result. F+1
matching Replies form a :class:`TransitionProof` for the contract.

The replica is a deterministic state machine: methods take the current
virtual time and return outbound actions; they never read a clock.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Any, Optional, Protocol, Union

from .committee import CommitteeView, fault_tolerance
from .identity import Digest, Identity, KeyDirectory, NodeId, digest, verify as verify_sig
from .messages import (
    Batch,
    ClientAck,
    ConsensusRequest,
    EndRequest,
    MsgKind,
    NewView,
    PbftMessage,
    Phase,
    PhaseKey,
    PreparedCert,
    ReplyMsg,
    TransitionProof,
    ViewChange,
    preprepare_header,
)

logger = logging.getLogger(__name__)


def fault_threshold(n: int) -> int:
    """F for an n = 3F+1 committee."""
    return fault_tolerance(n)


# -- outbound actions ---------------------------------------------------------------


@dataclass(frozen=True)
class Send:
    """Deliver ``msg`` to ``dst``; ``dst=None`` means every other committee member."""

    dst: Optional[NodeId]
    msg: Any


@dataclass(frozen=True)
class SetTimer:
    name: tuple
    at: int


Action = Union[Send, SetTimer]


class ReplicaApp(Protocol):
    """Hooks the workflow layer provides to a replica."""

    def validate(self, request: ConsensusRequest) -> bool: ...

    def arrived(self, request: ConsensusRequest, now: int) -> None: ...

    def accept(self, request: ConsensusRequest, now: int, late: bool) -> None: ...

    def phase_result(self, key: PhaseKey, master: NodeId, now: int) -> bytes: ...

    def frozen(self, key: PhaseKey, result: bytes, now: int) -> None: ...


@dataclass(frozen=True)
class PbftConfig:
    aggregation_window_ms: int = 5000
    view_change_timeout_ms: int = 12000
    buffer_limit: int = 4096
    max_batch: int = 0  # propose early once this many requests wait; 0 = window only


# -- End requests and proof collection ---------------------------------------------


def make_end_request(phase: Phase, round_: int, local_result: bytes, identity: Identity) -> EndRequest:
    unsigned = EndRequest(identity.node_id, phase, round_, digest(local_result))
    return replace(unsigned, sig=identity.sign(unsigned.body()))


def make_reply(end_hash: Digest, phase: Phase, round_: int, result: bytes, identity: Identity) -> ReplyMsg:
    unsigned = ReplyMsg(identity.node_id, phase, round_, end_hash, b"", result)
    return replace(unsigned, sig=identity.sign(unsigned.body()))


class EndCollector:
    """Gathers Replies to one End request until F+1 distinct responders agree."""

    def __init__(self, end: EndRequest, members: tuple[NodeId, ...], keys: KeyDirectory, f: int):
        self.end = end
        self.members = frozenset(members)
        self.keys = keys
        self.f = f
        self.replies: dict[NodeId, ReplyMsg] = {}
        self.mismatched = 0
        self.duplicates = 0
        self.proof: Optional[TransitionProof] = None

    def add(self, reply: ReplyMsg) -> Optional[TransitionProof]:
        """Returns the proof the first time F+1 valid distinct replies are held."""
        if reply.type != self.end.type or reply.round != self.end.round:
            return None
        if reply.hash != self.end.hash:
            self.mismatched += 1
            return None
        if reply.address not in self.members or not reply.verify(self.keys):
            self.mismatched += 1
            return None
        if reply.address in self.replies:
            self.duplicates += 1
            return None
        self.replies[reply.address] = reply
        if self.proof is None and len(self.replies) >= self.f + 1:
            ordered = tuple(self.replies[a] for a in sorted(self.replies))
            self.proof = TransitionProof(self.end, ordered, self.end.round, self.end.type)
            return self.proof
        return None


def collect_replies(pending: EndCollector, reply: ReplyMsg, f: int) -> Optional[TransitionProof]:
    pending.f = f
    return pending.add(reply)


def verify_proof(proof: TransitionProof, members: tuple[NodeId, ...], keys: KeyDirectory) -> bool:
    """F+1 distinct committee signatures over one hash, matching the End."""
    f = fault_tolerance(len(members))
    end = proof.end
    if end.address not in members or not end.verify(keys):
        return False
    if end.type != proof.phase or end.round != proof.round:
        return False
    seen: set[NodeId] = set()
    for r in proof.replies:
        if r.address in seen or r.address not in members:
            return False
        if r.hash != end.hash or r.type != end.type or r.round != end.round:
            return False
        if not r.verify(keys):
            return False
        seen.add(r.address)
    return len(seen) >= f + 1


# -- replica -------------------------------------------------------------------------


@dataclass
class _Slot:
    preprepare: Optional[PbftMessage] = None
    prepares: dict[Digest, dict[NodeId, PbftMessage]] = field(default_factory=dict)
    commits: dict[Digest, dict[NodeId, PbftMessage]] = field(default_factory=dict)
    prepared: bool = False
    committed: bool = False

    @property
    def digest(self) -> Optional[Digest]:
        return self.preprepare.req_id if self.preprepare else None


@dataclass
class ReplicaStats:
    invalid: int = 0
    hash_mismatch: int = 0
    view_changes: int = 0
    evidence: list = field(default_factory=list)


def _key_order(key: PhaseKey) -> tuple[int, int, int]:
    epoch, round_, phase = key
    return (round_, int(phase), epoch)


class Replica:
    def __init__(self, identity: Identity, keys: KeyDirectory, committee: CommitteeView,
                 key: PhaseKey, app: ReplicaApp, config: PbftConfig = PbftConfig()):
        self.me = identity.node_id
        self.identity = identity
        self.keys = keys
        self.committee = committee
        self.members = committee.members
        self.n = len(self.members)
        self.f = fault_tolerance(self.n)
        self.app = app
        self.config = config
        self.view = committee.view_changes
        self.active = self.me in self.members
        self.stats = ReplicaStats()
        self._out: list[Action] = []
        self._timer_gen = 0
        self._buffer: list[Any] = []
        self._peer_views: dict[NodeId, int] = {}
        self._reset_phase(key)

    # -- bookkeeping ---------------------------------------------------------

    def _reset_phase(self, key: PhaseKey) -> None:
        self.key = key
        self.slots: dict[tuple[int, int], _Slot] = {}
        self.decided: dict[int, Batch] = {}
        self.executed_seq = 0
        self.executed_ids: set[Digest] = set()
        self.known: dict[Digest, ConsensusRequest] = {}
        self.pending: dict[Digest, int] = {}
        self.assigned: set[Digest] = set()
        self.next_seq = 1
        self.batch_timer_at: Optional[int] = None
        self.end_senders: set[NodeId] = set()
        self.executed_ends: list[ConsensusRequest] = []
        self.replied: set[Digest] = set()
        self.frozen_result: Optional[bytes] = None
        self.frozen_hash: Optional[Digest] = None
        self.freeze_master: Optional[NodeId] = None
        self.in_view_change = False
        self.vc_target = self.view
        self.vc_attempts = 0
        self.vc_votes: dict[int, dict[NodeId, ViewChange]] = {}
        self.new_views: dict[int, NewView] = {}
        self._progress_gen = 0

    def _flush(self) -> list[Action]:
        out, self._out = self._out, []
        return out

    def _send(self, dst: Optional[NodeId], msg: Any) -> None:
        if self.active:
            self._out.append(Send(dst, msg))

    def _timer(self, name: tuple, at: int) -> None:
        if self.active:
            self._out.append(SetTimer(name, at))

    def master_of(self, view: int) -> NodeId:
        return self.members[(self.committee.epoch + view) % self.n]

    @property
    def master(self) -> NodeId:
        return self.master_of(self.view)

    @property
    def is_master(self) -> bool:
        return self.master == self.me

    def _classify(self, key: PhaseKey) -> int:
        """-1 stale, 0 current, 1 future."""
        if key == self.key:
            return 0
        return 1 if _key_order(key) > _key_order(self.key) else -1

    def _hold(self, msg: Any) -> None:
        if len(self._buffer) < self.config.buffer_limit:
            self._buffer.append(msg)

    # -- public entry points -------------------------------------------------

    def handle(self, msg: Any, now: int) -> list[Action]:
        if not self.active:
            return []
        if isinstance(msg, ConsensusRequest):
            self._on_request(msg, now)
        elif isinstance(msg, PbftMessage):
            self._on_pbft(msg, now)
        elif isinstance(msg, ViewChange):
            self._on_view_change(msg, now)
        elif isinstance(msg, NewView):
            self._on_new_view(msg, now)
        return self._flush()

    def on_timer(self, name: tuple, now: int) -> list[Action]:
        if not self.active:
            return []
        kind = name[0]
        if name[1] != self.key:
            return []
        if kind == "batch":
            if self.batch_timer_at == name[2]:
                self.batch_timer_at = None
                self._propose(now)
        elif kind == "progress":
            if name[2] == self._progress_gen and self.pending and not self.in_view_change:
                self._start_view_change(self.view + 1, now)
        elif kind == "vc":
            if self.in_view_change and name[2] == self.vc_target:
                self._start_view_change(self.vc_target + 1, now)
        return self._flush()

    def advance(self, key: PhaseKey, now: int) -> list[Action]:
        """Move to a newly finalized phase: drop the old log, replay buffered input."""
        if _key_order(key) <= _key_order(self.key):
            return []
        if self.in_view_change:
            # an unfinished view change does not carry into the next phase
            self.view = max(self.view, self.vc_target - 1)
        self._reset_phase(key)
        held, self._buffer = self._buffer, []
        out: list[Action] = []
        for msg in held:
            out.extend(self.handle(msg, now))
        out.extend(self._flush())
        return out

    def apply_committee_switch(self, new_view: CommitteeView, key: PhaseKey, now: int) -> "Replica":
        """Replica for a newly announced committee; a stale epoch is ignored."""
        if new_view.epoch < self.committee.epoch:
            return self
        if new_view.epoch == self.committee.epoch and new_view.members == self.members:
            return self
        return Replica(self.identity, self.keys, new_view, key, self.app, self.config)

    # -- requests --------------------------------------------------------------

    def _on_request(self, req: ConsensusRequest, now: int) -> None:
        if not req.verify(self.keys):
            self.stats.invalid += 1
            return
        try:
            cls = self._classify_request(req)
        except Exception:
            self.stats.invalid += 1
            return
        if cls < 0:
            return
        if cls > 0:
            self._hold(req)
            return
        if req.id in self.executed_ids:
            if not req.is_end:
                self._ack(req)
            return
        if req.id in self.known:
            return
        if not self._admissible(req):
            self.stats.invalid += 1
            return
        self.known[req.id] = req
        self.pending[req.id] = now
        self.app.arrived(req, now)
        self._arm_progress(now)
        if self.is_master and not self.in_view_change:
            self._arm_batch(now)
            cap = self.config.max_batch
            if cap and sum(1 for rid in self.pending if rid not in self.assigned) >= cap:
                self.batch_timer_at = None
                self._propose(now)

    def _classify_request(self, req: ConsensusRequest) -> int:
        # A non-End request for the current phase but an older round is not
        # dropped here: freshness of (it, status) is judged by the contract,
        # which flags it as a replay.
        if not req.is_end and req.phase == self.key[2] and req.round < self.key[1]:
            return 0
        return self._classify((self.key[0], req.round, req.phase))

    def _admissible(self, req: ConsensusRequest) -> bool:
        body = req.body
        if isinstance(body, EndRequest):
            return (body.address == req.sender and req.sender in self.members
                    and body.verify(self.keys))
        return self.app.validate(req)

    def _ack(self, req: ConsensusRequest) -> None:
        unsigned = ClientAck(req.id, req.round, req.phase, self.me)
        self._send(req.sender, replace(unsigned, sig=self.identity.sign(unsigned.body())))

    def _arm_progress(self, now: int) -> None:
        self._progress_gen += 1
        timeout = self.config.view_change_timeout_ms
        self._timer(("progress", self.key, self._progress_gen), now + timeout)

    def _arm_batch(self, now: int) -> None:
        if self.batch_timer_at is not None:
            return
        # the window opens with the first unbatched request
        at = now + max(0, self.config.aggregation_window_ms)
        self.batch_timer_at = at
        self._timer(("batch", self.key, at), at)

    def _propose(self, now: int) -> None:
        if not self.is_master or self.in_view_change:
            return
        fresh = [rid for rid in self.pending if rid not in self.assigned]
        if not fresh:
            return
        fresh.sort(key=lambda rid: (self.pending[rid], rid))
        batch = Batch(self.me, self.view, self.next_seq, tuple(self.known[r] for r in fresh))
        self.next_seq += 1
        self.assigned.update(fresh)
        pp = PbftMessage(MsgKind.PREPREPARE, *self.key, self.view, batch.seq, batch.digest,
                         self.me, batch=batch)
        pp = replace(pp, sig=self.identity.sign(pp.body()))
        self._send(None, pp)
        self._accept_preprepare(pp, now)

    # -- normal case -----------------------------------------------------------

    def _on_pbft(self, msg: PbftMessage, now: int) -> None:
        if msg.sender not in self.members or msg.sender == self.me:
            return
        if not msg.verify(self.keys):
            self.stats.invalid += 1
            return
        cls = self._classify(msg.key)
        if cls < 0:
            return
        if cls > 0:
            self._hold(msg)
            return
        self._note_peer_view(msg.sender, msg.view, now)
        if msg.view != self.view or self.in_view_change:
            if msg.view > self.view:
                self._hold(msg)
            return
        if msg.kind == MsgKind.PREPREPARE:
            self._on_preprepare(msg, now)
        elif msg.kind == MsgKind.PREPARE:
            self._on_prepare(msg, now)
        elif msg.kind == MsgKind.COMMIT:
            self._on_commit(msg, now)

    def _valid_batch(self, msg: PbftMessage) -> bool:
        batch = msg.batch
        if batch is None or batch.digest != msg.req_id or batch.seq != msg.seq:
            return False
        for req in batch.requests:
            if req.id in self.known:
                continue
            if not req.verify(self.keys):
                return False
            if self._classify_request(req) != 0:
                return False
            if not self._admissible(req):
                return False
        return True

    def _on_preprepare(self, msg: PbftMessage, now: int) -> None:
        if msg.sender != self.master_of(msg.view):
            return
        if msg.batch is None or msg.batch.proposer != msg.sender or msg.batch.view != msg.view:
            return
        slot = self.slots.get((msg.view, msg.seq))
        if slot is not None and slot.preprepare is not None:
            if slot.preprepare.req_id != msg.req_id:
                self._equivocation(slot.preprepare, msg, now)
            return
        if not self._valid_batch(msg):
            self.stats.invalid += 1
            self.stats.evidence.append(("invalid-batch", msg.view, msg.seq, msg.sender))
            self._start_view_change(self.view + 1, now)
            return
        self._accept_preprepare(msg, now)

    def _accept_preprepare(self, msg: PbftMessage, now: int) -> None:
        slot = self.slots.setdefault((msg.view, msg.seq), _Slot())
        slot.preprepare = msg
        for req in msg.batch.requests:
            if req.id not in self.known:
                self.known[req.id] = req
                if req.id not in self.executed_ids:
                    self.pending[req.id] = now
                    self.app.arrived(req, now)
            self.assigned.add(req.id)
        if msg.sender != self.me:
            prep = PbftMessage(MsgKind.PREPARE, *self.key, msg.view, msg.seq, msg.req_id, self.me,
                               pp_sig=msg.sig)
            prep = prep.signed(self.identity)
            slot.prepares.setdefault(msg.req_id, {})[self.me] = prep
            self._send(None, prep)
        self._arm_progress(now)
        self._check(slot, msg.view, msg.seq, now)

    def _on_prepare(self, msg: PbftMessage, now: int) -> None:
        master = self.master_of(msg.view)
        if msg.sender == master:
            return
        header = preprepare_header(*msg.key, msg.view, msg.seq, msg.req_id, master)
        if not verify_sig(self.keys.public_key(master) or b"", header, msg.pp_sig):
            self.stats.invalid += 1
            return
        slot = self.slots.setdefault((msg.view, msg.seq), _Slot())
        if slot.preprepare is not None and slot.preprepare.req_id != msg.req_id:
            forged = PbftMessage(MsgKind.PREPREPARE, *msg.key, msg.view, msg.seq, msg.req_id,
                                 master, sig=msg.pp_sig)
            self._equivocation(slot.preprepare, forged, now)
        slot.prepares.setdefault(msg.req_id, {})[msg.sender] = msg
        self._check(slot, msg.view, msg.seq, now)

    def _on_commit(self, msg: PbftMessage, now: int) -> None:
        slot = self.slots.setdefault((msg.view, msg.seq), _Slot())
        slot.commits.setdefault(msg.req_id, {})[msg.sender] = msg
        self._check(slot, msg.view, msg.seq, now)

    def _check(self, slot: _Slot, view: int, seq: int, now: int) -> None:
        d = slot.digest
        if d is None:
            return
        if not slot.prepared and len(slot.prepares.get(d, {})) >= 2 * self.f:
            slot.prepared = True
            com = PbftMessage(MsgKind.COMMIT, *self.key, view, seq, d, self.me).signed(self.identity)
            slot.commits.setdefault(d, {})[self.me] = com
            self._send(None, com)
        if slot.prepared and not slot.committed and len(slot.commits.get(d, {})) >= 2 * self.f + 1:
            slot.committed = True
            existing = self.decided.get(seq)
            if existing is not None and existing.digest != d:  # pragma: no cover - safety guard
                raise AssertionError(f"conflicting decisions for seq {seq}")
            self.decided[seq] = slot.preprepare.batch
            self._execute(now)

    def _equivocation(self, a: PbftMessage, b: PbftMessage, now: int) -> None:
        self.stats.evidence.append(("equivocation", a.view, a.seq, a.sender, a.req_id, b.req_id))
        self._start_view_change(max(self.view, a.view) + 1, now)

    # -- execution -------------------------------------------------------------

    def _execute(self, now: int) -> None:
        progressed = False
        while self.executed_seq + 1 in self.decided:
            self.executed_seq += 1
            batch = self.decided[self.executed_seq]
            for req in batch.requests:
                if req.id in self.executed_ids:
                    continue
                self.executed_ids.add(req.id)
                self.pending.pop(req.id, None)
                self.known.setdefault(req.id, req)
                progressed = True
                if req.is_end:
                    self._execute_end(req, batch, now)
                else:
                    self.app.accept(req, now, self.frozen_result is not None)
                    self._ack(req)
        if progressed and self.pending:
            self._arm_progress(now)
        elif progressed:
            self._progress_gen += 1

    def _execute_end(self, req: ConsensusRequest, batch: Batch, now: int) -> None:
        end: EndRequest = req.body
        self.executed_ends.append(req)
        self.end_senders.add(end.address)
        if self.frozen_result is None and len(self.end_senders) >= self.f + 1:
            self.freeze_master = batch.proposer
            result = self.app.phase_result(self.key, batch.proposer, now)
            self.frozen_result = result
            self.frozen_hash = digest(result)
            self.app.frozen(self.key, result, now)
        if self.frozen_result is not None:
            self._reply_pending_ends()

    def _reply_pending_ends(self) -> None:
        for req in self.executed_ends:
            end: EndRequest = req.body
            if req.id in self.replied:
                continue
            self.replied.add(req.id)
            if end.hash != self.frozen_hash:
                self.stats.hash_mismatch += 1
                continue
            reply = make_reply(end.hash, end.type, end.round, self.frozen_result, self.identity)
            if end.address == self.me:
                self._out.append(Send(self.me, reply))
            else:
                self._send(end.address, reply)

    # -- view change -----------------------------------------------------------

    def _prepared_certs(self) -> tuple[PreparedCert, ...]:
        best: dict[int, _Slot] = {}
        for (view, seq), slot in self.slots.items():
            if slot.prepared and (seq not in best or best[seq].preprepare.view < view):
                best[seq] = slot
        certs = []
        for seq in sorted(best):
            slot = best[seq]
            d = slot.digest
            prepares = tuple(m for s, m in sorted(slot.prepares[d].items()))[: 2 * self.f]
            certs.append(PreparedCert(slot.preprepare, prepares))
        return tuple(certs)

    def _start_view_change(self, target: int, now: int) -> None:
        if target <= self.view or (self.in_view_change and target <= self.vc_target):
            return
        self.in_view_change = True
        self.vc_target = target
        self.vc_attempts += 1
        self.stats.view_changes += 1
        self.batch_timer_at = None
        vc = ViewChange(*self.key, target, self.me, self._prepared_certs())
        vc = replace(vc, sig=self.identity.sign(vc.body()))
        self.vc_votes.setdefault(target, {})[self.me] = vc
        self._send(None, vc)
        backoff = self.config.view_change_timeout_ms * (2 ** min(self.vc_attempts - 1, 4))
        self._timer(("vc", self.key, target), now + backoff)
        self._maybe_new_view(target, now)

    def _valid_cert(self, cert: PreparedCert) -> bool:
        pp = cert.preprepare
        if pp.kind != MsgKind.PREPREPARE or pp.key != self.key or pp.batch is None:
            return False
        master = self.master_of(pp.view)
        if pp.sender != master or not pp.verify(self.keys):
            return False
        if pp.batch.digest != pp.req_id or pp.batch.seq != pp.seq:
            return False
        senders = set()
        for p in cert.prepares:
            if (p.kind != MsgKind.PREPARE or p.view != pp.view or p.seq != pp.seq
                    or p.req_id != pp.req_id or p.sender == master or p.sender not in self.members
                    or not p.verify(self.keys)):
                return False
            senders.add(p.sender)
        return len(senders) >= 2 * self.f

    def _valid_view_change(self, vc: ViewChange) -> bool:
        if vc.sender not in self.members or vc.key != self.key:
            return False
        if not self.keys.verify(vc.sender, vc.body(), vc.sig):
            return False
        return all(self._valid_cert(c) for c in vc.prepared)

    def _on_view_change(self, vc: ViewChange, now: int) -> None:
        cls = self._classify(vc.key)
        if cls < 0:
            return
        if cls > 0:
            self._hold(vc)
            return
        if vc.sender == self.me or not self._valid_view_change(vc):
            return
        if vc.new_view <= self.view:
            # a lagging peer: re-send the NewView that established our view
            nv = self.new_views.get(self.view)
            if nv is not None and self.is_master:
                self._send(vc.sender, nv)
            return
        self.vc_votes.setdefault(vc.new_view, {})[vc.sender] = vc
        self._note_peer_view(vc.sender, vc.new_view, now)
        self._maybe_new_view(vc.new_view, now)

    def _note_peer_view(self, sender: NodeId, view: int, now: int) -> None:
        if view <= self._peer_views.get(sender, -1):
            return
        self._peer_views[sender] = view
        ahead = sorted(v for v in self._peer_views.values() if v > self.view)
        if len(ahead) >= self.f + 1:
            target = ahead[-(self.f + 1)]
            if not self.in_view_change or target > self.vc_target:
                self._start_view_change(target, now)

    def _new_view_preprepares(self, view: int, vcs: list[ViewChange]) -> tuple[PbftMessage, ...]:
        chosen: dict[int, PbftMessage] = {}
        for vc in vcs:
            for cert in vc.prepared:
                pp = cert.preprepare
                cur = chosen.get(pp.seq)
                if cur is None or pp.view > cur.view:
                    chosen[pp.seq] = pp
        top = max(chosen) if chosen else 0
        master = self.master_of(view)
        out = []
        for seq in range(1, top + 1):
            if seq in chosen:
                batch = chosen[seq].batch
            else:
                batch = Batch(master, view, seq, ())
            out.append(PbftMessage(MsgKind.PREPREPARE, *self.key, view, seq, batch.digest, master,
                                   batch=batch))
        return tuple(out)

    def _maybe_new_view(self, view: int, now: int) -> None:
        if self.master_of(view) != self.me or view in self.new_views:
            return
        votes = self.vc_votes.get(view, {})
        if len(votes) < 2 * self.f + 1:
            return
        vcs = [votes[s] for s in sorted(votes)][: 2 * self.f + 1]
        pps = tuple(pp.signed(self.identity) for pp in self._new_view_preprepares(view, vcs))
        nv = NewView(*self.key, view, self.me, tuple(vcs), pps)
        nv = replace(nv, sig=self.identity.sign(nv.body()))
        self.new_views[view] = nv
        self._send(None, nv)
        self._enter_view(nv, now)

    def _on_new_view(self, nv: NewView, now: int) -> None:
        cls = self._classify(nv.key)
        if cls < 0:
            return
        if cls > 0:
            self._hold(nv)
            return
        if nv.view <= self.view or nv.sender != self.master_of(nv.view):
            return
        if not self.keys.verify(nv.sender, nv.body(), nv.sig):
            return
        senders = set()
        for vc in nv.view_changes:
            if vc.new_view != nv.view or not self._valid_view_change(vc):
                return
            senders.add(vc.sender)
        if len(senders) < 2 * self.f + 1:
            return
        expected = self._new_view_preprepares(nv.view, list(nv.view_changes))
        if [(p.seq, p.req_id) for p in expected] != [(p.seq, p.req_id) for p in nv.preprepares]:
            self.stats.evidence.append(("bad-new-view", nv.view, nv.sender))
            return
        for pp in nv.preprepares:
            if pp.sender != nv.sender or not pp.verify(self.keys):
                return
        self.new_views[nv.view] = nv
        self._enter_view(nv, now)

    def _enter_view(self, nv: NewView, now: int) -> None:
        self.view = nv.view
        self.in_view_change = False
        self.vc_target = nv.view
        self.vc_attempts = 0
        self.slots = {k: s for k, s in self.slots.items() if k[0] >= nv.view}
        self.assigned = set()
        self.batch_timer_at = None
        top = 0
        for pp in nv.preprepares:
            top = max(top, pp.seq)
            self.assigned.update(r.id for r in pp.batch.requests)
            slot = self.slots.setdefault((pp.view, pp.seq), _Slot())
            if slot.preprepare is None:
                slot.preprepare = pp
                if pp.sender != self.me:
                    prep = PbftMessage(MsgKind.PREPARE, *self.key, pp.view, pp.seq, pp.req_id,
                                       self.me, pp_sig=pp.sig).signed(self.identity)
                    slot.prepares.setdefault(pp.req_id, {})[self.me] = prep
                    self._send(None, prep)
                for req in pp.batch.requests:
                    if req.id not in self.known:
                        self.known[req.id] = req
                        if req.id not in self.executed_ids:
                            self.pending[req.id] = now
        self.next_seq = max(top, self.executed_seq) + 1
        for (view, seq), slot in list(self.slots.items()):
            self._check(slot, view, seq, now)
        if self.pending:
            self._arm_progress(now)
            if self.is_master:
                self._arm_batch(now)
        held = [m for m in self._buffer
                if not isinstance(m, ConsensusRequest) and getattr(m, "key", None) == self.key]
        if held:
            self._buffer = [m for m in self._buffer if not any(m is h for h in held)]
            for m in held:
                if isinstance(m, PbftMessage):
                    self._on_pbft(m, now)
                elif isinstance(m, ViewChange):
                    self._on_view_change(m, now)
                elif isinstance(m, NewView):
                    self._on_new_view(m, now)
