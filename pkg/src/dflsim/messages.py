"""Protocol messages exchanged between nodes, committee replicas and the contract.

All types are frozen dataclasses registered with the canonical codec, so every
message has a unique byte form and can be hashed, signed and round-tripped.
Signatures always cover an explicit ``body()`` tuple that excludes the
signature itself.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from functools import cached_property
from typing import Any, Optional, Union

from .codec import decode, encode, wire
from .identity import Digest, Identity, KeyDirectory, NodeId, digest


@wire(1)
class Phase(enum.IntEnum):
    ELECT = 0
    PLEDGE = 1
    COMMIT = 2
    WORK = 3

    def __str__(self) -> str:
        return self.name.capitalize()

    @classmethod
    def parse(cls, text: str) -> "Phase":
        return cls[text.strip().upper()]


@wire(2)
class MsgKind(enum.IntEnum):
    PREPREPARE = 0
    PREPARE = 1
    COMMIT = 2


PhaseKey = tuple[int, int, Phase]
"""(epoch, round, phase): the scope of one PBFT log."""


@wire(10)
@dataclass(frozen=True)
class RequestTuple:
    """The signed authorization a node attaches to every phase request."""

    it: int
    status: Phase
    money: int
    address: NodeId
    sig: bytes = b""

    def body(self) -> bytes:
        return encode(("tuple", self.it, self.status, self.money, self.address))

    @classmethod
    def make(cls, it: int, status: Phase, money: int, identity: Identity) -> "RequestTuple":
        unsigned = cls(it, status, money, identity.node_id)
        return replace(unsigned, sig=identity.sign(unsigned.body()))

    def verify(self, keys: KeyDirectory) -> bool:
        return keys.verify(self.address, self.body(), self.sig)

    @cached_property
    def digest(self) -> Digest:
        return digest(encode(self))


@wire(11)
@dataclass(frozen=True)
class ElectPayload:
    auth: RequestTuple
    acc_digest: Digest

    @property
    def pledge_eth(self) -> int:
        return self.auth.money


@wire(12)
@dataclass(frozen=True)
class PledgePayload:
    auth: RequestTuple


@wire(13)
@dataclass(frozen=True)
class CommitPayload:
    auth: RequestTuple
    model_digest: Digest
    samples: int


@wire(14)
@dataclass(frozen=True)
class WorkPayload:
    auth: RequestTuple
    scores: tuple[tuple[NodeId, int], ...]
    global_digest: Digest
    global_score: int


@wire(15)
@dataclass(frozen=True)
class EndRequest:
    """A committee node's claim that a stage has ended with result ``hash``."""

    address: NodeId
    type: Phase
    round: int
    hash: Digest
    sig: bytes = b""

    def body(self) -> bytes:
        return encode(("end", self.address, self.type, self.round, self.hash))

    def verify(self, keys: KeyDirectory) -> bool:
        return keys.verify(self.address, self.body(), self.sig)


Payload = Union[ElectPayload, PledgePayload, CommitPayload, WorkPayload, EndRequest]


@wire(16)
@dataclass(frozen=True)
class ConsensusRequest:
    id: Digest
    payload: bytes
    sender: NodeId
    sig: bytes

    @classmethod
    def make(cls, body: Payload, identity: Identity) -> "ConsensusRequest":
        raw = encode(body)
        rid = digest(raw)
        return cls(rid, raw, identity.node_id, identity.sign(b"request" + rid))

    def verify(self, keys: KeyDirectory) -> bool:
        return digest(self.payload) == self.id and keys.verify(
            self.sender, b"request" + self.id, self.sig
        )

    @cached_property
    def body(self) -> Payload:
        return decode(self.payload)

    @property
    def is_end(self) -> bool:
        return isinstance(self.body, EndRequest)

    @property
    def round(self) -> int:
        b = self.body
        return b.round if isinstance(b, EndRequest) else b.auth.it

    @property
    def phase(self) -> Phase:
        b = self.body
        return b.type if isinstance(b, EndRequest) else b.auth.status


@wire(17)
@dataclass(frozen=True)
class Batch:
    """Requests ordered by one PrePrepare; the proposer is kept across view changes."""

    proposer: NodeId
    view: int
    seq: int
    requests: tuple[ConsensusRequest, ...]

    @cached_property
    def digest(self) -> Digest:
        return digest(encode(self))


@wire(18)
@dataclass(frozen=True)
class PbftMessage:
    kind: MsgKind
    epoch: int
    round: int
    phase: Phase
    view: int
    seq: int
    req_id: Digest
    sender: NodeId
    sig: bytes = b""
    batch: Optional[Batch] = None
    pp_sig: bytes = b""

    def body(self) -> bytes:
        return encode(
            (self.kind, self.epoch, self.round, self.phase, self.view, self.seq, self.req_id, self.sender)
        )

    @property
    def key(self) -> PhaseKey:
        return (self.epoch, self.round, self.phase)

    def signed(self, identity: Identity) -> "PbftMessage":
        return replace(self, sig=identity.sign(self.body()))

    def verify(self, keys: KeyDirectory) -> bool:
        return keys.verify(self.sender, self.body(), self.sig)


def preprepare_header(epoch: int, round_: int, phase: Phase, view: int, seq: int,
                      req_id: Digest, master: NodeId) -> bytes:
    """Bytes the master signs in a PrePrepare; Prepares echo that signature."""
    return encode((MsgKind.PREPREPARE, epoch, round_, phase, view, seq, req_id, master))


@wire(19)
@dataclass(frozen=True)
class PreparedCert:
    preprepare: PbftMessage
    prepares: tuple[PbftMessage, ...]


@wire(20)
@dataclass(frozen=True)
class ViewChange:
    epoch: int
    round: int
    phase: Phase
    new_view: int
    sender: NodeId
    prepared: tuple[PreparedCert, ...]
    sig: bytes = b""

    def body(self) -> bytes:
        return encode(("view-change", self.epoch, self.round, self.phase, self.new_view,
                       self.sender, self.prepared))

    @property
    def key(self) -> PhaseKey:
        return (self.epoch, self.round, self.phase)


@wire(21)
@dataclass(frozen=True)
class NewView:
    epoch: int
    round: int
    phase: Phase
    view: int
    sender: NodeId
    view_changes: tuple[ViewChange, ...]
    preprepares: tuple[PbftMessage, ...]
    sig: bytes = b""

    def body(self) -> bytes:
        return encode(("new-view", self.epoch, self.round, self.phase, self.view, self.sender,
                       self.view_changes, self.preprepares))

    @property
    def key(self) -> PhaseKey:
        return (self.epoch, self.round, self.phase)


@wire(22)
@dataclass(frozen=True)
class ClientAck:
    """A replica's confirmation to a request sender that the request committed."""

    req_id: Digest
    round: int
    phase: Phase
    replica: NodeId
    sig: bytes = b""

    def body(self) -> bytes:
        return encode(("ack", self.req_id, self.round, self.phase, self.replica))


@wire(23)
@dataclass(frozen=True)
class ReplyMsg:
    address: NodeId
    type: Phase
    round: int
    hash: Digest
    sig: bytes
    result: bytes

    def body(self) -> bytes:
        return encode(("reply", self.address, self.type, self.round, self.hash))

    def verify(self, keys: KeyDirectory) -> bool:
        return digest(self.result) == self.hash and keys.verify(self.address, self.body(), self.sig)


@wire(24)
@dataclass(frozen=True)
class TransitionProof:
    end: EndRequest
    replies: tuple[ReplyMsg, ...]
    round: int
    phase: Phase

    @property
    def hash(self) -> Digest:
        return self.end.hash

    @property
    def result(self) -> bytes:
        return self.replies[0].result if self.replies else b""


# -- phase results ---------------------------------------------------------------


@wire(30)
@dataclass(frozen=True)
class ElectBody:
    committee: tuple[NodeId, ...]
    tuples: tuple[RequestTuple, ...]
    succeeded: bool


@wire(31)
@dataclass(frozen=True)
class PledgeBody:
    tuples: tuple[RequestTuple, ...]


@wire(32)
@dataclass(frozen=True)
class CommitEntry:
    owner: NodeId
    model_digest: Digest
    samples: int
    auth: RequestTuple


@wire(33)
@dataclass(frozen=True)
class CommitBody:
    entries: tuple[CommitEntry, ...]

    @property
    def tuples(self) -> tuple[RequestTuple, ...]:
        return tuple(e.auth for e in self.entries)


@wire(34)
@dataclass(frozen=True)
class WorkBody:
    global_digest: Digest
    global_score: int
    scores: tuple[tuple[NodeId, int], ...]
    admitted: tuple[NodeId, ...]
    outcomes: tuple[Any, ...]
    tuples: tuple[RequestTuple, ...]


@wire(35)
@dataclass(frozen=True)
class PhaseResult:
    round: int
    phase: Phase
    master: NodeId
    request_count: int
    body: Union[ElectBody, PledgeBody, CommitBody, WorkBody]

    def to_bytes(self) -> bytes:
        return encode(self)


def result_tuples(result: PhaseResult) -> tuple[RequestTuple, ...]:
    return tuple(result.body.tuples)
