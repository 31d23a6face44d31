"""A simulated DFL node: participant, and committee replica when elected."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Any, Optional

import numpy as np

from .contract import EventRecord, Genesis, Registered, StateChange
from .fl import Dataset, DpConfig, init_params, privatize_update, train_local
from .identity import Identity, NodeId, digest
from .messages import (
    Batch,
    ClientAck,
    ConsensusRequest,
    MsgKind,
    NewView,
    PbftMessage,
    Phase,
    PhaseResult,
    PledgePayload,
    ReplyMsg,
    ViewChange,
    result_tuples,
)
from .netsim import Behavior, derive_seed
from .pbft import EndCollector, PbftConfig, Replica, SetTimer, make_end_request, make_reply
from .workflow import (
    DetectorAction,
    IneligibleError,
    NodeView,
    PhaseContext,
    ResultContext,
    TransitionDetector,
    build_phase_request,
    decode_result,
    compute_phase_result,
    evaluate_commits,
    expected_total,
    primary_verification,
    submission_deadline_check,
)

if TYPE_CHECKING:  # pragma: no cover
    from .scenario import ScenarioRunner

CONSENSUS_TYPES = (ConsensusRequest, PbftMessage, ViewChange, NewView)


@dataclass(frozen=True)
class CostModel:
    """Virtual processing costs; all values are milliseconds."""

    per_message_ms: int = 1
    think_ms: int = 2000
    train_ms_per_sample_epoch: float = 4.0
    eval_ms_per_sample: float = 2.0
    speed_spread: float = 0.2


@dataclass(frozen=True)
class NodeConfig:
    dims: tuple[int, ...]
    mt: dict
    pbft: PbftConfig = PbftConfig()
    costs: CostModel = CostModel()
    pledge_money: int = 10_000
    candidate_money: int = 20_000
    epochs: int = 2
    lr: float = 0.1
    batch_size: int = 32
    dp: Optional[DpConfig] = None
    malicious_rate: float = 0.5
    weight_by_samples: bool = False
    train: bool = True
    retransmit_windows: int = 3


@dataclass
class _ClientRequest:
    req: ConsensusRequest
    key: tuple[int, Phase]
    sent: int
    targets: tuple[NodeId, ...]
    f: int
    acks: set = field(default_factory=set)
    done: bool = False


class _CommitteeApp:
    """ReplicaApp adapter binding a replica to its node."""

    def __init__(self, node: "Node"):
        self.node = node

    def validate(self, request: ConsensusRequest) -> bool:
        return primary_verification(request, self.node.view, self.node.runner.keys)

    def arrived(self, request: ConsensusRequest, now: int) -> None:
        self.node._arrival(request, now)

    def accept(self, request: ConsensusRequest, now: int, late: bool) -> None:
        if not late:
            self.node.accepted.append(request)

    def phase_result(self, key, master: NodeId, now: int) -> bytes:
        return self.node._result(master)

    def frozen(self, key, result: bytes, now: int) -> None:
        self.node._frozen(key, result, now)


class Node:
    def __init__(self, identity: Identity, runner: "ScenarioRunner", data: Optional[Dataset],
                 cfg: NodeConfig, seed: int):
        self.identity = identity
        self.id = identity.node_id
        self.runner = runner
        self.data = data
        self.cfg = cfg
        self.seed = seed
        rng = np.random.default_rng(derive_seed(seed, "node", self.id))
        self._rng = rng
        spread = cfg.costs.speed_spread
        self.speed = float(rng.uniform(1.0 - spread, 1.0 + spread))
        self.view = NodeView()
        self.replica: Optional[Replica] = None
        self.detector: Optional[TransitionDetector] = None
        self.accepted: list[ConsensusRequest] = []
        self.collector: Optional[EndCollector] = None
        self.frozen_result: Optional[bytes] = None
        self.frozen_log: dict[tuple, bytes] = {}
        self.retired_stats: list = []
        self.submitted: set[tuple[int, Phase]] = set()
        self.clients: dict[bytes, _ClientRequest] = {}
        self.busy_until = 0
        self._send_at = 0
        self._held: list[Any] = []
        self.captured: list = []
        self.replayed: list[bytes] = []
        self.local_scores: dict[int, int] = {}
        self.abandoned: list[tuple[int, Phase]] = []
        self.phase_started = 0

    # -- helpers -----------------------------------------------------------------------

    @property
    def sim(self):
        return self.runner.sim

    def current_round(self) -> int:
        return self.view.round

    def behaving(self, b: Behavior) -> bool:
        return b in self.sim.behaviors(self.id, self.view.round)

    @property
    def in_committee(self) -> bool:
        return self.view.committee is not None and self.id in self.view.committee.members

    def _charge(self, now: int) -> None:
        start = max(now, self.busy_until)
        self.busy_until = start + self.cfg.costs.per_message_ms
        self._send_at = self.busy_until

    def _members(self) -> tuple[NodeId, ...]:
        return self.view.committee.members if self.view.committee else ()

    def _broadcast(self, msg: Any) -> None:
        self.sim.broadcast(self.id, self._members(), msg, at=self._send_at)

    def _run(self, actions) -> None:
        for a in actions:
            if isinstance(a, SetTimer):
                self.sim.set_timer(self.id, ("pbft", a.name), a.at)
                continue
            msg = self._tamper(a.msg, a.dst)
            if msg is None:
                continue
            if a.dst is None:
                if isinstance(msg, list):  # equivocation: per-destination variants
                    for dst, m in msg:
                        self.sim.send(self.id, dst, m, at=self._send_at)
                else:
                    self._broadcast(msg)
            elif a.dst == self.id:
                self._local(msg, self._send_at)
            else:
                self.sim.send(self.id, a.dst, msg, at=self._send_at)

    def _tamper(self, msg: Any, dst: Optional[NodeId]):
        if isinstance(msg, ReplyMsg) and self.behaving(Behavior.WRONG_HASH_REPLIER):
            junk = digest(b"junk" + msg.hash + self.id)
            return make_reply(digest(junk), msg.type, msg.round, junk, self.identity)
        if (isinstance(msg, PbftMessage) and msg.kind is MsgKind.PREPREPARE and dst is None
                and self.behaving(Behavior.EQUIVOCATING_MASTER)):
            others = [m for m in self._members() if m != self.id]
            b = msg.batch
            alt_reqs = tuple(reversed(b.requests)) if len(b.requests) > 1 else ()
            alt = Batch(b.proposer, b.view, b.seq, alt_reqs)
            alt_pp = replace(msg, req_id=alt.digest, batch=alt).signed(self.identity)
            half = len(others) // 2
            return [(d, msg) for d in others[:half]] + [(d, alt_pp) for d in others[half:]]
        return msg

    # -- simulator entry points ---------------------------------------------------

    def deliver(self, src: NodeId, msg: Any, now: int) -> None:
        self._charge(now)
        self._local(msg, now)

    def _local(self, msg: Any, now: int) -> None:
        if isinstance(msg, ClientAck):
            self._on_ack(msg, now)
        elif isinstance(msg, ReplyMsg):
            self._on_reply(msg, now)
        elif isinstance(msg, CONSENSUS_TYPES):
            self._on_consensus(msg, now)

    def on_timer(self, name: tuple, now: int) -> None:
        self._send_at = max(now, self.busy_until)
        kind = name[0]
        if kind == "pbft":
            if self.replica is not None:
                self._run(self.replica.on_timer(name[1], now))
        elif kind == "t1" and self.detector is not None and name[1] == self.view.key:
            self._detector("timer1", now)
        elif kind == "t2" and self.detector is not None and name[1] == self.view.key:
            self._detector("timer2", now, name[2])
        elif kind == "act" and name[1] == self.view.key:
            self._act(name[2], now)
        elif kind == "retx":
            self._retransmit(name[1], now)

    # -- contract events ------------------------------------------------------------

    def on_contract_event(self, rec: EventRecord, now: int) -> None:
        self._send_at = max(now, self.busy_until)
        value = rec.value
        if isinstance(value, Genesis):
            if self.view.committee is None:
                self.view.apply_genesis(value)
                self._start_phase(now)
        elif isinstance(value, Registered):
            self.view.on_register(value.node, value.deposit)
        elif isinstance(value, StateChange):
            if value.phase is Phase.PLEDGE:
                self.captured = list(decode_result(value.result).body.tuples)
            if self.view.on_state_change_event(value):
                self._start_phase(now)

    def _start_phase(self, now: int) -> None:
        v = self.view
        self.phase_started = now
        self.accepted = []
        self.collector = None
        self.frozen_result = None
        self.detector = None
        key = (v.committee.epoch, v.round, v.phase)
        if self.in_committee:
            if self.replica is None or self.replica.committee.epoch != v.committee.epoch:
                held = self.replica._buffer if self.replica is not None else []
                self._retire_replica()
                self.replica = Replica(self.identity, self.runner.keys, v.committee, key,
                                       _CommitteeApp(self), self.cfg.pbft)
                self.replica._buffer = list(held)
                self._start_detector(now)
                self._replay_buffer(now)
            else:
                self._start_detector(now)
                self._run(self.replica.advance(key, now))
            self._flush_held(now)
        else:
            self._retire_replica()
            self.replica = None
            self._held = []
        self._plan_participation(now)

    def _retire_replica(self) -> None:
        if self.replica is not None:
            self.retired_stats.append(self.replica.stats)

    @property
    def view_changes(self) -> int:
        live = self.replica.stats.view_changes if self.replica is not None else 0
        return live + sum(s.view_changes for s in self.retired_stats)

    @property
    def evidence(self) -> list:
        live = self.replica.stats.evidence if self.replica is not None else []
        return [e for s in self.retired_stats for e in s.evidence] + list(live)

    def _start_detector(self, now: int) -> None:
        v = self.view
        tot = expected_total(v.phase, len(v.registered), len(v.stake_list), len(v.committee.members))
        mt = self.cfg.mt[v.phase]
        self.detector = TransitionDetector(PhaseContext(v.round, v.phase, tot, now), mt)
        self.sim.set_timer(self.id, ("t1", v.key), now + mt)

    def _replay_buffer(self, now: int) -> None:
        rep = self.replica
        held, rep._buffer = rep._buffer, []
        for m in held:
            self._run(rep.handle(m, now))

    def _flush_held(self, now: int) -> None:
        held, self._held = self._held, []
        for msg in held:
            self._on_consensus(msg, now)

    # -- consensus ----------------------------------------------------------------------

    def _on_consensus(self, msg: Any, now: int) -> None:
        epoch = getattr(msg, "epoch", None)
        rep = self.replica
        if rep is None or (epoch is not None and epoch > rep.committee.epoch):
            # possibly addressed to a committee this node has not heard about yet
            if len(self._held) < self.cfg.pbft.buffer_limit:
                self._held.append(msg)
            return
        if epoch is not None and epoch < rep.committee.epoch:
            return
        self._run(rep.handle(msg, now))

    def _arrival(self, req: ConsensusRequest, now: int) -> None:
        if self.detector is None or req.is_end or req.phase != self.view.phase:
            return
        self._detector("arrival", now)

    def _detector(self, event: str, now: int, gen: Optional[int] = None) -> None:
        action, at, g = self.detector.feed(event, now, gen)
        if at is not None:
            self.sim.set_timer(self.id, ("t2", self.view.key, g), at)
        if action is DetectorAction.END_STAGE:
            self.runner.metrics.stage_detected(self, now)
            if self.frozen_result is None:
                self._send_end(self._result(self.replica.master), now)

    def _result_context(self) -> ResultContext:
        return ResultContext(self.view, self.runner.store, self.runner.test_set,
                             self.cfg.malicious_rate, self.cfg.weight_by_samples)

    def _result(self, master: NodeId) -> bytes:
        return compute_phase_result(self.view.phase, self.accepted, self._result_context(), master)

    def _send_end(self, result: bytes, now: int) -> None:
        if self.behaving(Behavior.WRONG_HASH_REPLIER):
            result = digest(b"junk-end" + self.id + result)
        end = make_end_request(self.view.phase, self.view.round, result, self.identity)
        self.collector = EndCollector(end, self._members(), self.runner.keys, self.view.committee.f)
        req = ConsensusRequest.make(end, self.identity)
        self._broadcast(req)
        self._run(self.replica.handle(req, now))

    def _frozen(self, key, result: bytes, now: int) -> None:
        self.frozen_result = result
        self.frozen_log[key] = result
        if self.collector is not None and self.collector.end.hash != digest(result):
            if not self.behaving(Behavior.WRONG_HASH_REPLIER):
                # my End carried a different local view; re-send one for the agreed result
                self._send_end(result, now)

    def _on_reply(self, reply: ReplyMsg, now: int) -> None:
        if self.collector is None:
            return
        proof = self.collector.add(reply)
        if proof is None:
            return
        slot = (proof.round, proof.phase)
        if slot != self.view.key or slot in self.submitted:
            return
        self.submitted.add(slot)
        result: PhaseResult = decode_result(proof.result)
        self.runner.submit_tx(self, proof, result_tuples(result), self._send_at)

    # -- participation -------------------------------------------------------------------

    def _think(self) -> int:
        return int(self._rng.integers(0, self.cfg.costs.think_ms + 1))

    def _plan_participation(self, now: int) -> None:
        v = self.view
        key = v.key
        if self.behaving(Behavior.SILENT):
            return
        if v.phase in (Phase.ELECT, Phase.PLEDGE):
            self.sim.set_timer(self.id, ("act", key, "request"), now + self._think())
            if v.phase is Phase.PLEDGE and self.behaving(Behavior.REPLAYER) and self.captured:
                self.sim.set_timer(self.id, ("act", key, "replay"), now + self._think())
        elif v.phase is Phase.COMMIT:
            if self.id in v.stake_list and not self.behaving(Behavior.NO_SUBMIT_AFTER_PLEDGE):
                self.sim.set_timer(self.id, ("act", key, "request"), now + self._train_time())
        elif v.phase is Phase.WORK and self.in_committee:
            self.sim.set_timer(self.id, ("act", key, "request"), now + self._eval_time())

    def _train_time(self) -> int:
        if not self.cfg.train or self.data is None:
            return self._think()
        c = self.cfg.costs
        return int(len(self.data) * self.cfg.epochs * c.train_ms_per_sample_epoch * self.speed) + self._think()

    def _eval_time(self) -> int:
        test = self.runner.test_set
        if not self.cfg.train or test is None:
            return self._think()
        c = self.cfg.costs
        return int(len(self.view.commits) * len(test) * c.eval_ms_per_sample * self.speed) + self._think()

    def _act(self, what: str, now: int) -> None:
        self._send_at = max(now, self.busy_until)
        if what == "replay":
            for t in self.captured:
                # the original holder's signature still verifies; only freshness is stale
                req = ConsensusRequest.make(PledgePayload(t), self.identity)
                self.replayed.append(t.digest)
                self._client_send(req, now)
            return
        try:
            req = self._build_request(now)
        except IneligibleError:
            return
        if req is not None:
            self._client_send(req, now)

    def _build_request(self, now: int) -> Optional[ConsensusRequest]:
        v = self.view
        if v.phase is Phase.ELECT:
            return build_phase_request(Phase.ELECT, self.identity, v, money=self.cfg.candidate_money)
        if v.phase is Phase.PLEDGE:
            balance = self.runner.contract.fund_pools.get(self.id, 0)
            return build_phase_request(Phase.PLEDGE, self.identity, v, money=self.cfg.pledge_money,
                                       balance=balance)
        if v.phase is Phase.COMMIT:
            if submission_deadline_check(self.phase_started, self.cfg.mt[Phase.COMMIT], now) == "abandon":
                self.abandoned.append(v.key)
                return None
            model_digest, samples = self._train_and_store()
            return build_phase_request(Phase.COMMIT, self.identity, v, model_digest=model_digest,
                                       samples=samples)
        if submission_deadline_check(self.phase_started, self.cfg.mt[Phase.WORK], now) == "abandon":
            self.abandoned.append(v.key)
            return None
        out = evaluate_commits(self._result_context())
        return build_phase_request(Phase.WORK, self.identity, v, scores=out.scores,
                                   global_digest=out.global_digest, global_score=out.global_score)

    def _train_and_store(self) -> tuple[bytes, int]:
        store = self.runner.store
        base = store.get_model(self.view.global_digest)
        if base is None:
            base = init_params(self.cfg.dims, derive_seed(self.seed, "init"))
        rseed = derive_seed(self.seed, "train", self.id, self.view.round)
        if self.behaving(Behavior.LOW_QUALITY_SUBMITTER):
            model = init_params(self.cfg.dims, rseed, scale=5.0)
        elif not self.cfg.train or self.data is None:
            model = base
        else:
            model = train_local(base, self.data, self.cfg.epochs, self.cfg.lr, rseed, self.cfg.batch_size)
            if self.cfg.dp is not None:
                model = privatize_update(model, base, self.cfg.dp, derive_seed(self.seed, "dp", self.id,
                                                                               self.view.round))
        return store.put_model(model), len(self.data) if self.data is not None else 0

    # -- client side --------------------------------------------------------------------

    def _client_send(self, req: ConsensusRequest, now: int) -> None:
        members = self._members()
        f = self.view.committee.f
        st = _ClientRequest(req, self.view.key, self._send_at, members, f)
        self.clients[req.id] = st
        self.runner.metrics.request_sent(self, req, self._send_at)
        self.sim.broadcast(self.id, members, req, at=self._send_at)
        if self.id in members and self.replica is not None:
            self._run(self.replica.handle(req, now))
        self._arm_retransmit(req.id)

    def _arm_retransmit(self, rid: bytes) -> None:
        w = max(self.cfg.pbft.aggregation_window_ms, 1000)
        self.sim.set_timer(self.id, ("retx", rid), self._send_at + self.cfg.retransmit_windows * w)

    def _retransmit(self, rid: bytes, now: int) -> None:
        st = self.clients.get(rid)
        if st is None or st.done or st.key != self.view.key:
            return
        self.sim.broadcast(self.id, st.targets, st.req, at=self._send_at)
        self._arm_retransmit(rid)

    def _on_ack(self, ack: ClientAck, now: int) -> None:
        st = self.clients.get(ack.req_id)
        if st is None or st.done or ack.replica not in st.targets or ack.replica in st.acks:
            return
        if not self.runner.keys.verify(ack.replica, ack.body(), ack.sig):
            return
        st.acks.add(ack.replica)
        if len(st.acks) >= st.f + 1:
            st.done = True
            self.runner.metrics.request_confirmed(self, st.req, st.sent, now)
