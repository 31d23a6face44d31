"""Minimal in-memory network for driving PBFT replicas without the simulator."""

from __future__ import annotations

import heapq
import random
from collections import Counter

from dflsim.codec import encode
from dflsim.committee import CommitteeView
from dflsim.identity import Identity, KeyDirectory
from dflsim.messages import ConsensusRequest, PbftMessage, Phase, PledgePayload, ReplyMsg, RequestTuple
from dflsim.pbft import EndCollector, PbftConfig, Replica, Send, SetTimer, make_end_request


class RecordingApp:
    def __init__(self):
        self.accepted = []
        self.results = {}

    def validate(self, request):
        return True

    def arrived(self, request, now):
        pass

    def accept(self, request, now, late):
        if not late:
            self.accepted.append(request.id)

    def phase_result(self, key, master, now):
        return encode(("result", key, tuple(sorted(self.accepted))))

    def frozen(self, key, result, now):
        self.results[key] = result


def make_committee(n, seed=0):
    ids = [Identity.from_seed(1000 * seed + i) for i in range(n)]
    keys = KeyDirectory()
    for ident in ids:
        keys.add(ident.node_id, ident.keys.public)
    ids.sort(key=lambda i: i.node_id)
    view = CommitteeView(tuple(i.node_id for i in ids), 2, 0)
    return ids, keys, view


def pledge_request(ident, round_=1):
    return ConsensusRequest.make(PledgePayload(RequestTuple.make(round_, Phase.PLEDGE, 10, ident)), ident)


class Net:
    """Random-order delivery; timers fire when no message is in flight."""

    KEY = (0, 1, Phase.PLEDGE)

    def __init__(self, n, seed=0, silent=(), config=PbftConfig(aggregation_window_ms=100, view_change_timeout_ms=1000)):
        self.ids, self.keys, self.view = make_committee(n, seed)
        self.rng = random.Random(seed)
        self.silent = set(silent)
        self.apps = {i.node_id: RecordingApp() for i in self.ids}
        self.replicas = {i.node_id: Replica(i, self.keys, self.view, self.KEY, self.apps[i.node_id], config)
                         for i in self.ids}
        self.inflight = []
        self.timers = []
        self.now = 0
        self.sent = Counter()
        self.replies = []  # (dst, ReplyMsg)
        self.collectors = {}
        self.max_time = None

    @property
    def members(self):
        return self.view.members

    def _emit(self, src, actions):
        for a in actions:
            if isinstance(a, SetTimer):
                heapq.heappush(self.timers, (a.at, len(self.timers), src, a.name))
                continue
            dsts = [m for m in self.members if m != src] if a.dst is None else [a.dst]
            for d in dsts:
                self.sent[type(a.msg).__name__] += 1
                self.inflight.append((src, d, a.msg))

    def inject(self, src, dst, msg):
        self.inflight.append((src, dst, msg))

    def submit(self, req):
        for m in self.members:
            self.inject(req.sender, m, req)

    def send_end(self, ident, result):
        end = make_end_request(Phase.PLEDGE, 1, result, ident)
        self.collectors[ident.node_id] = EndCollector(end, self.members, self.keys, self.view.f)
        self.submit(ConsensusRequest.make(end, ident))

    def step(self):
        if self.inflight:
            src, dst, msg = self.inflight.pop(self.rng.randrange(len(self.inflight)))
            self.now += 1
            if isinstance(msg, ReplyMsg):
                self.replies.append((dst, msg))
                col = self.collectors.get(dst)
                if col is not None:
                    col.add(msg)
                return True
            if dst in self.silent or dst not in self.replicas:
                return True
            self._emit(dst, self.replicas[dst].handle(msg, self.now))
            return True
        if self.timers and (self.max_time is None or self.timers[0][0] <= self.max_time):
            at, _, node, name = heapq.heappop(self.timers)
            self.now = max(self.now, at)
            if node not in self.silent:
                self._emit(node, self.replicas[node].on_timer(name, self.now))
            return True
        return False

    def run(self, limit=200_000, max_time=None):
        self.max_time = max_time
        for _ in range(limit):
            if not self.step():
                return
        raise RuntimeError("network did not quiesce")
