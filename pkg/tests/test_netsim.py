from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dflsim.incentives import IncentiveKind
from dflsim.messages import Phase
from dflsim.netsim import (
    AdversarySpec,
    Behavior,
    Envelope,
    LatencyModel,
    SimulationError,
    Simulator,
    VirtualClock,
    derive_seed,
)
from dflsim.scenario import AdversaryRule, ScenarioConfig, run_scenario


def nid(i):
    return bytes([i]) * 32


class Echo:
    """Handler that logs deliveries and bounces each message once."""

    def __init__(self, sim, me, peer=None):
        self.sim, self.me, self.peer = sim, me, peer
        self.got = []

    def deliver(self, src, msg, now):
        self.got.append((now, src, msg))
        if self.peer is not None and isinstance(msg, int) and msg < 3:
            self.sim.send(self.me, self.peer, msg + 1)

    def on_timer(self, name, now):
        self.got.append((now, "timer", name))

    def current_round(self):
        return 1


# -- clock and latency ----------------------------------------------------------------


def test_clock_orders_by_time_then_insertion():
    c = VirtualClock()
    for at, item in ((5, "a"), (1, "b"), (5, "c"), (1, "d")):
        c.push(at, item)
    assert [c.pop()[1] for _ in range(4)] == ["b", "d", "a", "c"]
    with pytest.raises(SimulationError):
        c.push(0, "late")


def test_latency_without_jitter_is_fixed():
    sim = Simulator(1, LatencyModel(50, 0))
    sim.add_node(nid(2), Echo(sim, nid(2)))
    env = sim.send(nid(1), nid(2), "hi")
    assert env.deliver_time == env.send_time + 50


def test_latency_validation():
    with pytest.raises(ValueError):
        LatencyModel(drop_rate=1.0)
    with pytest.raises(ValueError):
        LatencyModel(base_ms=-1)


def test_envelope_rejects_time_travel():
    with pytest.raises(SimulationError):
        Envelope(nid(1), nid(2), b"", 10, 9)


def test_unknown_behavior_rejected():
    with pytest.raises(ValueError):
        Behavior.parse("sneaky")
    assert AdversarySpec(nid(1), "Silent").behavior is Behavior.SILENT


def test_inject_requires_known_node():
    with pytest.raises(SimulationError):
        Simulator(1).inject_adversary(AdversarySpec(nid(1), Behavior.SILENT))


def test_derived_seeds_are_independent_and_stable():
    assert derive_seed(1, "net") == derive_seed(1, "net")
    assert len({derive_seed(1, "net"), derive_seed(2, "net"), derive_seed(1, "data")}) == 3
    assert 0 <= derive_seed(7, "x") < 2**63


# -- running --------------------------------------------------------------------------


def test_empty_simulation_reports_deadlock():
    rep = Simulator(3).run_until(lambda: False)
    assert rep.deadlocked and rep.delivered == 0


def test_time_limit_stop():
    sim = Simulator(1)
    sim.add_node(nid(1), Echo(sim, nid(1)))
    sim.set_timer(nid(1), ("t",), 500)
    rep = sim.run_until(limit=100)
    assert rep.stop == "limit" and rep.now == 100


def ping_pong(seed, drop=0.0):
    sim = Simulator(seed, LatencyModel(10, 20, drop), trace=True)
    a, b = Echo(sim, nid(1), nid(2)), Echo(sim, nid(2), nid(1))
    sim.add_node(nid(1), a)
    sim.add_node(nid(2), b)
    for k in range(20):
        sim.send(nid(1), nid(2), k % 3)
    return sim, sim.run_until(), a, b


def test_same_seed_same_trace():
    _, r1, a1, _ = ping_pong(4)
    _, r2, a2, _ = ping_pong(4)
    assert r1 == r2 and a1.got == a2.got
    assert ping_pong(5)[1].trace_digest != r1.trace_digest


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from([0.0, 0.05, 0.5]))
def test_every_scheduled_envelope_delivered_once_and_drops_logged(seed, drop):
    sim, rep, a, b = ping_pong(seed, drop)
    assert rep.delivered == sim.scheduled == len(sim.trace)
    assert rep.dropped == len(sim.dropped_log)
    times = [t["deliver"] for t in sim.trace]
    assert times == sorted(times)
    assert all(t["deliver"] >= t["send"] for t in sim.trace)


def test_silent_node_sends_nothing():
    sim = Simulator(1)
    sim.add_node(nid(1), Echo(sim, nid(1)))
    sim.add_node(nid(2), Echo(sim, nid(2)))
    sim.inject_adversary(AdversarySpec(nid(1), Behavior.SILENT, 1, 1))
    assert sim.send(nid(1), nid(2), 0) is None
    assert sim.behaviors(nid(1), 2) == set()


def test_broadcast_skips_sender_and_draws_each_latency():
    sim = Simulator(2, LatencyModel(10, 1000))
    for i in range(1, 6):
        sim.add_node(nid(i), Echo(sim, nid(i)))
    sim.broadcast(nid(1), [nid(i) for i in range(1, 6)], "x")
    assert sim.scheduled == 4
    sim.run_until()
    got = [h.got for i, h in sim.handlers.items() if i != nid(1)]
    assert all(len(g) == 1 for g in got)
    assert len({g[0][0] for g in got}) > 1


# -- adversaries end to end --------------------------------------------------------------

FAST = dict(nodes=6, rounds=2, train=False, block_mode="immediate", bootstrap_elect=False, elect_times=50)


def kinds(result):
    return Counter(IncentiveKind(a.event.kind) for a in result.contract.incentive_log)


def test_silent_committee_member_is_penalised_but_rounds_finish():
    res = run_scenario(ScenarioConfig(**FAST, adversaries=(AdversaryRule("c2", Behavior.SILENT),)))
    assert res.ok and res.rounds_completed == 2
    silent = res.runner.genesis_committee[2]
    hits = [a for a in res.contract.incentive_log if a.event.subject == silent]
    assert any(IncentiveKind(a.event.kind) is IncentiveKind.COMMITTEE_UNANSWERED and a.deduction > 0 for a in hits)
    assert res.contract.conserved()


def test_replayed_tuple_is_excluded_and_flagged():
    res = run_scenario(ScenarioConfig(**FAST, adversaries=(AdversaryRule("n5", Behavior.REPLAYER),)))
    assert res.ok
    replayer = res.runner.nodes[5]
    assert replayer.replayed
    flags = [f for f in res.contract.replays if f.digest in set(replayer.replayed)]
    # each captured tuple was accepted once in its own round and flagged when resent
    assert {f.digest for f in flags} == set(replayer.replayed)
    assert all(f.reason == "replay" and f.it < res.contract.round for f in flags)
    assert res.contract.conserved()


def test_no_submit_after_pledge_is_linearly_penalised():
    res = run_scenario(ScenarioConfig(**FAST, adversaries=(AdversaryRule("n4", Behavior.NO_SUBMIT_AFTER_PLEDGE),)))
    lazy = res.runner.nodes[4].id
    hits = [a for a in res.contract.incentive_log
            if a.event.subject == lazy and IncentiveKind(a.event.kind) is IncentiveKind.NO_SUBMIT_AFTER_PLEDGE]
    assert len(hits) == 2 and len({a.deduction for a in hits}) == 1 and hits[0].deduction > 0


def test_low_quality_submitter_is_punished_and_excluded():
    cfg = ScenarioConfig(nodes=5, rounds=1, block_mode="immediate", bootstrap_elect=False, lr=0.1, epochs=5,
                         separation=3.0, malicious_rate=0.8,
                         adversaries=(AdversaryRule("n3", Behavior.LOW_QUALITY_SUBMITTER),))
    res = run_scenario(cfg)
    bad = res.runner.nodes[3].id
    scores = {node: s for _, node, s, _ in res.metrics.accuracy}
    mids = float(np.median(list(scores.values())))
    assert scores[bad.hex()[:12]] < mids * cfg.malicious_rate
    hits = [a for a in res.contract.incentive_log if a.event.subject == bad]
    assert any(IncentiveKind(a.event.kind) is IncentiveKind.LOW_QUALITY_MODEL and a.deduction > 0 for a in hits)
    work = res.contract.query_history(1, Phase.WORK)
    assert work is not None
    body = decode_result_body(res)
    assert bad not in body.admitted and len(body.admitted) == 4


def decode_result_body(res):
    from dflsim.codec import decode
    change = [e.value for e in res.contract.events if e.kind == "state-change"][-1]
    return decode(change.result).body
