from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dflsim.committee import CommitteeView, ElectionError
from dflsim.identity import digest
from dflsim.messages import Batch, MsgKind, PbftMessage, Phase
from dflsim.pbft import EndCollector, fault_threshold, make_end_request, make_reply, verify_proof

from pbft_harness import Net, make_committee, pledge_request


def local_result(net, node):
    app = net.apps[node]
    return app.phase_result(net.KEY, None, 0)


def finish_stage(net, senders=None):
    """Every listed honest member sends an End for its local result."""
    for ident in net.ids:
        if ident.node_id in net.silent or (senders is not None and ident.node_id not in senders):
            continue
        net.send_end(ident, local_result(net, ident.node_id))
    net.run()


def test_fault_threshold():
    assert [fault_threshold(n) for n in (4, 7, 10)] == [1, 2, 3]
    with pytest.raises(ElectionError):
        fault_threshold(6)


def test_single_request_commits_everywhere_with_pbft_message_counts():
    net = Net(4)
    req = pledge_request(net.ids[0])
    net.submit(req)
    net.run()
    for app in net.apps.values():
        assert app.accepted == [req.id]
    # one PrePrepare to 3 backups, 3 backups x 3 Prepares, 4 replicas x 3 Commits
    assert net.sent["PbftMessage"] == 3 + 9 + 12
    assert net.sent["ClientAck"] == 4  # one ack per replica to the client (dst outside committee counts once)


def test_one_silent_backup_does_not_block():
    net = Net(4, silent={None})
    silent = net.members[3]
    net.silent = {silent}
    req = pledge_request(net.ids[1])
    net.submit(req)
    net.run()
    for node, app in net.apps.items():
        assert app.accepted == ([] if node == silent else [req.id])


def test_end_requests_produce_verified_proofs():
    net = Net(4, seed=2)
    for ident in net.ids[:3]:
        net.submit(pledge_request(ident))
    net.run()
    finish_stage(net)
    results = {r for r in (net.apps[n].results.get(net.KEY) for n in net.members)}
    assert len(results) == 1 and None not in results
    for node, col in net.collectors.items():
        assert col.proof is not None
        assert verify_proof(col.proof, net.members, net.keys)
        assert col.proof.result in results


def test_mismatched_end_hash_gets_no_reply():
    net = Net(4, seed=3)
    net.submit(pledge_request(net.ids[0]))
    net.run()
    liar = net.ids[2]
    honest = [i.node_id for i in net.ids if i is not liar]
    finish_stage(net, senders=honest)
    net.send_end(liar, b"not the result")
    net.run()
    assert net.collectors[liar.node_id].proof is None
    assert not [r for dst, r in net.replies if dst == liar.node_id]
    assert all(net.replicas[n].stats.hash_mismatch >= 1 for n in honest)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 6))
def test_delivery_order_does_not_change_result(seed, k):
    outcomes = set()
    for order_seed in (seed, seed + 1):
        net = Net(4, seed=1)
        net.rng.seed(order_seed)
        for i in range(k):
            net.submit(pledge_request(net.ids[i % 4], round_=1))
        net.run()
        committed = {frozenset(a.accepted) for a in net.apps.values()}
        assert len(committed) == 1
        finish_stage(net)
        outcomes |= {net.apps[n].results[net.KEY] for n in net.members}
    assert len(outcomes) == 1


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from([4, 7]), st.data())
def test_safety_with_silent_members(seed, n, data):
    net = Net(n, seed=seed % 50)
    net.rng.seed(seed)
    f = (n - 1) // 3
    silent = data.draw(st.sets(st.sampled_from(net.members), max_size=f))
    net.silent = set(silent)
    for ident in net.ids:
        if ident.node_id not in silent:
            net.submit(pledge_request(ident))
    net.run()
    finish_stage(net)
    frozen = {net.apps[m].results.get(net.KEY) for m in net.members if m not in silent}
    assert len(frozen) == 1 and None not in frozen
    for node, col in net.collectors.items():
        assert col.proof is not None and verify_proof(col.proof, net.members, net.keys)


def test_equivocating_master_is_detected_and_replaced():
    net = Net(4, seed=4)
    master_id = next(i for i in net.ids if i.node_id == net.members[0])
    a, b = pledge_request(net.ids[1]), pledge_request(net.ids[2])
    pps = []
    for reqs in ((a,), (b,)):
        batch = Batch(master_id.node_id, 0, 1, reqs)
        pp = PbftMessage(MsgKind.PREPREPARE, *net.KEY, 0, 1, batch.digest, master_id.node_id, batch=batch)
        pps.append(replace(pp, sig=master_id.sign(pp.body())))
    net.silent = {master_id.node_id}
    backup = net.members[1]
    net.inject(master_id.node_id, backup, pps[0])
    net.inject(master_id.node_id, backup, pps[1])
    for m in net.members[2:]:
        net.inject(master_id.node_id, m, pps[1])
    net.run(max_time=60_000)
    rep = net.replicas[backup]
    assert any(e[0] == "equivocation" for e in rep.stats.evidence)
    assert rep.stats.view_changes >= 1
    # whoever committed anything committed the same thing
    honest = [m for m in net.members if m != master_id.node_id]
    committed = {frozenset(net.apps[m].accepted) for m in honest if net.apps[m].accepted}
    assert len(committed) <= 1


def test_replica_outside_new_committee_goes_quiet():
    net = Net(4, seed=9)
    others, _, _ = make_committee(4, seed=10)
    first = net.replicas[net.members[0]]
    outsider_view = CommitteeView((*net.members[1:], others[0].node_id), 2, 1)
    switched = first.apply_committee_switch(outsider_view, (1, 1, Phase.PLEDGE), 0)
    assert not switched.active
    assert switched.handle(pledge_request(net.ids[1]), 0) == []


def test_stale_committee_event_is_ignored():
    net = Net(4, seed=5)
    rep = net.replicas[net.members[0]]
    newer = rep.apply_committee_switch(CommitteeView(net.members, 2, 3), (3, 1, Phase.PLEDGE), 0)
    older = newer.apply_committee_switch(CommitteeView(net.members, 2, 1), (1, 1, Phase.PLEDGE), 0)
    assert older is newer and newer.committee.epoch == 3


def test_switched_replica_equals_fresh_replica():
    net = Net(4, seed=6)
    net.submit(pledge_request(net.ids[0]))
    net.run()
    rep = net.replicas[net.members[1]]
    key = (1, 1, Phase.PLEDGE)
    view = CommitteeView(tuple(reversed(net.members)), 2, 1)
    switched = rep.apply_committee_switch(view, key, 50)
    assert switched.key == key and switched.view == 0 and not switched.slots and not switched.executed_ids
    assert switched.members == view.members


# -- proof collection ---------------------------------------------------------------------


def _collector(n):
    ids, keys, view = make_committee(n, seed=12)
    result = b"frozen result"
    end = make_end_request(Phase.COMMIT, 2, result, ids[0])
    return ids, keys, view, result, EndCollector(end, view.members, keys, view.f), end


def test_two_distinct_replies_make_a_proof_for_f1():
    ids, keys, view, result, col, end = _collector(4)
    assert col.add(make_reply(end.hash, Phase.COMMIT, 2, result, ids[1])) is None
    proof = col.add(make_reply(end.hash, Phase.COMMIT, 2, result, ids[2]))
    assert proof is not None and verify_proof(proof, view.members, keys)


def test_duplicate_responder_is_not_counted():
    ids, keys, view, result, col, end = _collector(4)
    r = make_reply(end.hash, Phase.COMMIT, 2, result, ids[1])
    assert col.add(r) is None and col.add(r) is None
    assert col.duplicates == 1


def test_f2_needs_three_replies():
    ids, keys, view, result, col, end = _collector(7)
    for i in (1, 2):
        assert col.add(make_reply(end.hash, Phase.COMMIT, 2, result, ids[i])) is None
    assert col.add(make_reply(end.hash, Phase.COMMIT, 2, result, ids[3])) is not None


def test_mismatched_reply_is_ignored_and_counted():
    ids, keys, view, result, col, end = _collector(4)
    assert col.add(make_reply(digest(b"x"), Phase.COMMIT, 2, b"x", ids[1])) is None
    assert col.mismatched == 1


def test_end_hash_is_deterministic_and_signed():
    ids, keys, view = make_committee(4, seed=13)
    a = make_end_request(Phase.WORK, 1, b"same", ids[0])
    b = make_end_request(Phase.WORK, 1, b"same", ids[1])
    assert a.hash == b.hash
    assert make_end_request(Phase.WORK, 1, b"other", ids[0]).hash != a.hash
    assert a.verify(keys)
    assert not replace(a, sig=bytes(64)).verify(keys)


def test_proof_with_forged_or_outside_reply_fails():
    ids, keys, view, result, col, end = _collector(4)
    col.add(make_reply(end.hash, Phase.COMMIT, 2, result, ids[1]))
    proof = col.add(make_reply(end.hash, Phase.COMMIT, 2, result, ids[2]))
    forged = replace(proof, replies=(proof.replies[0], replace(proof.replies[1], sig=bytes(64))))
    assert not verify_proof(forged, view.members, keys)
    short = replace(proof, replies=proof.replies[:1])
    assert not verify_proof(short, view.members, keys)
    doubled = replace(proof, replies=(proof.replies[0], proof.replies[0]))
    assert not verify_proof(doubled, view.members, keys)


# -- message scaling ----------------------------------------------------------------------


def test_pbft_messages_grow_quadratically():
    sizes = (4, 7, 10, 13)
    counts = []
    for n in sizes:
        net = Net(n, seed=20)
        net.submit(pledge_request(net.ids[0]))
        net.run()
        counts.append(net.sent["PbftMessage"])
    coef = np.polyfit(sizes, counts, 2)
    fit = np.polyval(coef, sizes)
    r2 = 1 - np.sum((np.array(counts) - fit) ** 2) / np.sum((np.array(counts) - np.mean(counts)) ** 2)
    assert r2 > 0.95
    # exact normal-case count: (n-1) + (n-1)^2 + n(n-1)
    assert counts == [(n - 1) + (n - 1) ** 2 + n * (n - 1) for n in sizes]
