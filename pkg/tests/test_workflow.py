import random
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dflsim.committee import CommitteeView
from dflsim.fl import ModelParams, init_params, make_blobs, predict
from dflsim.identity import Identity, KeyDirectory, digest
from dflsim.messages import CommitEntry, Phase, RequestTuple, WorkBody
from dflsim.store import ContentStore
from dflsim.workflow import (
    DetectorAction,
    IneligibleError,
    NodeView,
    PhaseContext,
    ResultContext,
    TimerState,
    build_phase_request,
    compute_phase_result,
    decode_result,
    evaluate_commits,
    expected_total,
    initial_gap,
    phase_successor,
    primary_verification,
    submission_deadline_check,
    transition_detector,
)

from detector_driver import drive, random_pattern


# -- detector -----------------------------------------------------------------------------


def test_timer1_ends_stage_with_no_arrivals():
    run = drive([], tot=5, mt=30_000)
    assert run.end == 30_000 and not run.crossed


def test_threshold_starts_timer2_with_mean_gap():
    ctx = PhaseContext(1, Phase.PLEDGE, tot=5, start=0)
    ts = TimerState(30_000)
    for t in (100, 200, 300):
        assert transition_detector(ts, ctx, "arrival", t)[0] is DetectorAction.NONE
    action, at = transition_detector(ts, ctx, "arrival", 400)
    assert action is DetectorAction.START_TIMER2 and ts.t == 100 and at == 500
    action, at = transition_detector(ts, ctx, "arrival", 450)
    assert action is DetectorAction.RESET_TIMER2 and at == 550


def test_halving_chain_ends_stage():
    run = drive([100, 200, 300, 400], tot=5, mt=30_000)
    # t=100 -> timer at 500, then 50, 25, 12, 6, 3, 1, 0
    assert run.crossed and run.t_initial == 100
    assert run.end == 400 + 100 + 50 + 25 + 12 + 6 + 3 + 1
    assert run.halvings == 7


def test_lone_arrival_gap_measured_from_start():
    ctx = PhaseContext(1, Phase.COMMIT, tot=1, start=1000, arrivals=[1700])
    assert initial_gap(ctx) == 700


def test_stale_timer2_generation_ignored():
    from dflsim.workflow import TransitionDetector
    det = TransitionDetector(PhaseContext(1, Phase.PLEDGE, 2, 0), 10_000)
    det.feed("arrival", 10)
    _, at, gen = det.feed("arrival", 20)
    det.feed("arrival", 25)
    assert det.feed("timer2", at, gen)[0] is DetectorAction.NONE


def test_unknown_event_rejected():
    with pytest.raises(ValueError):
        transition_detector(TimerState(1), PhaseContext(1, Phase.PLEDGE, 1, 0), "bogus", 0)


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 10**9), st.sampled_from([30_000, 120_000]))
def test_detector_bounds(seed, mt):
    times, tot = random_pattern(random.Random(seed), mt)
    run = drive(times, tot, mt)
    assert run.end <= mt
    if run.crossed:
        assert run.end <= run.last_arrival + 2 * run.t_initial + 12
        if run.t_initial < 4096:
            assert run.halvings <= 12


# -- phase bookkeeping ----------------------------------------------------------------------


def members(k=4):
    return tuple(bytes([i]) * 32 for i in range(k))


def test_expected_total_per_phase():
    assert expected_total(Phase.ELECT, 10, 3, 4) == 10
    assert expected_total(Phase.PLEDGE, 10, 3, 4) == 10
    assert expected_total(Phase.COMMIT, 10, 3, 4) == 3
    assert expected_total(Phase.WORK, 10, 3, 4) == 4


def test_deadline_check():
    assert submission_deadline_check(1000, 500, 1500) == "proceed"
    assert submission_deadline_check(1000, 500, 1501) == "abandon"


def test_phase_sequence():
    view = CommitteeView(members(), 2, 0)
    seq = [Phase.ELECT]
    for _ in range(3):
        seq.append(phase_successor(seq[-1], view))
    assert seq == [Phase.ELECT, Phase.PLEDGE, Phase.COMMIT, Phase.WORK]
    assert phase_successor(Phase.WORK, view) is Phase.PLEDGE
    assert phase_successor(Phase.WORK, CommitteeView(members(), 0, 0)) is Phase.ELECT


# -- requests -------------------------------------------------------------------------------


def world(n=5):
    ids = sorted((Identity.from_seed(70 + i) for i in range(n)), key=lambda i: i.node_id)
    keys = KeyDirectory()
    for i in ids:
        keys.add(i.node_id, i.keys.public)
    view = NodeView(round=1, phase=Phase.PLEDGE, committee=CommitteeView(tuple(i.node_id for i in ids[:4]), 2, 0),
                    registered={i.node_id: 1000 for i in ids})
    return ids, keys, view


def test_requests_require_registration_and_eligibility():
    ids, keys, view = world()
    stranger = Identity.from_seed(1)
    with pytest.raises(IneligibleError):
        build_phase_request(Phase.PLEDGE, stranger, view, money=5)
    with pytest.raises(IneligibleError):
        build_phase_request(Phase.PLEDGE, ids[0], view, money=5, balance=4)
    view.phase = Phase.COMMIT
    with pytest.raises(IneligibleError):
        build_phase_request(Phase.COMMIT, ids[0], view, model_digest=b"m" * 32, samples=3)
    view.phase = Phase.WORK
    with pytest.raises(IneligibleError):
        build_phase_request(Phase.WORK, ids[4], view)


def test_primary_verification():
    ids, keys, view = world()
    req = build_phase_request(Phase.PLEDGE, ids[0], view, money=5)
    assert primary_verification(req, view, keys)
    view.phase = Phase.COMMIT
    assert not primary_verification(req, view, keys)  # wrong phase
    view.phase = Phase.PLEDGE
    from dflsim.messages import ConsensusRequest, PledgePayload
    tampered = PledgePayload(replace(req.body.auth, money=6))
    bad = ConsensusRequest.make(tampered, ids[0])
    assert not primary_verification(bad, view, keys)
    zero = build_phase_request(Phase.PLEDGE, ids[1], view, money=0)
    assert not primary_verification(zero, view, keys)


def test_pledge_result_is_order_independent():
    ids, keys, view = world()
    reqs = [build_phase_request(Phase.PLEDGE, i, view, money=5) for i in ids]
    ctx = ResultContext(view, ContentStore(), None)
    a = compute_phase_result(Phase.PLEDGE, reqs, ctx, ids[0].node_id)
    b = compute_phase_result(Phase.PLEDGE, list(reversed(reqs)) + reqs[:2], ctx, ids[0].node_id)
    assert a == b
    assert len(decode_result(a).body.tuples) == len(ids)


def test_node_view_ignores_stale_events():
    from dflsim.contract import StateChange
    from dflsim.messages import PhaseResult, PledgeBody
    ids, keys, view = world()
    res = PhaseResult(1, Phase.PLEDGE, ids[0].node_id, 0, PledgeBody(())).to_bytes()
    ev = StateChange(1, Phase.PLEDGE, res, 1, Phase.COMMIT, view.committee, (), (), view.global_digest, 0,
                     ids[0].node_id)
    assert view.on_state_change_event(ev)
    assert view.key == (1, Phase.COMMIT)
    assert not view.on_state_change_event(ev)


# -- work aggregation -----------------------------------------------------------------------


def oracle_score(weights, dims, test):
    m = ModelParams(weights, dims)
    correct = int(np.sum(predict(m, test.features) == test.labels))
    return (correct * 1000 * 2 + len(test)) // (2 * len(test))


def test_global_score_matches_oracle():
    dims = (4, 3)
    store = ContentStore()
    test = make_blobs(200, 3, 4, seed=3, role="test")
    train = make_blobs(200, 3, 4, seed=4)
    from dflsim.fl import train_local
    entries = []
    for k in range(5):
        m = train_local(init_params(dims, k), train, 2, 0.05, seed=k)
        owner = bytes([k + 1]) * 32
        entries.append(CommitEntry(owner, store.put_model(m), 10, RequestTuple(1, Phase.COMMIT, 0, owner)))
    _, _, view = world()
    view.commits = tuple(entries)
    out = evaluate_commits(ResultContext(view, store, test))
    admitted = [e for e in entries if e.owner in out.admitted]
    stack = np.array([store.get_model(e.model_digest).weights for e in admitted])
    mean = np.array([sum(col) / len(col) for col in stack.T])
    np.testing.assert_allclose(store.get_model(out.global_digest).weights, mean, atol=1e-12)
    assert out.global_score == oracle_score(store.get_model(out.global_digest).weights, dims, test)
    for owner, s in out.scores:
        e = next(e for e in entries if e.owner == owner)
        assert s == oracle_score(store.get_model(e.model_digest).weights, dims, test)


def test_low_quality_model_is_not_aggregated():
    dims = (4, 3)
    store = ContentStore()
    test = make_blobs(300, 3, 4, seed=3, role="test")
    from dflsim.fl import train_local
    good = train_local(init_params(dims, 0), make_blobs(300, 3, 4, seed=3), 5, 0.1, seed=0)
    # a model that always predicts a class absent from most of the test set
    bad = ModelParams(np.concatenate([np.zeros(12), np.array([0.0, 0.0, 100.0])]), dims)
    entries = [CommitEntry(bytes([k]) * 32, store.put_model(good), 1, RequestTuple(1, Phase.COMMIT, 0, bytes([k]) * 32))
               for k in (1, 2, 3)]
    entries.append(CommitEntry(b"\x09" * 32, store.put_model(bad), 1, RequestTuple(1, Phase.COMMIT, 0, b"\x09" * 32)))
    _, _, view = world()
    view.commits = tuple(entries)
    out = evaluate_commits(ResultContext(view, store, test))
    assert b"\x09" * 32 not in out.admitted
    assert out.quality[b"\x09" * 32].verdict == "punish"


def test_work_result_records_correct_evaluators():
    ids, keys, view = world()
    view.phase = Phase.WORK
    store = ContentStore()
    ctx = ResultContext(view, store, make_blobs(30, 3, 4, seed=0, role="test"))
    out = evaluate_commits(ctx)
    right = build_phase_request(Phase.WORK, ids[0], view, scores=out.scores, global_digest=out.global_digest)
    wrong = build_phase_request(Phase.WORK, ids[1], view, scores=((b"z" * 32, 5),), global_digest=digest(b"no"))
    body = decode_result(compute_phase_result(Phase.WORK, [right, wrong], ctx, ids[0].node_id)).body
    assert isinstance(body, WorkBody)
    rewarded = {e.subject for e in body.outcomes if e.kind.name.startswith("COMMITTEE_EVALUATION")}
    assert ids[0].node_id in rewarded and ids[1].node_id not in rewarded
