"""Event-loop driver for the end-of-stage detector, shared by unit and acceptance tests."""

from __future__ import annotations

import heapq
import random
from dataclasses import dataclass

from dflsim.messages import Phase
from dflsim.workflow import DetectorAction, PhaseContext, TransitionDetector


@dataclass
class DetectorRun:
    end: int
    crossed: bool
    t_initial: int
    last_arrival: int
    halvings: int


def drive(arrivals, tot, mt, start=0):
    ctx = PhaseContext(1, Phase.PLEDGE, tot, start)
    det = TransitionDetector(ctx, mt)
    heap = [(t, 0, i, "arrival", None) for i, t in enumerate(sorted(arrivals))]
    heap.append((det.timer1_at, 1, 0, "timer1", None))
    heapq.heapify(heap)
    seq = len(heap)
    crossed, t_init, halvings, last = False, 0, 0, start
    while heap:
        now, _, _, event, gen = heapq.heappop(heap)
        action, at, g = det.feed(event, now, gen)
        if event == "arrival" and not det.ts.ended:
            last = now
        if action is DetectorAction.START_TIMER2:
            crossed, t_init = True, det.ts.t
        if action is DetectorAction.HALVE_AND_REARM or (action is DetectorAction.END_STAGE and event == "timer2"):
            halvings += 1
        if at is not None:
            seq += 1
            heapq.heappush(heap, (at, 2, seq, "timer2", g))
        if action is DetectorAction.END_STAGE:
            return DetectorRun(now, crossed, t_init, last, halvings)
    raise AssertionError("stage never ended")


def random_pattern(rng: random.Random, mt: int):
    """Arrival times after a stage start at 0: a burst, then maybe silence."""
    tot = rng.randint(1, 40)
    k = rng.randint(0, tot + 3)
    gap = rng.choice((50, 300, 1500))
    times, t = [], rng.randint(0, 2000)
    for _ in range(k):
        times.append(t)
        t += rng.randint(1, gap)
    times = [x for x in times if x < mt * 2]
    return times, tot
