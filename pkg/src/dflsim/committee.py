"""Stake- and accuracy-weighted committee election and master rotation.

A candidate's weight is ``p * eth + (1 - p) * acc * eth_bar``. ``eth_bar``,
the mean pledge of the top ``need`` candidates, is taken over a pledge-only
ranking so the weight does not depend on itself.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Sequence

from .codec import wire
from .identity import NodeId


class ElectionError(ValueError):
    pass


@dataclass(frozen=True)
class Candidate:
    node: NodeId
    pledge_eth: float
    acc: float

    def __post_init__(self) -> None:
        if self.pledge_eth < 0:
            raise ElectionError("pledge must be non-negative")
        if not 0.0 <= self.acc <= 1.0:
            raise ElectionError("acc must lie in [0, 1]")


def fault_tolerance(need: int) -> int:
    """F for a committee of size 3F+1; anything else is a configuration error."""
    if need < 4 or (need - 1) % 3 != 0:
        raise ElectionError(f"committee size {need} is not of the form 3F+1 with F >= 1")
    return (need - 1) // 3


@dataclass(frozen=True)
class ElectionConfig:
    p: float = 0.3
    need: int = 4
    min_pledge: float = 0.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.p <= 1.0:
            raise ElectionError("p must lie in [0, 1]")
        fault_tolerance(self.need)


@wire(50)
@dataclass(frozen=True)
class CommitteeView:
    members: tuple[NodeId, ...]
    elect_times_remaining: int
    epoch: int
    view_changes: int = 0

    def __post_init__(self) -> None:
        if len(set(self.members)) != len(self.members):
            raise ElectionError("committee members must be distinct")
        fault_tolerance(len(self.members))

    @property
    def need(self) -> int:
        return len(self.members)

    @property
    def f(self) -> int:
        return fault_tolerance(len(self.members))

    @property
    def master(self) -> NodeId:
        return select_master(self)

    def with_view(self, view_changes: int) -> "CommitteeView":
        return replace(self, view_changes=view_changes)

    def __contains__(self, node: object) -> bool:
        return node in self.members


def eth_bar(candidates: Sequence[Candidate], need: int) -> float:
    if len(candidates) < need:
        raise ElectionError(f"eth_bar needs {need} candidates, got {len(candidates)}")
    top = sorted(candidates, key=lambda c: (-c.pledge_eth, c.node))[:need]
    return sum(c.pledge_eth for c in top) / need


def candidate_weight(c: Candidate, p: float, eth_bar: float) -> float:
    return p * c.pledge_eth + (1.0 - p) * c.acc * eth_bar


def run_election(clist: Iterable[Candidate], cfg: ElectionConfig) -> list[NodeId]:
    """The ``need`` heaviest candidates, heaviest first, ties by NodeId.

    Returns an empty list when there are too few candidates; the caller keeps
    the incumbent committee in that case.
    """
    by_node: dict[NodeId, Candidate] = {}
    for c in clist:
        if c.pledge_eth < cfg.min_pledge:
            continue
        # duplicate candidacies: keep the canonical (largest pledge, then acc) one
        prev = by_node.get(c.node)
        if prev is None or (c.pledge_eth, c.acc) > (prev.pledge_eth, prev.acc):
            by_node[c.node] = c
    pool = sorted(by_node.values(), key=lambda c: c.node)
    if len(pool) < cfg.need:
        return []
    bar = eth_bar(pool, cfg.need)
    ranked = sorted(pool, key=lambda c: (-candidate_weight(c, cfg.p, bar), c.node))
    return [c.node for c in ranked[:cfg.need]]


def select_master(view: CommitteeView) -> NodeId:
    return view.members[(view.epoch + view.view_changes) % len(view.members)]


def should_reelect(view: CommitteeView) -> bool:
    return view.elect_times_remaining == 0


def after_work(view: CommitteeView) -> CommitteeView:
    """Count one completed iteration against the committee's term."""
    return replace(view, elect_times_remaining=max(0, view.elect_times_remaining - 1))
