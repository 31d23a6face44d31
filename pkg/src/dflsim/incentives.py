"""Reward and penalty economics.

Amounts are integers in milli-units: currency in milli-coins and incentive
scores in milli-points, so pool accounting is exact. ``UNIT`` converts.
"""

from __future__ import annotations

import enum
import logging
import statistics
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

from .codec import wire
from .identity import NodeId

logger = logging.getLogger(__name__)

UNIT = 1000


@wire(3)
class IncentiveKind(enum.IntEnum):
    COMMITTEE_AGGREGATION_CORRECT = 0
    COMMITTEE_EVALUATION_CORRECT = 1
    COMMITTEE_CONTRACT_SUBMIT = 2
    COMMITTEE_MASTER_WORKING = 3
    COMMITTEE_UNANSWERED = 4
    COMMITTEE_RESPONDS = 5
    NO_SUBMIT_AFTER_PLEDGE = 6
    LOW_QUALITY_MODEL = 7
    HIGH_QUALITY_MODEL = 8
    REGULAR_QUALITY_MODEL = 9


PLUS_ONE = frozenset({
    IncentiveKind.COMMITTEE_AGGREGATION_CORRECT,
    IncentiveKind.COMMITTEE_EVALUATION_CORRECT,
    IncentiveKind.COMMITTEE_RESPONDS,
})
EXPONENTIAL = frozenset({IncentiveKind.COMMITTEE_UNANSWERED, IncentiveKind.LOW_QUALITY_MODEL})
LINEAR = frozenset({IncentiveKind.NO_SUBMIT_AFTER_PLEDGE})
MODEL_REWARD = frozenset({IncentiveKind.HIGH_QUALITY_MODEL, IncentiveKind.REGULAR_QUALITY_MODEL})


@wire(60)
@dataclass(frozen=True)
class IncentiveEvent:
    """One row of the reward/penalty table applied to ``subject``.

    ``amount`` is the gas cost ts for contract submissions and the unique
    request count RS for the master bonus; ``numerator/denominator`` carry
    the master base score PS or the model-reward fraction.
    """

    kind: IncentiveKind
    subject: NodeId
    round: int
    amount: int = 0
    numerator: int = 0
    denominator: int = 1

    @property
    def fraction(self) -> Fraction:
        return Fraction(self.numerator, self.denominator)


@dataclass(frozen=True)
class PenaltyPolicy:
    max_pledge: int = 100 * UNIT
    linear_rate: Fraction = Fraction(8, 100)
    exp_base: int = 2
    exp_unit: int = UNIT

    def __post_init__(self) -> None:
        object.__setattr__(self, "linear_rate", Fraction(self.linear_rate).limit_denominator(10**6))
        if not 0 < self.linear_rate < 1:
            raise ValueError("linear_rate must lie in (0, 1)")
        if self.exp_base < 2:
            raise ValueError("exp_base must be >= 2")


@dataclass
class RewardLedger:
    scores: dict[NodeId, int] = field(default_factory=dict)
    tm: int = 0
    offense_counters: dict[tuple[NodeId, IncentiveKind], int] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    @property
    def total_score(self) -> int:
        return sum(self.scores.values())

    def credit(self, node: NodeId, points: int) -> None:
        if points < 0:
            raise ValueError("credits are non-negative")
        self.scores[node] = self.scores.get(node, 0) + points

    def counter(self, node: NodeId, kind: IncentiveKind) -> int:
        return self.offense_counters.get((node, kind), 0)


# -- contract-call reward ---------------------------------------------------------


def call_reward(ts: int, total_score: int, tm: int) -> int:
    """s = ts * sum(p) / (tm - ts), rounded up so the payout gain still covers ts."""
    if ts <= 0:
        return 0
    if tm <= ts:
        raise ValueError("reward pool must exceed the call cost")
    return -(-ts * total_score // (tm - ts))


def contract_call_reward(ts: int, ledger: RewardLedger) -> int:
    try:
        return call_reward(ts, ledger.total_score, ledger.tm)
    except ValueError:
        msg = f"reward pool {ledger.tm} does not exceed call cost {ts}; no call reward"
        logger.warning(msg)
        ledger.warnings.append(msg)
        return 0


def payout_gain(ts_reward: int, total_score: int, tm: int) -> Fraction:
    """Extra pool share earned by adding ``ts_reward`` points: tm*s/(sum(p)+s)."""
    if total_score + ts_reward == 0:
        return Fraction(0)
    return Fraction(tm * ts_reward, total_score + ts_reward)


# -- master bonus -----------------------------------------------------------------

MASTER_REQUEST_CAP = 100


def masternode_coefficient(rs: int) -> Fraction:
    if rs < 0:
        raise ValueError("RS must be non-negative")
    return 1 + Fraction(min(rs, MASTER_REQUEST_CAP), 100)


def masternode_bonus(rs: int, ps):
    """s = (1 + min(RS, 100)/100) * PS; exact for integer or Fraction PS."""
    if ps < 0:
        raise ValueError("PS must be non-negative")
    return masternode_coefficient(rs) * Fraction(ps)


# -- model quality ----------------------------------------------------------------


@dataclass(frozen=True)
class QualityOutcome:
    verdict: str  # "reward" | "punish" | "neutral"
    fraction: Fraction = Fraction(0)


def model_quality_outcomes(scores: Sequence[tuple[NodeId, int]], malicious_rate: float
                           ) -> dict[NodeId, QualityOutcome]:
    """Median-based judgement of sub-model scores.

    Below ``median * malicious_rate`` is punished; above the median earns the
    fraction ``(m - r - 1) / m`` where ``r`` is the zero-based rank by
    descending score (ties by NodeId).
    """
    if not scores:
        return {}
    if not 0 < malicious_rate < 1:
        raise ValueError("malicious rate must lie in (0, 1)")
    m = len(scores)
    mids = Fraction(statistics.median(Fraction(s) for _, s in scores))
    threshold = mids * Fraction(malicious_rate).limit_denominator(10**6)
    ranked = sorted(scores, key=lambda item: (-item[1], item[0]))
    out: dict[NodeId, QualityOutcome] = {}
    for r, (node, s) in enumerate(ranked):
        if s < threshold:
            out[node] = QualityOutcome("punish")
        elif s > mids:
            out[node] = QualityOutcome("reward", Fraction(m - r - 1, m))
        else:
            out[node] = QualityOutcome("neutral")
    return out


# -- pledge deductions ------------------------------------------------------------


def linear_penalty(balance: int, policy: PenaltyPolicy) -> int:
    return min(balance, int(policy.linear_rate * policy.max_pledge))


def exponential_penalty(ledger: RewardLedger, node: NodeId, kind: IncentiveKind, balance: int,
                        policy: PenaltyPolicy) -> int:
    """Bump the node's counter for ``kind`` and deduct ``base ** count`` units."""
    x = ledger.counter(node, kind) + 1
    ledger.offense_counters[(node, kind)] = x
    return min(balance, policy.exp_base ** x * policy.exp_unit)


def reset_counters(ledger: RewardLedger, nodes: Iterable[NodeId] | None = None) -> None:
    """Explicit counter reset; never called implicitly."""
    if nodes is None:
        ledger.offense_counters.clear()
        return
    targets = set(nodes)
    for key in [k for k in ledger.offense_counters if k[0] in targets]:
        del ledger.offense_counters[key]


# -- dispatch ---------------------------------------------------------------------


@dataclass(frozen=True)
class Effect:
    points: int = 0
    deduction: int = 0


def apply_event(ledger: RewardLedger, event: IncentiveEvent, *, policy: PenaltyPolicy,
                balance: int = 0, model_reward_budget: int = 10 * UNIT,
                plus_one: int = UNIT) -> Effect:
    """Apply one table row: credit points to the ledger or compute a deduction.

    The caller owns the fund pools; it debits ``Effect.deduction`` from the
    subject's pool and moves it into the reward pool.
    """
    kind = IncentiveKind(event.kind)
    node = event.subject
    if kind in PLUS_ONE:
        points = plus_one
    elif kind is IncentiveKind.COMMITTEE_CONTRACT_SUBMIT:
        points = contract_call_reward(event.amount, ledger)
    elif kind is IncentiveKind.COMMITTEE_MASTER_WORKING:
        points = int(masternode_bonus(event.amount, event.numerator))
    elif kind in MODEL_REWARD:
        points = int(event.fraction * model_reward_budget)
    elif kind in EXPONENTIAL:
        return Effect(deduction=exponential_penalty(ledger, node, kind, balance, policy))
    elif kind in LINEAR:
        return Effect(deduction=linear_penalty(balance, policy))
    else:  # pragma: no cover - IncentiveKind is closed
        raise ValueError(f"unknown incentive kind {event.kind!r}")
    if points:
        ledger.credit(node, points)
    return Effect(points=points)


def settle_pool(scores: Mapping[NodeId, int], payout_total: int) -> dict[NodeId, int]:
    """Split ``payout_total`` in proportion to scores; the rounding residue goes
    to the highest-scoring node (ties by smallest NodeId)."""
    total = sum(scores.values())
    if total <= 0 or payout_total <= 0:
        return {}
    shares = {node: payout_total * p // total for node, p in scores.items() if p > 0}
    residue = payout_total - sum(shares.values())
    if residue:
        top = min(shares, key=lambda n: (-scores[n], n))
        shares[top] += residue
    return shares
