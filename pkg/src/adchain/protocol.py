"""Pure protocol rules: vote adjudication, stake/point deltas, prizes, bans.

Nothing in here mutates state. The host engine and the analytics module both
build on these functions.
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

# Point values from the outcome table.
SUBMITTER_WIN = 4
SUBMITTER_LOSS = -2
MAJORITY_TRUE_VOTER = 1
MINORITY_FALSE_VOTER = -1
VOID_PENALTY = -2


def hash_user_id(user_id: str | bytes) -> str:
    """SHA3-256 of a user id, as 64 lowercase hex characters."""
    if isinstance(user_id, str):
        user_id = user_id.encode("utf-8")
    return hashlib.sha3_256(user_id).hexdigest()


class ProtocolError(ValueError):
    """Input rejected by a protocol rule."""


class Choice(str, enum.Enum):
    TRUE = "true"
    FALSE = "false"
    VOID = "void"
    ABSENT = "absent"


class Status(str, enum.Enum):
    OPEN = "open"
    TRUE = "true"
    FALSE = "false"


@dataclass
class Player:
    player_id: str
    balance: int
    points: int = 0
    pcd: int = 0
    banned: bool = False


@dataclass
class Proposition:
    proposition_id: str
    ad_id: str
    user_hash: str
    t_a: int
    t_b: int
    deadline: int
    submitter_id: str
    verifier_ids: tuple[str, ...]
    price: int
    status: Status = Status.OPEN

    def window_contains(self, timestamp: int) -> bool:
        return self.t_a <= timestamp <= self.t_b

    def overlaps(self, t_a: int, t_b: int) -> bool:
        return self.t_a <= t_b and t_a <= self.t_b


@dataclass(frozen=True)
class PixelEvent:
    ad_id: str
    user_id: str
    timestamp: int
    interaction: str = "impression"
    pixel_index: int = 0


@dataclass(frozen=True)
class PropositionRequest:
    ad_id: str
    user_id: str
    user_hash: str
    timestamp: int
    player_id: str


@dataclass(frozen=True)
class Vote:
    proposition_id: str
    voter_id: str
    choice: Choice
    proof: str | None = None


@dataclass(frozen=True)
class Delta:
    player_id: str
    points: int
    stake: int
    forfeited: bool


@dataclass(frozen=True)
class AdjudicationResult:
    outcome: bool
    deltas: tuple[Delta, ...]
    trues: int = 0
    falses: int = 0

    @property
    def forfeited_total(self) -> int:
        return sum(d.stake for d in self.deltas if d.forfeited)

    @property
    def returned_total(self) -> int:
        return sum(d.stake for d in self.deltas if not d.forfeited)

    def delta_for(self, player_id: str) -> Delta:
        for d in self.deltas:
            if d.player_id == player_id:
                return d
        raise KeyError(player_id)


@dataclass
class PrizePool:
    initial_fund: int = 0
    forfeited_total: int = 0
    paid_out_total: int = 0

    @property
    def pool(self) -> int:
        return self.initial_fund + self.forfeited_total - self.paid_out_total

    def credit(self, amount: int) -> None:
        if amount < 0:
            raise ProtocolError("negative forfeiture")
        self.forfeited_total += amount

    def pay(self, amount: int) -> None:
        if amount < 0 or amount > self.pool:
            raise ProtocolError(f"payout {amount} exceeds pool {self.pool}")
        self.paid_out_total += amount


def adjudicate(
    votes: Sequence[Vote],
    submitter_id: str,
    price: int,
    tie_to_true: bool = True,
    verifier_ids: Iterable[str] | None = None,
) -> AdjudicationResult:
    """Decide a proposition and compute every participant's delta.

    The submitter's accepted request is its True vote; an explicit entry for
    the submitter is allowed only if it is True. Absent counts as False. Void
    votes are excluded from the tally and always penalized.
    """
    seen: dict[str, Vote] = {}
    for v in votes:
        if v.voter_id in seen:
            raise ProtocolError(f"duplicate vote from {v.voter_id}")
        seen[v.voter_id] = v
    if verifier_ids is not None:
        allowed = set(verifier_ids)
        if submitter_id not in allowed:
            raise ProtocolError("submitter is not a verifier")
        stray = set(seen) - allowed
        if stray:
            raise ProtocolError(f"votes from non-verifiers: {sorted(stray)}")
        missing = allowed - set(seen) - {submitter_id}
        if missing:
            raise ProtocolError(f"no vote entry for {sorted(missing)}")
    own = seen.pop(submitter_id, None)
    if own is not None and own.choice is not Choice.TRUE:
        raise ProtocolError("submitter's vote is implicitly True")

    trues = 1
    falses = 0
    for v in seen.values():
        if v.choice is Choice.TRUE:
            trues += 1
        elif v.choice in (Choice.FALSE, Choice.ABSENT):
            falses += 1
    outcome = trues > falses or (trues == falses and tie_to_true)

    deltas = []
    if outcome:
        deltas.append(Delta(submitter_id, SUBMITTER_WIN, price, False))
    else:
        deltas.append(Delta(submitter_id, SUBMITTER_LOSS, price, True))
    for voter_id, v in seen.items():
        if v.choice is Choice.VOID:
            deltas.append(Delta(voter_id, VOID_PENALTY, price, True))
        elif not outcome:
            deltas.append(Delta(voter_id, 0, price, False))
        elif v.choice is Choice.TRUE:
            deltas.append(Delta(voter_id, MAJORITY_TRUE_VOTER, price, False))
        else:
            deltas.append(Delta(voter_id, MINORITY_FALSE_VOTER, price, True))
    return AdjudicationResult(outcome, tuple(deltas), trues, falses)


def compute_prize(pool: int, points_by_player: Mapping[str, int], player_id: str) -> int:
    """Share of ``pool`` owed to ``player_id``, floored to a whole minor unit.

    Returns 0 (no payout) when the player's points are not positive.
    """
    mine = points_by_player[player_id]
    if mine <= 0 or pool <= 0:
        return 0
    total = sum(p for p in points_by_player.values() if p > 0)
    return pool * mine // total


def check_ban(points: int, threshold: int | None) -> bool:
    if threshold is None:
        return False
    return points < threshold


def expected_vote_payoff(
    strategy: str, p_true_majority: float | Fraction, price: int | Fraction = 1, role: str = "verifier"
) -> tuple[Fraction, Fraction]:
    """Expected (points, stake loss) for a vote given P(True majority).

    ``strategy`` is ``"true"`` (True with a valid proof) or ``"false"``.
    The submitter role only has the True strategy.
    """
    p = Fraction(p_true_majority)
    if not 0 <= p <= 1:
        raise ProtocolError(f"probability out of range: {p_true_majority}")
    price = Fraction(price)
    if role == "submitter":
        if strategy != "true":
            raise ProtocolError("a submitter's vote is always True")
        return SUBMITTER_WIN * p + SUBMITTER_LOSS * (1 - p), price * (1 - p)
    if role != "verifier":
        raise ProtocolError(f"unknown role {role!r}")
    if strategy == "true":
        # Minority True voters keep their stake and score 0.
        return MAJORITY_TRUE_VOTER * p, Fraction(0)
    if strategy == "false":
        return MINORITY_FALSE_VOTER * p, price * p
    raise ProtocolError(f"unknown strategy {strategy!r}")
