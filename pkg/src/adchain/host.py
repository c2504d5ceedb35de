"""The host's state machine: assignment, propositions, votes, ledger, audit."""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import asdict, dataclass, fields
from typing import IO, Any, Iterable

from .protocol import (
    AdjudicationResult,
    Choice,
    PixelEvent,
    Player,
    PrizePool,
    Proposition,
    PropositionRequest,
    Status,
    Vote,
    VOID_PENALTY,
    adjudicate,
    check_ban,
    compute_prize,
    hash_user_id,
)

DAY_MS = 86_400_000


class Rejected(Exception):
    """A host operation refused its input. ``reason`` is a short machine code."""

    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason


class AssignmentError(Rejected):
    pass


@dataclass
class HostConfig:
    verifiers_per_ad: int = 15
    proposition_price: int = 1
    proposition_deadline: int = 2_000
    proposition_delay: int = 1_000
    ban_threshold: int | None = -5
    initial_balance: int = 10_000
    initial_pcd: int = 100
    retention: int = 30 * DAY_MS
    tie_to_true: bool = True
    seed: int = 0
    initial_fund: int = 0

    def __post_init__(self):
        if self.verifiers_per_ad < 1:
            raise ValueError("verifiers_per_ad must be >= 1")
        for name in ("proposition_deadline", "proposition_delay", "retention"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.proposition_price < 0 or self.initial_balance < 0 or self.initial_fund < 0:
            raise ValueError("currency amounts must be nonnegative")
        if self.initial_pcd < 0:
            raise ValueError("initial_pcd must be nonnegative")


@dataclass(frozen=True)
class AdRegistration:
    ad_id: str
    verifier_ids: tuple[str, ...]
    created_at: int


@dataclass(frozen=True)
class AuditRecord:
    proposition_id: str
    ad_id: str
    submitter_id: str
    verifier_ids: tuple[str, ...]
    user_hash: str
    votes: tuple[dict, ...]
    pixels: tuple[dict, ...]
    outcome: bool
    price: int
    tie_to_true: bool
    closed_at: int
    retention_until: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    def replay(self) -> AdjudicationResult:
        """Re-run adjudication from the logged votes alone."""
        votes = [
            Vote(self.proposition_id, v["voter_id"], Choice(v["choice"]), v.get("proof"))
            for v in self.votes
        ]
        return adjudicate(votes, self.submitter_id, self.price, self.tie_to_true, self.verifier_ids)


def _derived_rng(seed: int, *parts: object) -> random.Random:
    key = "/".join([str(seed), *map(str, parts)]).encode()
    return random.Random(int.from_bytes(hashlib.sha256(key).digest()[:8], "big"))


class Host:
    """Single-writer host. Every mutating call must come from one logical owner."""

    def __init__(self, config: HostConfig | None = None):
        self.config = config or HostConfig()
        self.players: dict[str, Player] = {}
        self.banned_ids: set[str] = set()
        self.registrations: dict[str, AdRegistration] = {}
        self.propositions: dict[str, Proposition] = {}
        self.votes: dict[str, dict[str, Vote]] = {}
        self.escrow: dict[str, dict[str, int]] = {}
        self.counters: dict[str, int] = {}
        self.pixels: dict[str, list[PixelEvent]] = {}
        self.audit: list[AuditRecord] = []
        self.pool = PrizePool(initial_fund=self.config.initial_fund)
        self.initial_balances = 0
        self.next_proposition = 0
        self.ban_count = 0
        self._by_event: dict[tuple[str, str], list[str]] = {}
        self._eligible: list[str] | None = None

    # -- players -------------------------------------------------------

    def register_player(self, player_id: str) -> Player:
        if player_id in self.banned_ids:
            raise Rejected("banned", player_id)
        if player_id in self.players:
            raise Rejected("duplicate player", player_id)
        player = Player(player_id, self.config.initial_balance, 0, self.config.initial_pcd)
        self.players[player_id] = player
        self._eligible = None
        self.initial_balances += player.balance
        return player

    def player(self, player_id: str) -> Player:
        try:
            return self.players[player_id]
        except KeyError:
            raise Rejected("unknown player", player_id) from None

    def eligible(self) -> list[str]:
        if self._eligible is None:
            price = self.config.proposition_price
            self._eligible = [p.player_id for p in self.players.values() if not p.banned and p.balance >= price]
        return self._eligible

    def _move_balance(self, player: Player, amount: int) -> None:
        price = self.config.proposition_price
        was = player.balance >= price
        player.balance += amount
        if player.balance < 0:
            raise AssertionError(f"{player.player_id} overdrawn")
        if (player.balance >= price) != was:
            self._eligible = None

    def _ban(self, player: Player) -> None:
        if not player.banned:
            player.banned = True
            self._eligible = None
            self.banned_ids.add(player.player_id)
            self.ban_count += 1

    def _apply_ban_check(self, player: Player) -> None:
        if check_ban(player.points, self.config.ban_threshold):
            self._ban(player)

    # -- ads -----------------------------------------------------------

    def assign_verifiers(self, ad_id: str, now: int = 0) -> AdRegistration:
        if ad_id in self.registrations:
            raise Rejected("duplicate ad", ad_id)
        pool = self.eligible()
        v = self.config.verifiers_per_ad
        if len(pool) < v:
            raise AssignmentError("not enough eligible players", f"{len(pool)} < {v}")
        chosen = _derived_rng(self.config.seed, "assign", ad_id).sample(pool, v)
        reg = AdRegistration(ad_id, tuple(chosen), now)
        self.registrations[ad_id] = reg
        self.counters[ad_id] = 0
        return reg

    def receive_pixel(self, event: PixelEvent) -> None:
        """The host's own pixel endpoint: keep a copy for the audit trail."""
        if event.ad_id not in self.registrations:
            raise Rejected("unknown ad", event.ad_id)
        self.pixels.setdefault(event.ad_id, []).append(event)

    # -- propositions --------------------------------------------------

    def submit_proposition_request(self, req: PropositionRequest, now: int) -> Proposition:
        cfg = self.config
        player = self.player(req.player_id)
        reg = self.registrations.get(req.ad_id)
        if reg is None or req.player_id not in reg.verifier_ids:
            raise Rejected("not a verifier", f"{req.player_id} for {req.ad_id}")
        if player.banned:
            raise Rejected("banned", req.player_id)
        price = cfg.proposition_price
        if player.balance < price:
            raise Rejected("insufficient balance", req.player_id)
        if hash_user_id(req.user_id) != req.user_hash:
            self._move_balance(player, -price)
            self.pool.credit(price)
            player.points += VOID_PENALTY
            self._apply_ban_check(player)
            raise Rejected("invalid hash", req.player_id)

        t_a = req.timestamp - cfg.proposition_delay
        t_b = req.timestamp + cfg.proposition_delay
        key = (req.ad_id, req.user_hash)
        for pid in self._by_event.get(key, ()):
            if self.propositions[pid].overlaps(t_a, t_b):
                raise Rejected("duplicate", pid)

        pid = f"p{self.next_proposition:08d}"
        self.next_proposition += 1
        prop = Proposition(
            proposition_id=pid,
            ad_id=req.ad_id,
            user_hash=req.user_hash,
            t_a=t_a,
            t_b=t_b,
            deadline=now + cfg.proposition_deadline,
            submitter_id=req.player_id,
            verifier_ids=reg.verifier_ids,
            price=price,
        )
        # Every assigned verifier is now an obligated voter: escrow now so an
        # absent vote can actually be slashed.
        held = {}
        for vid in reg.verifier_ids:
            p = self.players[vid]
            if p.banned or p.balance < price:
                held[vid] = 0
                continue
            self._move_balance(p, -price)
            held[vid] = price
        self.escrow[pid] = held
        self.propositions[pid] = prop
        self.votes[pid] = {}
        self._by_event.setdefault(key, []).append(pid)
        player.pcd = max(0, player.pcd - 1)
        return prop

    def submit_vote(
        self, proposition_id: str, player_id: str, choice: Choice | str, proof: str | None, now: int
    ) -> Vote:
        prop = self.propositions.get(proposition_id)
        if prop is None:
            raise Rejected("unknown proposition", proposition_id)
        if prop.status is not Status.OPEN:
            raise Rejected("closed", proposition_id)
        if now > prop.deadline:
            raise Rejected("late", proposition_id)
        if player_id not in prop.verifier_ids:
            raise Rejected("not a verifier", player_id)
        if player_id == prop.submitter_id:
            raise Rejected("submitter votes implicitly", player_id)
        if player_id in self.votes[proposition_id]:
            raise Rejected("double vote", player_id)
        if self.player(player_id).banned:
            raise Rejected("banned", player_id)
        choice = Choice(choice)
        if choice is Choice.TRUE:
            if proof is None or hash_user_id(proof) != prop.user_hash:
                choice = Choice.VOID
        elif choice is Choice.FALSE:
            proof = None
        else:
            raise Rejected("bad choice", choice.value)
        vote = Vote(proposition_id, player_id, choice, proof)
        self.votes[proposition_id][player_id] = vote
        return vote

    def close_proposition(self, proposition_id: str, now: int) -> AdjudicationResult:
        cfg = self.config
        prop = self.propositions.get(proposition_id)
        if prop is None:
            raise Rejected("unknown proposition", proposition_id)
        if prop.status is not Status.OPEN:
            raise Rejected("already decided", proposition_id)
        if now < prop.deadline:
            raise Rejected("before deadline", proposition_id)

        cast = self.votes[proposition_id]
        votes = []
        for vid in prop.verifier_ids:
            if vid == prop.submitter_id:
                continue
            vote = cast.get(vid)
            if vote is None:
                vote = Vote(proposition_id, vid, Choice.ABSENT)
            votes.append(vote)
        result = adjudicate(votes, prop.submitter_id, prop.price, cfg.tie_to_true, prop.verifier_ids)

        held = self.escrow.pop(proposition_id)
        touched = []
        for d in result.deltas:
            player = self.players[d.player_id]
            stake = held.get(d.player_id, 0)
            if d.forfeited:
                self.pool.credit(stake)
            elif stake:
                self._move_balance(player, stake)
            if player.banned:
                continue
            player.points += d.points
            if d.player_id != prop.submitter_id:
                player.pcd = max(0, player.pcd - 1)
            touched.append(player)
        for player in touched:
            self._apply_ban_check(player)

        prop.status = Status.TRUE if result.outcome else Status.FALSE
        if result.outcome:
            self.counters[prop.ad_id] += 1
        self.audit.append(
            AuditRecord(
                proposition_id=proposition_id,
                ad_id=prop.ad_id,
                submitter_id=prop.submitter_id,
                verifier_ids=prop.verifier_ids,
                user_hash=prop.user_hash,
                votes=tuple(
                    {"voter_id": v.voter_id, "choice": v.choice.value, "proof": v.proof} for v in votes
                ),
                pixels=tuple(_pixel_dict(e) for e in self.pixels.get(prop.ad_id, ())),
                outcome=result.outcome,
                price=prop.price,
                tie_to_true=cfg.tie_to_true,
                closed_at=now,
                retention_until=now + cfg.retention,
            )
        )
        return result

    # -- rewards -------------------------------------------------------

    def redeem(self, player_id: str) -> int:
        player = self.player(player_id)
        if player.banned:
            raise Rejected("banned", player_id)
        if player.pcd > 0:
            raise Rejected("countdown not finished", f"pcd={player.pcd}")
        payout = 0
        if player.points > 0:
            points = {p.player_id: p.points for p in self.players.values() if not p.banned}
            payout = compute_prize(self.pool.pool, points, player_id)
            self.pool.pay(payout)
        player.points = 0
        player.pcd = self.config.initial_pcd
        return payout

    # -- queries -------------------------------------------------------

    def impression_count(self, ad_id: str) -> int:
        try:
            return self.counters[ad_id]
        except KeyError:
            raise Rejected("unknown ad", ad_id) from None

    def open_propositions(self) -> list[str]:
        return [pid for pid, p in self.propositions.items() if p.status is Status.OPEN]

    def purge_expired(self, now: int) -> int:
        keep = [r for r in self.audit if r.retention_until >= now]
        purged = len(self.audit) - len(keep)
        self.audit = keep
        return purged

    def escrow_total(self) -> int:
        return sum(sum(h.values()) for h in self.escrow.values())

    def conservation_gap(self) -> int:
        """Zero whenever the currency ledger balances."""
        held = sum(p.balance for p in self.players.values())
        return (
            held + self.escrow_total() + self.pool.pool + self.pool.paid_out_total
            - self.initial_balances - self.pool.initial_fund
        )

    def export_audit(self, fp: IO[str]) -> int:
        for record in self.audit:
            fp.write(record.to_json() + "\n")
        return len(self.audit)

    # -- snapshots -----------------------------------------------------

    def snapshot(self) -> dict[str, Any]:
        return {
            "config": asdict(self.config),
            "players": [asdict(p) for p in self.players.values()],
            "banned_ids": sorted(self.banned_ids),
            "registrations": [
                {"ad_id": r.ad_id, "verifier_ids": list(r.verifier_ids), "created_at": r.created_at}
                for r in self.registrations.values()
            ],
            "propositions": [
                {**asdict(p), "verifier_ids": list(p.verifier_ids), "status": p.status.value}
                for p in self.propositions.values()
            ],
            "votes": {
                pid: [{"voter_id": v.voter_id, "choice": v.choice.value, "proof": v.proof} for v in vs.values()]
                for pid, vs in self.votes.items()
                if self.propositions[pid].status is Status.OPEN
            },
            "escrow": self.escrow,
            "counters": self.counters,
            "pixels": {ad: [asdict(e) for e in evs] for ad, evs in self.pixels.items()},
            "audit": [json.loads(r.to_json()) for r in self.audit],
            "pool": asdict(self.pool),
            "initial_balances": self.initial_balances,
            "next_proposition": self.next_proposition,
            "ban_count": self.ban_count,
        }

    def to_json(self) -> str:
        return canonical_json(self.snapshot())

    def state_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    @classmethod
    def from_snapshot(cls, data: dict[str, Any]) -> "Host":
        host = cls(HostConfig(**data["config"]))
        for p in data["players"]:
            host.players[p["player_id"]] = Player(**p)
        host.banned_ids = set(data["banned_ids"])
        for r in data["registrations"]:
            host.registrations[r["ad_id"]] = AdRegistration(r["ad_id"], tuple(r["verifier_ids"]), r["created_at"])
        for p in data["propositions"]:
            prop = Proposition(**{**p, "verifier_ids": tuple(p["verifier_ids"]), "status": Status(p["status"])})
            host.propositions[prop.proposition_id] = prop
            host.votes[prop.proposition_id] = {}
            host._by_event.setdefault((prop.ad_id, prop.user_hash), []).append(prop.proposition_id)
        for pid, vs in data["votes"].items():
            host.votes[pid] = {v["voter_id"]: Vote(pid, v["voter_id"], Choice(v["choice"]), v["proof"]) for v in vs}
        host.escrow = {pid: dict(h) for pid, h in data["escrow"].items()}
        host.counters = dict(data["counters"])
        host.pixels = {ad: [PixelEvent(**e) for e in evs] for ad, evs in data["pixels"].items()}
        audit_fields = {f.name for f in fields(AuditRecord)}
        for r in data["audit"]:
            r = {k: v for k, v in r.items() if k in audit_fields}
            host.audit.append(
                AuditRecord(**{**r, "verifier_ids": tuple(r["verifier_ids"]), "votes": tuple(r["votes"]), "pixels": tuple(r["pixels"])})
            )
        host.pool = PrizePool(**data["pool"])
        host.initial_balances = data["initial_balances"]
        host.next_proposition = data["next_proposition"]
        host.ban_count = data["ban_count"]
        return host


def _pixel_dict(e: PixelEvent) -> dict:
    return {
        "ad_id": e.ad_id,
        "user_id": e.user_id,
        "timestamp": e.timestamp,
        "interaction": e.interaction,
        "pixel_index": e.pixel_index,
    }


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def load_audit(lines: Iterable[str]) -> list[AuditRecord]:
    out = []
    for line in lines:
        if not line.strip():
            continue
        r = json.loads(line)
        out.append(
            AuditRecord(**{**r, "verifier_ids": tuple(r["verifier_ids"]), "votes": tuple(r["votes"]), "pixels": tuple(r["pixels"])})
        )
    return out
