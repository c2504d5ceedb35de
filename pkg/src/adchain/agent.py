"""Player-side logic: pixel intake, proposition requests, reverse-lookup voting."""

from __future__ import annotations

import bisect
import logging
import random
from dataclasses import dataclass
from typing import Callable

from .protocol import (
    Choice,
    PixelEvent,
    Proposition,
    PropositionRequest,
    Vote,
    hash_user_id,
)

log = logging.getLogger(__name__)


def impressions_only(event: PixelEvent) -> bool:
    return event.interaction == "impression"


@dataclass
class AgentPolicy:
    honesty_rate: float = 1.0
    corrupted: bool = False

    def __post_init__(self):
        if not 0.0 <= self.honesty_rate <= 1.0:
            raise ValueError(f"honesty_rate out of range: {self.honesty_rate}")

    @property
    def effective_honesty(self) -> float:
        return 0.0 if self.corrupted else self.honesty_rate


class LocalAdStore:
    """Per-ad, time-ordered pixel events."""

    def __init__(self, retention: int | None = None):
        self.retention = retention
        self._times: dict[str, list[int]] = {}
        self._events: dict[str, list[PixelEvent]] = {}

    def __len__(self):
        return sum(len(v) for v in self._events.values())

    def add(self, event: PixelEvent) -> None:
        times = self._times.setdefault(event.ad_id, [])
        events = self._events.setdefault(event.ad_id, [])
        i = bisect.bisect_right(times, event.timestamp)
        times.insert(i, event.timestamp)
        events.insert(i, event)

    def window(self, ad_id: str, t_a: int, t_b: int) -> list[PixelEvent]:
        times = self._times.get(ad_id)
        if not times:
            return []
        lo = bisect.bisect_left(times, t_a)
        hi = bisect.bisect_right(times, t_b)
        return self._events[ad_id][lo:hi]

    def all_events(self) -> list[PixelEvent]:
        return [e for evs in self._events.values() for e in evs]

    def purge(self, now: int) -> int:
        if self.retention is None:
            return 0
        cutoff = now - self.retention
        dropped = 0
        for ad_id in list(self._times):
            times = self._times[ad_id]
            k = bisect.bisect_left(times, cutoff)
            if k:
                del times[:k]
                del self._events[ad_id][:k]
                dropped += k
            if not times:
                del self._times[ad_id]
                del self._events[ad_id]
        return dropped


class VerifierAgent:
    """One node's reactor. Pure function of its event history, policy and seed."""

    def __init__(
        self,
        player_id: str,
        policy: AgentPolicy | None = None,
        seed: int = 0,
        valid_ad: Callable[[PixelEvent], bool] = impressions_only,
        retention: int | None = None,
    ):
        self.player_id = player_id
        self.policy = policy or AgentPolicy()
        self.rng = random.Random(seed)
        self.valid_ad = valid_ad
        self.store = LocalAdStore(retention)
        self.assigned: set[str] = set()
        self.unassigned_events = 0
        self.requests_emitted = 0

    def assign(self, ad_id: str) -> None:
        self.assigned.add(ad_id)

    def on_pixel_event(self, event: PixelEvent) -> PropositionRequest | None:
        if event.ad_id not in self.assigned:
            self.unassigned_events += 1
            log.warning("%s: pixel for unassigned ad %s", self.player_id, event.ad_id)
            return None
        # Stored even when the emission is skipped; audits need it.
        self.store.add(event)
        if self.policy.corrupted or not self.valid_ad(event):
            return None
        if self.rng.random() >= self.policy.honesty_rate:
            return None
        self.requests_emitted += 1
        return PropositionRequest(
            ad_id=event.ad_id,
            user_id=event.user_id,
            user_hash=hash_user_id(event.user_id),
            timestamp=event.timestamp,
            player_id=self.player_id,
        )

    def lookup(self, prop: Proposition) -> str | None:
        """Reverse lookup: a stored user id in the window hashing to the commitment."""
        for event in self.store.window(prop.ad_id, prop.t_a, prop.t_b):
            if hash_user_id(event.user_id) == prop.user_hash:
                return event.user_id
        return None

    def on_proposition(self, prop: Proposition, now: int) -> Vote | None:
        """Vote on ``prop``; None means the agent skipped the task (Absent)."""
        if self.policy.corrupted:
            return Vote(prop.proposition_id, self.player_id, Choice.FALSE)
        if self.rng.random() >= self.policy.honesty_rate:
            return None
        user_id = self.lookup(prop)
        if user_id is None:
            return Vote(prop.proposition_id, self.player_id, Choice.FALSE)
        return Vote(prop.proposition_id, self.player_id, Choice.TRUE, user_id)
