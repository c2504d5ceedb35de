"""Deterministic discrete-event simulation binding the host and its verifiers."""

from __future__ import annotations

import hashlib
import heapq
import math
import random
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Callable

from .agent import AgentPolicy, VerifierAgent
from .host import AssignmentError, Host, HostConfig, Rejected
from .protocol import Choice, PixelEvent

AD, PIXEL, REQUEST, VOTE, DEADLINE = range(5)


@dataclass
class SimConfig:
    total_nodes: int = 100
    verifiers_per_ad: int = 15
    honesty_rate: float = 1.0
    corrupted_fraction: float = 0.0
    ad_count: int = 1000
    ad_rate: float = 10.0
    proposition_price: int = 1
    proposition_deadline: int = 2_000
    proposition_delay: int = 1_000
    ban_threshold: int | None = -5
    initial_balance: int = 10_000
    initial_pcd: int = 100
    tie_to_true: bool = True
    initial_fund: int = 0
    seed: int = 0
    # Pixel delivery delay is uniform on [0, delivery_jitter] ms; it decides who submits first.
    delivery_jitter: int = 50
    # Verifiers answer this long after a proposition is created (plus jitter).
    vote_delay: int = 500
    bogus_fraction: float = 0.0
    # A banned corrupted identity is replaced by a fresh one (the attacker keeps its share).
    sybil_rejoin: bool = False

    def __post_init__(self):
        if self.total_nodes < 1 or self.verifiers_per_ad < 1:
            raise ValueError("total_nodes and verifiers_per_ad must be >= 1")
        if self.verifiers_per_ad > self.total_nodes:
            raise ValueError(f"infeasible: V={self.verifiers_per_ad} > N={self.total_nodes}")
        for name in ("honesty_rate", "corrupted_fraction", "bogus_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.ad_rate <= 0:
            raise ValueError("ad_rate must be positive")
        if self.ad_count < 0:
            raise ValueError("ad_count must be nonnegative")
        if self.vote_delay + self.delivery_jitter > self.proposition_deadline:
            raise ValueError("votes would land after the deadline")

    def host_config(self) -> HostConfig:
        return HostConfig(
            verifiers_per_ad=self.verifiers_per_ad,
            proposition_price=self.proposition_price,
            proposition_deadline=self.proposition_deadline,
            proposition_delay=self.proposition_delay,
            ban_threshold=self.ban_threshold,
            initial_balance=self.initial_balance,
            initial_pcd=self.initial_pcd,
            tie_to_true=self.tie_to_true,
            seed=self.seed,
            initial_fund=self.initial_fund,
        )

    def replace(self, **changes) -> "SimConfig":
        return SimConfig(**{**asdict(self), **changes})

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "SimConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**data)


@dataclass
class SimMetrics:
    ad_count: int = 0
    propositions_created: int = 0
    true_outcomes: int = 0
    false_outcomes: int = 0
    unraised_events: int = 0
    assignment_failures: int = 0
    void_votes: int = 0
    bans: int = 0
    rejoins: int = 0
    duplicate_requests: int = 0
    genuine_events: int = 0
    genuine_true: int = 0
    redemptions: int = 0
    paid_out: int = 0
    sim_events: int = 0
    sim_horizon_ms: int = 0
    decision_latency_ms: dict[str, float] = field(default_factory=dict)
    wall_seconds: float = 0.0
    cell: dict[str, Any] = field(default_factory=dict)

    @property
    def accuracy(self) -> float:
        return self.true_outcomes / self.ad_count if self.ad_count else 0.0

    @property
    def attack_success(self) -> float:
        """Fraction of genuine impressions that never got counted."""
        if not self.genuine_events:
            return 0.0
        return 1.0 - self.genuine_true / self.genuine_events

    @property
    def ads_per_sim_second(self) -> float:
        if self.sim_horizon_ms <= 0:
            return 0.0
        return self.ad_count / (self.sim_horizon_ms / 1000.0)

    @property
    def ads_per_wall_second(self) -> float:
        return self.ad_count / self.wall_seconds if self.wall_seconds > 0 else float("inf")

    def deterministic_view(self) -> dict[str, Any]:
        out = asdict(self)
        out.pop("wall_seconds")
        return out


class EventQueue:
    """Time-ordered queue; equal timestamps pop in insertion order."""

    def __init__(self):
        self._heap: list[tuple] = []
        self._seq = 0

    def __len__(self):
        return len(self._heap)

    def push(self, t: int, kind: int, *payload) -> None:
        heapq.heappush(self._heap, (t, self._seq, kind, payload))
        self._seq += 1

    def pop(self) -> tuple[int, int, tuple]:
        t, _, kind, payload = heapq.heappop(self._heap)
        return t, kind, payload


class InvariantViolation(RuntimeError):
    pass


def derive_seed(*parts: object) -> int:
    key = "/".join(map(str, parts)).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "big")


def gen_ad_stream(count: int, rate: float, rng: random.Random, start: int = 0) -> list[PixelEvent]:
    """``count`` fresh impressions spaced exactly 1/rate seconds apart."""
    step = 1000.0 / rate
    return [
        PixelEvent(
            ad_id=f"ad{i:07d}",
            user_id=f"u{rng.getrandbits(64):016x}",
            timestamp=start + round(i * step),
        )
        for i in range(count)
    ]


def _percentiles(values: list[int]) -> dict[str, float]:
    if not values:
        return {}
    s = sorted(values)

    def q(p):
        k = min(len(s) - 1, max(0, math.ceil(p * len(s)) - 1))
        return float(s[k])

    return {"p50": q(0.5), "p95": q(0.95), "p99": q(0.99), "max": float(s[-1])}


def run_simulation(
    config: SimConfig,
    host: Host | None = None,
    recorder: Callable[[dict], None] | None = None,
) -> SimMetrics:
    """Run one cell to quiescence and return its metrics.

    ``host`` may be any object with the Host call surface (e.g. a remote
    proxy). ``recorder`` receives every host-bound message in order.
    """
    wall0 = time.perf_counter()
    cfg = config
    host = host if host is not None else Host(cfg.host_config())
    rng = random.Random(derive_seed(cfg.seed, "sim"))
    rec = recorder

    def call(msg: Callable[[], dict], fn, *args):
        if rec is not None:
            rec(msg())
        return fn(*args)

    agents: dict[str, VerifierAgent] = {}

    def add_agent(pid: str, corrupted: bool) -> None:
        call(lambda: {"type": "register", "player_id": pid}, host.register_player, pid)
        policy = AgentPolicy(cfg.honesty_rate, corrupted)
        agents[pid] = VerifierAgent(pid, policy, seed=derive_seed(cfg.seed, "agent", pid))

    ids = [f"n{i:05d}" for i in range(cfg.total_nodes)]
    n_bad = math.floor(cfg.corrupted_fraction * cfg.total_nodes + 1e-9)
    bad = set(rng.sample(ids, n_bad))
    for pid in ids:
        add_agent(pid, pid in bad)

    m = SimMetrics(ad_count=cfg.ad_count)
    stream = gen_ad_stream(cfg.ad_count, cfg.ad_rate, rng)
    bogus = {e.ad_id for e in stream if cfg.bogus_fraction and rng.random() < cfg.bogus_fraction}
    m.genuine_events = cfg.ad_count - len(bogus)

    q = EventQueue()
    for ev in stream:
        q.push(ev.timestamp, AD, ev)

    raised: set[str] = set()
    served_at: dict[str, int] = {}
    props = {}
    latencies = []
    jitter = cfg.delivery_jitter
    now = 0

    def settle(pids, now):
        for pid in pids:
            p = host.player(pid)
            if p.banned:
                continue
            if p.pcd == 0:
                m.paid_out += call(lambda: {"type": "redeem", "player_id": pid, "now": now}, host.redeem, pid)
                m.redemptions += 1

    while q:
        now, kind, payload = q.pop()
        m.sim_events += 1
        if kind == AD:
            (ev,) = payload
            try:
                reg = call(lambda: {"type": "assign", "ad_id": ev.ad_id, "now": now}, host.assign_verifiers, ev.ad_id, now)
            except AssignmentError:
                m.assignment_failures += 1
                continue
            served_at[ev.ad_id] = now
            call(lambda: {"type": "pixel", **asdict(ev)}, host.receive_pixel, ev)
            for vid in reg.verifier_ids:
                agents[vid].assign(ev.ad_id)
            # A bogus impression only ever reaches one endpoint.
            recipients = reg.verifier_ids[:1] if ev.ad_id in bogus else reg.verifier_ids
            for k, vid in enumerate(recipients):
                q.push(now + rng.randint(0, jitter), PIXEL, vid, PixelEvent(ev.ad_id, ev.user_id, ev.timestamp, pixel_index=k))
        elif kind == PIXEL:
            vid, ev = payload
            req = agents[vid].on_pixel_event(ev)
            if req is not None:
                q.push(now, REQUEST, req)
        elif kind == REQUEST:
            (req,) = payload
            try:
                prop = call(
                    lambda: {"type": "request", **asdict(req), "now": now},
                    host.submit_proposition_request, req, now,
                )
            except Rejected as exc:
                if exc.reason == "duplicate":
                    m.duplicate_requests += 1
                continue
            m.propositions_created += 1
            raised.add(prop.ad_id)
            props[prop.proposition_id] = prop
            for vid in prop.verifier_ids:
                if vid != prop.submitter_id:
                    q.push(now + cfg.vote_delay + rng.randint(0, jitter), VOTE, vid, prop.proposition_id)
            q.push(prop.deadline, DEADLINE, prop.proposition_id)
            settle([prop.submitter_id], now)
        elif kind == VOTE:
            vid, pid = payload
            agent = agents[vid]
            prop = props[pid]
            vote = agent.on_proposition(prop, now)
            if vote is None:
                continue
            try:
                cast = call(
                    lambda: {"type": "vote", "proposition_id": pid, "player_id": vid,
                     "choice": vote.choice.value, "proof": vote.proof, "now": now},
                    host.submit_vote, pid, vid, vote.choice, vote.proof, now,
                )
            except Rejected:
                continue
            if cast.choice is Choice.VOID:
                m.void_votes += 1
        elif kind == DEADLINE:
            (pid,) = payload
            prop = props.pop(pid)
            result = call(lambda: {"type": "close", "proposition_id": pid, "now": now}, host.close_proposition, pid, now)
            latencies.append(now - served_at[prop.ad_id])
            if result.outcome:
                m.true_outcomes += 1
                if prop.ad_id not in bogus:
                    m.genuine_true += 1
            else:
                m.false_outcomes += 1
            if cfg.sybil_rejoin:
                for d in result.deltas:
                    a = agents[d.player_id]
                    if a.policy.corrupted and host.player(d.player_id).banned and not getattr(a, "replaced", False):
                        a.replaced = True
                        add_agent(f"s{m.rejoins:06d}", True)
                        m.rejoins += 1
            settle([d.player_id for d in result.deltas], now)

    m.unraised_events = cfg.ad_count - len(raised)
    m.bans = sum(1 for pid in agents if host.player(pid).banned)
    m.sim_horizon_ms = now
    m.decision_latency_ms = _percentiles(latencies)
    if m.propositions_created != m.true_outcomes + m.false_outcomes:
        raise InvariantViolation("created != true + false after drain")
    if m.propositions_created + m.unraised_events != cfg.ad_count:
        raise InvariantViolation("created + unraised != ad_count")
    if isinstance(host, Host) and host.conservation_gap() != 0:
        raise InvariantViolation(f"currency leak of {host.conservation_gap()}")
    m.wall_seconds = time.perf_counter() - wall0
    return m
