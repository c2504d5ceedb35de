"""Decentralized ad-impression verification: protocol, host, agents, simulation."""

__version__ = "0.1.0"

from .protocol import (  # noqa: E402
    AdjudicationResult,
    Choice,
    PixelEvent,
    Player,
    PrizePool,
    Proposition,
    PropositionRequest,
    Vote,
    adjudicate,
    check_ban,
    compute_prize,
    expected_vote_payoff,
    hash_user_id,
)
from .host import Host, HostConfig, Rejected  # noqa: E402
from .agent import AgentPolicy, VerifierAgent  # noqa: E402
from .sim import SimConfig, SimMetrics, run_simulation  # noqa: E402
