"""Closed-form models: Sybil majority capture and the per-node economics."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from fractions import Fraction

import numpy as np

EXACT_LIMIT = 10_000


def _check_sybil(N: int, n: int, j: int) -> None:
    if not (isinstance(N, int) and isinstance(n, int) and isinstance(j, int)):
        raise TypeError("N, n and j must be integers")
    if not 0 <= j <= N:
        raise ValueError(f"need 0 <= j <= N, got j={j}, N={N}")
    if not 1 <= n <= N:
        raise ValueError(f"need 1 <= n <= N, got n={n}, N={N}")


def sybil_success_fraction(N: int, n: int, j: int) -> Fraction:
    """Exact P(strict majority of n sampled verifiers is dishonest)."""
    _check_sybil(N, n, j)
    lo = n // 2 + 1
    hits = sum(math.comb(j, i) * math.comb(N - j, n - i) for i in range(lo, min(n, j) + 1))
    return Fraction(hits, math.comb(N, n))


def _log_comb(a: int, b: int) -> float:
    return math.lgamma(a + 1) - math.lgamma(b + 1) - math.lgamma(a - b + 1)


def sybil_success_probability(N: int, n: int, j: int) -> float:
    """Hypergeometric upper tail, exact below ``EXACT_LIMIT`` nodes.

    Above the limit the terms are evaluated in log space (relative error on
    the order of 1e-12 for moderate n).
    """
    if N <= EXACT_LIMIT:
        return float(sybil_success_fraction(N, n, j))
    _check_sybil(N, n, j)
    lo = n // 2 + 1
    hi = min(n, j)
    if lo > hi:
        return 0.0
    denom = _log_comb(N, n)
    logs = [
        _log_comb(j, i) + _log_comb(N - j, n - i) - denom
        for i in range(lo, hi + 1)
        if n - i <= N - j
    ]
    if not logs:
        return 0.0
    top = max(logs)
    return min(1.0, math.exp(top) * math.fsum(math.exp(x - top) for x in logs))


def sybil_success_monte_carlo(N: int, n: int, j: int, trials: int, seed: int = 0) -> tuple[float, float]:
    """Estimate the same tail by drawing n of N nodes without replacement.

    Draws are sequential: the k-th pick is dishonest with probability
    (dishonest left) / (nodes left). All trials advance in lockstep.
    """
    _check_sybil(N, n, j)
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    bad_left = np.full(trials, j, dtype=np.int64)
    drawn_bad = np.zeros(trials, dtype=np.int64)
    for k in range(n):
        pick_bad = rng.random(trials) * (N - k) < bad_left
        drawn_bad += pick_bad
        bad_left -= pick_bad
    p_hat = float(np.mean(drawn_bad > n / 2))
    return p_hat, math.sqrt(p_hat * (1.0 - p_hat) / trials)


def probability_curve(
    N: int, n: int, js: list[int], trials: int = 0, seed: int = 0
) -> list[dict]:
    """Rows of (N, n, j, analytic, monte_carlo, std_error) for CSV output."""
    rows = []
    for j in js:
        row = {"N": N, "n": n, "j": j, "analytic": sybil_success_probability(N, n, j)}
        if trials:
            est, se = sybil_success_monte_carlo(N, n, j, trials, seed=seed + j)
            row.update(monte_carlo=est, std_error=se)
        else:
            row.update(monte_carlo=float("nan"), std_error=float("nan"))
        rows.append(row)
    return rows


@dataclass
class EconParams:
    verifiers: int = 15
    global_tps: float = 3.5e6
    per_node_capacity: float = 7_000.0
    header_bidding_revenue: float = 414e9
    pool_fraction: float = 0.01
    # Part of the yearly pool routed to the host rather than the nodes.
    host_share: float = 0.14e9
    min_sampling_pool: int = 200
    internet_cost: float = 380.0
    compute_cost: float = 4_000.0
    storage_cost: float = 18_700.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.pool_fraction > 1:
            raise ValueError("pool_fraction must be <= 1")


def required_nodes(e: EconParams) -> tuple[int, int]:
    """(verifier slots busy at any instant, recommended always-on node count).

    Each group of V concurrent slots is drawn from at least
    ``min_sampling_pool`` nodes, so the pool scales with tps / capacity.
    """
    if e.per_node_capacity <= 0:
        raise ValueError("per_node_capacity must be positive")
    slots = math.ceil(e.global_tps * e.verifiers / e.per_node_capacity - 1e-9)
    if e.verifiers == 0:
        return 0, 0
    groups = math.ceil(e.global_tps / e.per_node_capacity - 1e-9)
    return slots, groups * max(e.min_sampling_pool, e.verifiers)


def node_annual_profit(e: EconParams) -> dict[str, float]:
    _, nodes = required_nodes(e)
    if nodes <= 0:
        raise ValueError("no active nodes")
    pool = max(0.0, e.header_bidding_revenue * e.pool_fraction - e.host_share)
    revenue = pool / nodes
    costs = e.internet_cost + e.compute_cost + e.storage_cost
    return {
        "active_nodes": nodes,
        "annual_pool": pool,
        "revenue": revenue,
        "internet": e.internet_cost,
        "compute": e.compute_cost,
        "storage": e.storage_cost,
        "cost": costs,
        "profit": revenue - costs,
    }


def monthly_storage_bytes(per_node_capacity: float = 7_000.0, ad_size_bytes: int = 1_000, days: int = 30) -> float:
    return per_node_capacity * ad_size_bytes * 86_400 * days
