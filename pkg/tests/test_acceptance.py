"""Acceptance criteria, each run at its stated tolerance.

Every test appends one PASS/FAIL line to the "acceptance criteria" section
of the terminal summary, then asserts.
"""

import json
import math
import random
import statistics

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adchain.analytics import (
    EconParams,
    node_annual_profit,
    required_nodes,
    sybil_success_fraction,
    sybil_success_monte_carlo,
    sybil_success_probability,
)
from adchain.cli import main
from adchain.protocol import Choice, PrizePool, Vote, adjudicate, compute_prize
from adchain.sim import SimConfig, run_simulation

from oracles import reference_tally, sybil_by_enumeration

pytestmark = pytest.mark.slow

BASE = SimConfig(total_nodes=100, ad_count=1000)


def sim(**kw):
    return run_simulation(BASE.replace(**kw))


def test_c1_raising_saturates(report):
    failing, slowest = [], 0.0
    for h in range(35, 101, 5):
        for v in range(11, 21):
            m = sim(honesty_rate=h / 100, verifiers_per_ad=v)
            slowest = max(slowest, m.wall_seconds)
            if m.propositions_created < 980:
                failing.append(f"(h={h},V={v}):{m.propositions_created}")
    ok = not failing and slowest < 60
    detail = f"140 cells, slowest {slowest:.1f}s; cells below 980: {', '.join(failing) or 'none'}"
    report("1 raising saturation (created >= 980 for honesty >= 35, V >= 11)", ok, detail)
    assert ok, detail


def test_c2_operating_point(report):
    trues = [sim(honesty_rate=0.85, verifiers_per_ad=15, seed=s).true_outcomes for s in range(5)]
    mean = statistics.mean(trues)
    ok = all(950 <= t <= 1000 for t in trues) and mean >= 960
    report("2 accuracy at honesty 85, V=15", ok, f"true_outcomes {trues}, mean {mean:.1f}")
    assert ok


def test_c3_accuracy_cliff(report):
    def mean_true(h, seeds=10):
        return statistics.mean(sim(honesty_rate=h, seed=s).true_outcomes for s in range(seeds))

    m100, m85, m80, m50 = mean_true(1.0), mean_true(0.85), mean_true(0.80), mean_true(0.50)
    ok = m85 - m80 > 0 and m100 >= m85 >= m50
    report("3 accuracy cliff 85 -> 80", ok, f"mean true at 100/85/80/50: {m100:.1f}/{m85:.1f}/{m80:.1f}/{m50:.1f}")
    assert ok


def test_c4_node_count_insensitive(report):
    rates = {}
    for n in range(50, 1001, 50):
        ms = [sim(total_nodes=n, honesty_rate=0.85, seed=s) for s in range(5)]
        rates[n] = statistics.mean(m.accuracy for m in ms)
    spread = (max(rates.values()) - min(rates.values())) * 100
    ok = spread <= 3
    lo, hi = min(rates, key=rates.get), max(rates, key=rates.get)
    report("4 node-count insensitivity", ok, f"spread {spread:.2f} points (min N={lo} {rates[lo]:.4f}, max N={hi} {rates[hi]:.4f})")
    assert ok


def _sybil(c, h, n):
    ms = [
        sim(total_nodes=n, verifiers_per_ad=15, honesty_rate=h, corrupted_fraction=c, sybil_rejoin=True, seed=s)
        for s in range(3)
    ]
    return statistics.mean(m.attack_success for m in ms)


def test_c5a_sybil_low_corruption(report):
    worst = {n: max((_sybil(c / 100, 1.0, n), c) for c in range(0, 46, 5)) for n in (200, 1000)}
    ok = all(v < 0.05 for v, _ in worst.values())
    detail = "; ".join(f"N={n} max {v:.3f} at {c}%" for n, (v, c) in worst.items())
    report("5a sybil success < 5% at corrupted <= 45% (honesty 100)", ok, detail)
    assert ok


def test_c5b_sybil_half(report):
    vals = {n: _sybil(0.5, 1.0, n) for n in (200, 1000)}
    ok = all(abs((1 - v) - 0.5) <= 0.10 for v in vals.values())
    report("5b ~50% correct at corrupted 50% (honesty 100)", ok,
           "; ".join(f"N={n} success {v:.3f}" for n, v in vals.items()))
    assert ok


def test_c5c_sybil_eighty(report):
    vals = {(n, c): _sybil(c / 100, 1.0, n) for n in (200, 1000) for c in range(80, 101, 5)}
    ok = all(v >= 0.99 for v in vals.values())
    worst = min(vals, key=vals.get)
    report("5c success >= 99% at corrupted >= 80% (honesty 100)", ok, f"min {vals[worst]:.3f} at N={worst[0]}, {worst[1]}%")
    assert ok


def test_c5d_sybil_seventy_with_noise(report):
    vals = {(n, c): _sybil(c / 100, 0.85, n) for n in (200, 1000) for c in range(70, 101, 5)}
    ok = all(v >= 0.99 for v in vals.values())
    worst = min(vals, key=vals.get)
    report("5d success >= 99% at corrupted >= 70% (honesty 85)", ok, f"min {vals[worst]:.3f} at N={worst[0]}, {worst[1]}%")
    assert ok


def test_c6_closed_form_oracles(report):
    exact = all(sybil_success_fraction(20, 5, j) == sybil_by_enumeration(20, 5, j) for j in range(21))
    rng = random.Random(2024)
    misses = []
    for _ in range(20):
        N = rng.randint(1, 300)
        n = rng.randint(1, min(N, 25))
        j = rng.randint(0, N)
        p = sybil_success_probability(N, n, j)
        est, se = sybil_success_monte_carlo(N, n, j, 100_000, seed=rng.getrandbits(32))
        tol = 3 * max(se, math.sqrt(p * (1 - p) / 100_000))
        if abs(est - p) > tol:
            misses.append((N, n, j, est, p))
    ok = exact and not misses
    report("6 closed form vs enumeration and Monte Carlo", ok,
           f"enumeration exact for j=0..20: {exact}; MC outside 3 SE: {misses or 'none'}")
    assert ok


CHOICES = {"T": Choice.TRUE, "F": Choice.FALSE, "A": Choice.ABSENT, "V": Choice.VOID}
_c7 = {"runs": 0, "bad": 0}


@settings(max_examples=10_000, deadline=None, database=None)
@given(
    st.text(alphabet="TFAV", max_size=20),
    st.booleans(),
    st.integers(1, 20),
    st.integers(0, 500),
    st.lists(st.integers(-30, 30), min_size=1, max_size=8),
)
def test_c7_ledger_property(choices, tie, price, fund, other_points):
    _c7["runs"] += 1
    votes = [Vote("p", f"v{i}", CHOICES[c], "x" if c == "T" else None) for i, c in enumerate(choices)]
    ids = ["sub"] + [f"v{i}" for i in range(len(choices))]
    balances = {pid: 100 for pid in ids}
    pool = PrizePool(initial_fund=fund)
    for pid in ids:
        balances[pid] -= price
    res = adjudicate(votes, "sub", price, tie)
    for d in res.deltas:
        if d.forfeited:
            pool.credit(d.stake)
        else:
            balances[d.player_id] += d.stake
    conserved = sum(balances.values()) + pool.pool == 100 * len(ids) + fund

    win, sub, rows = reference_tally(list(choices), tie)
    matches = res.outcome == win and [(d.points, d.forfeited) for d in res.deltas] == [sub] + rows

    points = {d.player_id: d.points for d in res.deltas}
    points.update({f"o{i}": p for i, p in enumerate(other_points)})
    paid = sum(compute_prize(pool.pool, points, k) for k in points)
    within = paid <= pool.pool
    if not (conserved and matches and within):
        _c7["bad"] += 1
    assert conserved and matches and within


def test_c7_report(report):
    # Runs after the property test in file order and reports its tally.
    ok = _c7["runs"] >= 10_000 and _c7["bad"] == 0
    report("7 ledger conservation / reference tally / prize bound", ok,
           f"{_c7['runs']} random adjudications, {_c7['bad']} violations")
    assert ok


def test_c8_economics(report):
    slots, nodes = required_nodes(EconParams(verifiers=15))
    b = node_annual_profit(EconParams(verifiers=15))
    ok = (
        slots == 7_500 and nodes == 100_000
        and math.isclose(b["revenue"], 40_000, rel_tol=0.05)
        and abs(b["profit"] - 17_000) <= 0.05 * 17_000
    )
    report("8 economics", ok, f"slots {slots}, nodes {nodes}, revenue {b['revenue']:.0f}, profit {b['profit']:.0f}")
    assert ok


def test_c9_rerun_byte_identical(report, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"ad_count": 60, "seed": 11}))
    results = []
    for name, extra in (("honesty-grid", []), ("node-scaling", []), ("sybil", ["--replicates", "1"])):
        first = tmp_path / name / "first"
        assert main(["experiment", name, "--config", str(cfg), "--out", str(first), *extra]) == 0
        code = main(["rerun", str(first / f"{name}.manifest.json"), "--out", str(tmp_path / name / "again")])
        same = (first / f"{name}.csv").read_bytes() == (tmp_path / name / "again" / f"{name}.csv").read_bytes()
        results.append((name, code == 0 and same))
    ok = all(r for _, r in results)
    report("9 rerun from manifest is byte-identical", ok, ", ".join(f"{n}: {'same' if r else 'DIFFERS'}" for n, r in results))
    assert ok


def test_throughput_smoke(report):
    m = sim(honesty_rate=1.0)
    rate = m.ads_per_wall_second
    report("throughput smoke (informational, target 10,000 ads/s)", None,
           f"{rate:,.0f} simulated ads/s wall-clock, {m.sim_events / m.wall_seconds:,.0f} queue events/s")
