"""Grid drivers for the three experiments and their CSV emitters."""

from __future__ import annotations

import csv
import io
from concurrent.futures import ProcessPoolExecutor
from typing import Iterable, Sequence

from .sim import SimConfig, SimMetrics, derive_seed, run_simulation

HONESTY_FULL = [h / 100 for h in range(0, 101, 5)]
VERIFIERS_FULL = list(range(1, 21))
HONESTY_SUBSAMPLED = [h / 100 for h in range(0, 101, 10)]
VERIFIERS_SUBSAMPLED = [5, 11, 15, 20]
NODES = list(range(50, 1001, 50))
SCALING_VERIFIERS = [15, 19]
CORRUPTED = [c / 100 for c in range(0, 101, 5)]
SYBIL_HONESTY = [0.85, 1.0]
SYBIL_NODES = [200, 1000]

HONESTY_HEADER = ["honesty_rate", "verifiers", "propositions_created", "true_outcomes", "false_outcomes", "unraised"]
SCALING_HEADER = ["nodes", "verifiers", "accuracy", "events_per_sec"]
SYBIL_HEADER = ["corrupted_pct", "honesty", "nodes", "attack_success_rate"]


def _run(cfg: SimConfig) -> SimMetrics:
    return run_simulation(cfg)


def run_cells(configs: Sequence[SimConfig], workers: int = 1) -> list[SimMetrics]:
    """Run independent cells, preserving input order in the result."""
    if workers <= 1 or len(configs) <= 1:
        return [run_simulation(c) for c in configs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run, configs, chunksize=1))


def cell_seed(base: int, experiment: str, *key: object) -> int:
    return derive_seed(base, experiment, *key)


def _replicated(cells: list[tuple[tuple, SimConfig]], replicates: int, base_seed: int, name: str):
    out = []
    for key, cfg in cells:
        for r in range(replicates):
            out.append((key, r, cfg.replace(seed=cell_seed(base_seed, name, *key, r))))
    return out


def _mean(values: Iterable[float]) -> float:
    values = list(values)
    if len(values) == 1:
        return values[0]
    return sum(values) / len(values)


def experiment_honesty_grid(
    base: SimConfig,
    honesty: Sequence[float] | None = None,
    verifiers: Sequence[int] | None = None,
    full_grid: bool = False,
    replicates: int = 1,
    workers: int = 1,
) -> list[dict]:
    if honesty is None:
        honesty = HONESTY_FULL if full_grid else HONESTY_SUBSAMPLED
    if verifiers is None:
        verifiers = VERIFIERS_FULL if full_grid else VERIFIERS_SUBSAMPLED
    cells = []
    for h in honesty:
        for v in verifiers:
            if v > base.total_nodes:
                continue
            cells.append(((h, v), base.replace(honesty_rate=h, verifiers_per_ad=v, corrupted_fraction=0.0)))
    plan = _replicated(cells, replicates, base.seed, "honesty-grid")
    results = run_cells([c for _, _, c in plan], workers)
    grouped: dict[tuple, list[SimMetrics]] = {}
    for (key, _, _), m in zip(plan, results):
        grouped.setdefault(key, []).append(m)
    rows = []
    for (h, v), ms in grouped.items():
        rows.append({
            "honesty_rate": h,
            "verifiers": v,
            "propositions_created": _mean(m.propositions_created for m in ms),
            "true_outcomes": _mean(m.true_outcomes for m in ms),
            "false_outcomes": _mean(m.false_outcomes for m in ms),
            "unraised": _mean(m.unraised_events for m in ms),
        })
    return rows


def experiment_node_scaling(
    base: SimConfig,
    nodes: Sequence[int] = NODES,
    verifiers: Sequence[int] = SCALING_VERIFIERS,
    honesty: float = 0.85,
    replicates: int = 1,
    workers: int = 1,
) -> list[dict]:
    """Accuracy against network size.

    ``events_per_sec`` is simulated throughput (ads decided per simulated
    second) so the CSV stays reproducible; wall-clock speed goes to the log.
    Cells with N < V are reported as infeasible with empty metrics.
    """
    cells = []
    infeasible = []
    for v in verifiers:
        for n in nodes:
            if v > n:
                infeasible.append((n, v))
                continue
            cells.append(((n, v), base.replace(total_nodes=n, verifiers_per_ad=v, honesty_rate=honesty, corrupted_fraction=0.0)))
    plan = _replicated(cells, replicates, base.seed, "node-scaling")
    results = run_cells([c for _, _, c in plan], workers)
    grouped: dict[tuple, list[SimMetrics]] = {}
    for (key, _, _), m in zip(plan, results):
        grouped.setdefault(key, []).append(m)
    rows = []
    for v in verifiers:
        for n in nodes:
            if (n, v) in infeasible:
                rows.append({"nodes": n, "verifiers": v, "accuracy": "infeasible", "events_per_sec": ""})
                continue
            ms = grouped[(n, v)]
            rows.append({
                "nodes": n,
                "verifiers": v,
                "accuracy": _mean(m.accuracy for m in ms),
                "events_per_sec": _mean(m.ads_per_sim_second for m in ms),
                "wall_events_per_sec": _mean(m.ads_per_wall_second for m in ms),
            })
    return rows


def experiment_sybil(
    base: SimConfig,
    corrupted: Sequence[float] = CORRUPTED,
    honesty: Sequence[float] = SYBIL_HONESTY,
    nodes: Sequence[int] = SYBIL_NODES,
    verifiers: int = 15,
    replicates: int = 3,
    rejoin: bool = True,
    workers: int = 1,
) -> list[dict]:
    cells = []
    for n in nodes:
        for h in honesty:
            for c in corrupted:
                cfg = base.replace(
                    total_nodes=n, verifiers_per_ad=verifiers, honesty_rate=h,
                    corrupted_fraction=c, sybil_rejoin=rejoin,
                )
                cells.append(((c, h, n), cfg))
    plan = _replicated(cells, replicates, base.seed, "sybil")
    results = run_cells([c for _, _, c in plan], workers)
    grouped: dict[tuple, list[SimMetrics]] = {}
    for (key, _, _), m in zip(plan, results):
        grouped.setdefault(key, []).append(m)
    return [
        {
            "corrupted_pct": round(c * 100),
            "honesty": round(h * 100),
            "nodes": n,
            "attack_success_rate": _mean(m.attack_success for m in ms),
        }
        for (c, h, n), ms in grouped.items()
    ]


def _fmt(value) -> str:
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def to_csv(rows: Sequence[dict], header: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(row[k]) for k in header])
    return buf.getvalue()
