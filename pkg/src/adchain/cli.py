"""Command-line entry points.

Exit codes: 0 success, 1 replay divergence, 2 usage or config error,
3 internal invariant violation.
"""

from __future__ import annotations

import argparse
import datetime as dt
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

from . import __version__
from .analytics import EconParams, node_annual_profit, probability_curve, required_nodes
from .experiments import (
    HONESTY_HEADER,
    SCALING_HEADER,
    SYBIL_HEADER,
    experiment_honesty_grid,
    experiment_node_scaling,
    experiment_sybil,
    to_csv,
)
from .host import Host, HostConfig
from .sim import InvariantViolation, SimConfig, run_simulation
from .wire import record_script, replay, serve

log = logging.getLogger("adchain")

EXIT_OK, EXIT_DIVERGED, EXIT_USAGE, EXIT_INVARIANT = 0, 1, 2, 3

EXPERIMENTS = {
    "honesty-grid": HONESTY_HEADER,
    "node-scaling": SCALING_HEADER,
    "sybil": SYBIL_HEADER,
}


class UsageError(Exception):
    pass


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def load_config(path: str | None, seed: int | None = None) -> SimConfig:
    data = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"config is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise UsageError("config must be a JSON object")
    env_seed = os.environ.get("ADCHAIN_SEED")
    if env_seed is not None:
        data["seed"] = int(env_seed)
    if seed is not None:
        data["seed"] = seed
    try:
        return SimConfig.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def run_experiment(name: str, cfg: SimConfig, full_grid: bool, replicates: int | None, workers: int) -> str:
    if name == "honesty-grid":
        rows = experiment_honesty_grid(cfg, full_grid=full_grid, replicates=replicates or 1, workers=workers)
    elif name == "node-scaling":
        rows = experiment_node_scaling(cfg, replicates=replicates or 1, workers=workers)
        for row in rows:
            if "wall_events_per_sec" in row:
                log.info("N=%s V=%s wall throughput %.0f ads/s", row["nodes"], row["verifiers"], row["wall_events_per_sec"])
    elif name == "sybil":
        rows = experiment_sybil(cfg, replicates=replicates or 3, workers=workers)
    else:
        raise UsageError(f"unknown experiment {name!r}")
    return to_csv(rows, EXPERIMENTS[name])


def write_outputs(out_dir: Path, name: str, csv_text: str, manifest: dict) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{name}.csv"
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        fh.write(csv_text)
    manifest["outputs"] = {csv_path.name: _sha256(csv_path)}
    manifest["finished"] = _now()
    (out_dir / f"{name}.manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return csv_path


def cmd_experiment(args) -> int:
    cfg = load_config(args.config, args.seed)
    manifest = {
        "command": "experiment",
        "name": args.name,
        "config": asdict(cfg),
        "seed": cfg.seed,
        "full_grid": args.full_grid,
        "replicates": args.replicates,
        "started": _now(),
        "version": __version__,
    }
    csv_text = run_experiment(args.name, cfg, args.full_grid, args.replicates, args.workers)
    path = write_outputs(Path(args.out), args.name, csv_text, manifest)
    print(path)
    return EXIT_OK


def cmd_rerun(args) -> int:
    manifest = json.loads(Path(args.manifest).read_text())
    if manifest.get("command") != "experiment":
        raise UsageError("manifest does not describe an experiment run")
    try:
        cfg = SimConfig.from_dict(manifest["config"])
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    name = manifest["name"]
    csv_text = run_experiment(name, cfg, manifest["full_grid"], manifest["replicates"], args.workers)
    fresh = {**manifest, "started": _now()}
    path = write_outputs(Path(args.out), name, csv_text, fresh)
    expected = manifest.get("outputs", {}).get(path.name)
    actual = _sha256(path)
    if expected is not None and expected != actual:
        print(f"{path}: sha256 {actual} differs from manifest {expected}", file=sys.stderr)
        return EXIT_DIVERGED
    print(f"{path}: reproduced ({actual})")
    return EXIT_OK


def cmd_sybil_prob(args) -> int:
    N, n = args.N, args.n
    if args.j is not None:
        js = [args.j]
    else:
        start, stop, step = args.j_range
        if step <= 0 or start > stop:
            raise UsageError("j range must satisfy start <= stop and step > 0")
        js = list(range(start, stop + 1, step))
    for j in js:
        if not 0 <= j <= N or not 1 <= n <= N:
            raise UsageError(f"need 0 <= j <= N and 1 <= n <= N (N={N}, n={n}, j={j})")
    rows = probability_curve(N, n, js, trials=args.trials, seed=args.seed or 0)
    text = to_csv(rows, ["N", "n", "j", "analytic", "monte_carlo", "std_error"])
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "sybil-prob.csv").write_text(text, encoding="utf-8")
        print(out / "sybil-prob.csv")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_econ(args) -> int:
    overrides = {
        k: v
        for k, v in {
            "verifiers": args.verifiers,
            "global_tps": args.global_tps,
            "per_node_capacity": args.per_node_capacity,
            "header_bidding_revenue": args.revenue,
            "pool_fraction": args.pool_fraction,
            "host_share": args.host_share,
            "min_sampling_pool": args.min_sampling_pool,
            "internet_cost": args.internet_cost,
            "compute_cost": args.compute_cost,
            "storage_cost": args.storage_cost,
        }.items()
        if v is not None
    }
    try:
        e = EconParams(**overrides)
        slots, _ = required_nodes(e)
        b = node_annual_profit(e)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    print(f"{'verifier slots':<16}{slots:>16,}")
    print(f"{'active nodes':<16}{b['active_nodes']:>16,}")
    print(f"{'annual pool':<16}{b['annual_pool']:>16,.0f}")
    for key in ("revenue", "internet", "compute", "storage", "cost", "profit"):
        print(f"{key:<16}{b[key]:>16,.2f}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = load_config(args.config, args.seed)
    m = run_simulation(cfg)
    print(json.dumps({**m.deterministic_view(), "wall_seconds": round(m.wall_seconds, 3)}, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_record(args) -> int:
    cfg = load_config(args.config, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    host = Host(cfg.host_config())
    initial = host.snapshot()
    messages: list[dict] = []
    run_simulation(cfg, host=host, recorder=messages.append)
    lines, final_hash = record_script(initial, messages)
    if final_hash != host.state_hash():
        raise InvariantViolation("recorded script does not reproduce the live run")
    (out / "snapshot.json").write_text(json.dumps(initial, sort_keys=True) + "\n")
    with open(out / "script.ndjson", "w", encoding="utf-8", newline="") as fh:
        fh.writelines(lines)
    with open(out / "audit.ndjson", "w", encoding="utf-8", newline="") as fh:
        host.export_audit(fh)
    manifest = {
        "command": "record",
        "config": asdict(cfg),
        "seed": cfg.seed,
        "final_state_hash": final_hash,
        "started": _now(),
        "finished": _now(),
        "outputs": {p: _sha256(out / p) for p in ("snapshot.json", "script.ndjson", "audit.ndjson")},
        "version": __version__,
    }
    (out / "record.manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(out / "script.ndjson")
    return EXIT_OK


def cmd_replay(args) -> int:
    try:
        initial = json.loads(Path(args.snapshot).read_text())
        lines = Path(args.script).read_text().splitlines()
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(str(exc)) from None
    report = replay(initial, lines)
    if report.divergence:
        print(f"divergence at {report.divergence}", file=sys.stderr)
        return EXIT_DIVERGED
    if args.manifest:
        expected = json.loads(Path(args.manifest).read_text()).get("final_state_hash")
        if expected != report.final_hash:
            print(f"final state {report.final_hash} differs from manifest {expected}", file=sys.stderr)
            return EXIT_DIVERGED
    print(f"replayed {report.applied} events, state {report.final_hash}")
    return EXIT_OK


def cmd_serve(args) -> int:
    try:
        cfg = HostConfig(**json.loads(args.host_config)) if args.host_config else HostConfig()
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    serve(sys.stdin, sys.stdout, Host(cfg))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="adchain", description="Decentralized ad-impression verification simulator")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, out_default="out"):
        p.add_argument("--config", help="JSON document with SimConfig fields")
        p.add_argument("--out", default=out_default, help="output directory")
        p.add_argument("--seed", type=int, help="overrides ADCHAIN_SEED and the config seed")

    p = sub.add_parser("experiment", help="run one experiment grid")
    p.add_argument("name", choices=sorted(EXPERIMENTS))
    common(p)
    p.add_argument("--full-grid", action="store_true", help="honesty-grid: all 420 cells")
    p.add_argument("--replicates", type=int, help="seeds per cell")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("rerun", help="re-run an experiment from its manifest and compare")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_rerun)

    p = sub.add_parser("sybil-prob", help="majority-capture probability, analytic and Monte Carlo")
    p.add_argument("--N", type=int, required=True)
    p.add_argument("--n", type=int, required=True)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--j", type=int)
    g.add_argument("--j-range", type=int, nargs=3, metavar=("START", "STOP", "STEP"))
    p.add_argument("--trials", type=int, default=0)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sybil_prob)

    p = sub.add_parser("econ", help="per-node yearly economics")
    p.add_argument("--verifiers", type=int)
    p.add_argument("--global-tps", type=float)
    p.add_argument("--per-node-capacity", type=float)
    p.add_argument("--revenue", type=float, help="yearly header-bidding revenue")
    p.add_argument("--pool-fraction", type=float)
    p.add_argument("--host-share", type=float)
    p.add_argument("--min-sampling-pool", type=int)
    p.add_argument("--internet-cost", type=float)
    p.add_argument("--compute-cost", type=float)
    p.add_argument("--storage-cost", type=float)
    p.set_defaults(func=cmd_econ)

    p = sub.add_parser("simulate", help="run a single cell and print its metrics")
    common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("record", help="run a cell and write snapshot + replayable script")
    common(p)
    p.set_defaults(func=cmd_record)

    p = sub.add_parser("replay", help="replay a script against a snapshot")
    p.add_argument("snapshot")
    p.add_argument("script")
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("serve", help="host process speaking NDJSON on stdin/stdout")
    p.add_argument("--host-config", help="inline JSON HostConfig")
    p.set_defaults(func=cmd_serve)
    return ap


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"adchain: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InvariantViolation as exc:
        print(f"adchain: invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
