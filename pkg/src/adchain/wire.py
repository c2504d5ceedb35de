"""NDJSON host protocol: message application, serving, remote proxy, replay.

Inbound message types: register, assign, pixel, request, vote, close, redeem,
query. The host answers every inbound message with one ``result`` message.
``proposition`` messages are the host-to-agent broadcast of a new
proposition; replay treats them as informational.
"""

from __future__ import annotations

import json
import subprocess
import sys
from dataclasses import asdict, dataclass
from typing import IO, Any, Iterable, Iterator

from .host import AdRegistration, AssignmentError, Host, HostConfig, Rejected, canonical_json
from .protocol import AdjudicationResult, Choice, Delta, PixelEvent, Player, Proposition, PropositionRequest, Status, Vote

INBOUND = {"register", "assign", "pixel", "request", "vote", "close", "redeem", "query"}


def encode(msg: dict[str, Any]) -> str:
    return canonical_json(msg) + "\n"


def _prop_dict(p: Proposition) -> dict:
    return {**asdict(p), "verifier_ids": list(p.verifier_ids), "status": p.status.value}


def _prop_from(d: dict) -> Proposition:
    return Proposition(**{**d, "verifier_ids": tuple(d["verifier_ids"]), "status": Status(d["status"])})


def _dispatch(host: Host, msg: dict) -> dict:
    kind = msg["type"]
    if kind == "register":
        return {"player": asdict(host.register_player(msg["player_id"]))}
    if kind == "assign":
        reg = host.assign_verifiers(msg["ad_id"], msg.get("now", 0))
        return {"ad_id": reg.ad_id, "verifier_ids": list(reg.verifier_ids), "created_at": reg.created_at}
    if kind == "pixel":
        host.receive_pixel(PixelEvent(msg["ad_id"], msg["user_id"], msg["timestamp"], msg.get("interaction", "impression"), msg.get("pixel_index", 0)))
        return {}
    if kind == "request":
        req = PropositionRequest(msg["ad_id"], msg["user_id"], msg["user_hash"], msg["timestamp"], msg["player_id"])
        return {"proposition": _prop_dict(host.submit_proposition_request(req, msg["now"]))}
    if kind == "vote":
        vote = host.submit_vote(msg["proposition_id"], msg["player_id"], msg["choice"], msg.get("proof"), msg["now"])
        return {"choice": vote.choice.value}
    if kind == "close":
        res = host.close_proposition(msg["proposition_id"], msg["now"])
        return {
            "outcome": res.outcome,
            "trues": res.trues,
            "falses": res.falses,
            "deltas": [asdict(d) for d in res.deltas],
        }
    if kind == "redeem":
        return {"payout": host.redeem(msg["player_id"])}
    if kind == "query":
        return {"player": asdict(host.player(msg["player_id"]))}
    raise Rejected("bad message", kind)


def apply_message(host: Host, msg: dict, seq: int = 0, with_hash: bool = False) -> dict:
    """Apply one inbound message; never raises for protocol rejections."""
    out: dict[str, Any] = {"type": "result", "seq": seq}
    try:
        out.update(_dispatch(host, msg))
        out["ok"] = True
    except Rejected as exc:
        out.update(ok=False, error=type(exc).__name__, reason=exc.reason, detail=str(exc))
    except (KeyError, TypeError, ValueError) as exc:
        out.update(ok=False, error="BadMessage", reason="bad message", detail=repr(exc))
    if with_hash:
        out["state_hash"] = host.state_hash()
    return out


def serve(instream: IO[str], outstream: IO[str], host: Host) -> int:
    """Host side of the multi-process mode: one result line per inbound line."""
    n = 0
    for line in instream:
        if not line.strip():
            continue
        msg = json.loads(line)
        reply = apply_message(host, msg, seq=n, with_hash=bool(msg.get("hash")))
        outstream.write(encode(reply))
        outstream.flush()
        n += 1
    return n


class RemoteHost:
    """Proxy with the Host call surface, backed by ``python -m adchain serve``."""

    def __init__(self, config: HostConfig, python: str = sys.executable):
        self.config = config
        self.proc = subprocess.Popen(
            [python, "-m", "adchain", "serve", "--host-config", json.dumps(asdict(config))],
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            text=True,
            bufsize=1,
        )
        self.messages = 0

    def _call(self, msg: dict) -> dict:
        self.proc.stdin.write(encode(msg))
        self.proc.stdin.flush()
        line = self.proc.stdout.readline()
        if not line:
            raise RuntimeError("host process closed the stream")
        self.messages += 1
        reply = json.loads(line)
        if not reply["ok"]:
            cls = AssignmentError if reply.get("error") == "AssignmentError" else Rejected
            raise cls(reply["reason"], reply.get("detail", ""))
        return reply

    def close(self) -> None:
        if self.proc.poll() is None:
            self.proc.stdin.close()
            self.proc.wait(timeout=30)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def register_player(self, player_id: str) -> Player:
        return Player(**self._call({"type": "register", "player_id": player_id})["player"])

    def player(self, player_id: str) -> Player:
        return Player(**self._call({"type": "query", "player_id": player_id})["player"])

    def assign_verifiers(self, ad_id: str, now: int = 0) -> AdRegistration:
        r = self._call({"type": "assign", "ad_id": ad_id, "now": now})
        return AdRegistration(r["ad_id"], tuple(r["verifier_ids"]), r["created_at"])

    def receive_pixel(self, event: PixelEvent) -> None:
        self._call({"type": "pixel", **asdict(event)})

    def submit_proposition_request(self, req: PropositionRequest, now: int) -> Proposition:
        return _prop_from(self._call({"type": "request", **asdict(req), "now": now})["proposition"])

    def submit_vote(self, proposition_id, player_id, choice, proof, now) -> Vote:
        r = self._call({
            "type": "vote", "proposition_id": proposition_id, "player_id": player_id,
            "choice": Choice(choice).value, "proof": proof, "now": now,
        })
        return Vote(proposition_id, player_id, Choice(r["choice"]), proof if r["choice"] == "true" else None)

    def close_proposition(self, proposition_id: str, now: int) -> AdjudicationResult:
        r = self._call({"type": "close", "proposition_id": proposition_id, "now": now})
        return AdjudicationResult(r["outcome"], tuple(Delta(**d) for d in r["deltas"]), r["trues"], r["falses"])

    def redeem(self, player_id: str) -> int:
        return self._call({"type": "redeem", "player_id": player_id})["payout"]


def read_ndjson(lines: Iterable[str]) -> Iterator[tuple[int, dict]]:
    for lineno, line in enumerate(lines, 1):
        if line.strip():
            yield lineno, json.loads(line)


def record_script(initial: dict, messages: list[dict]) -> tuple[list[str], str]:
    """Pair each inbound message with its result (carrying the state hash).

    Returns the NDJSON lines and the final state hash.
    """
    host = Host.from_snapshot(initial)
    lines = []
    for seq, msg in enumerate(messages):
        lines.append(encode(msg))
        lines.append(encode(apply_message(host, msg, seq=seq, with_hash=True)))
    return lines, host.state_hash()


@dataclass
class ReplayReport:
    applied: int
    final_hash: str
    divergence: str | None = None


def replay(initial: dict, lines: Iterable[str]) -> ReplayReport:
    """Re-apply a script to a snapshot and stop at the first divergent event."""
    host = Host.from_snapshot(initial)
    seq = 0
    last: tuple[int, dict, dict] | None = None
    for lineno, msg in read_ndjson(lines):
        kind = msg.get("type")
        if kind in INBOUND:
            got = apply_message(host, msg, seq=seq, with_hash=True)
            last = (lineno, msg, got)
            seq += 1
        elif kind == "result" and last is not None:
            at, sent, got = last
            for key in ("ok", "state_hash"):
                if key in msg and msg[key] != got.get(key):
                    return ReplayReport(
                        seq, host.state_hash(),
                        f"event #{got['seq']} (line {at}, type {sent['type']}): {key} differs "
                        f"(recorded {msg[key]!r}, replayed {got.get(key)!r})",
                    )
            last = None
    return ReplayReport(seq, host.state_hash())
