import io
import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adchain.host import AssignmentError, Host, HostConfig, Rejected, load_audit
from adchain.protocol import Choice, PixelEvent, PropositionRequest, Status, hash_user_id

from oracles import reference_tally


def make_host(n_players=15, v=15, **cfg):
    host = Host(HostConfig(verifiers_per_ad=v, **cfg))
    for i in range(n_players):
        host.register_player(f"n{i:03d}")
    return host


def request(host, ad_id, player_id, user_id="alice", ts=5000, now=5000, user_hash=None):
    req = PropositionRequest(ad_id, user_id, user_hash or hash_user_id(user_id), ts, player_id)
    return host.submit_proposition_request(req, now)


def ledger(host):
    return (
        {p.player_id: (p.balance, p.points, p.pcd) for p in host.players.values()},
        host.pool.pool,
        host.escrow_total(),
    )


def test_register_defaults_and_duplicates():
    host = Host(HostConfig(initial_balance=10_000))
    p = host.register_player("a")
    assert (p.balance, p.points, p.pcd, p.banned) == (10_000, 0, 100, False)
    with pytest.raises(Rejected):
        host.register_player("a")


def test_banned_id_cannot_register_again():
    # Scripted: invalid requests drive a player under the threshold, then it tries to come back.
    host = make_host(n_players=3, v=3)
    host.assign_verifiers("ad1")
    for _ in range(3):
        with pytest.raises(Rejected, match="invalid hash"):
            request(host, "ad1", "n000", user_hash="00" * 32)
    assert host.players["n000"].banned
    assert "n000" in host.banned_ids
    with pytest.raises(Rejected, match="banned"):
        host.register_player("n000")


def test_assignment_picks_distinct_eligible_players():
    host = make_host(n_players=100, v=15)
    reg = host.assign_verifiers("ad1")
    assert len(reg.verifier_ids) == 15 == len(set(reg.verifier_ids))
    assert set(reg.verifier_ids) <= set(host.players)


def test_assignment_whole_pool_and_shortfall():
    host = make_host(n_players=15, v=15)
    assert sorted(host.assign_verifiers("ad1").verifier_ids) == sorted(host.players)
    host.players["n000"].banned = True
    host._eligible = None
    with pytest.raises(AssignmentError):
        host.assign_verifiers("ad2")


def test_assignment_is_deterministic():
    a = make_host(n_players=100, v=15, seed=7).assign_verifiers("ad9")
    b = make_host(n_players=100, v=15, seed=7).assign_verifiers("ad9")
    c = make_host(n_players=100, v=15, seed=8).assign_verifiers("ad9")
    assert a.verifier_ids == b.verifier_ids
    assert a.verifier_ids != c.verifier_ids


def test_request_builds_window_and_deadline():
    host = make_host(n_players=5, v=5)
    host.assign_verifiers("ad1")
    prop = request(host, "ad1", "n001", ts=5000, now=5000)
    assert (prop.t_a, prop.t_b) == (4000, 6000)
    assert prop.deadline == 7000
    assert prop.submitter_id == "n001" and "n001" in prop.verifier_ids
    assert prop.user_hash == hash_user_id("alice")
    assert "alice" not in json.dumps(host.snapshot()["propositions"])
    # everyone escrowed one price unit, submitter's countdown moved
    assert all(p.balance == 9_999 for p in host.players.values())
    assert host.players["n001"].pcd == 99


def test_invalid_hash_penalized():
    host = make_host(n_players=5, v=5)
    host.assign_verifiers("ad1")
    with pytest.raises(Rejected, match="invalid hash"):
        request(host, "ad1", "n002", user_hash=hash_user_id("mallory"))
    p = host.players["n002"]
    assert (p.points, p.balance) == (-2, 9_999)
    assert host.pool.pool == 1
    assert host.conservation_gap() == 0


def test_duplicate_request_rejected_without_side_effects():
    host = make_host(n_players=5, v=5)
    host.assign_verifiers("ad1")
    request(host, "ad1", "n000", ts=5000, now=5000)
    before = ledger(host)
    with pytest.raises(Rejected, match="duplicate"):
        request(host, "ad1", "n003", ts=5010, now=5010)
    assert ledger(host) == before


def test_request_guards():
    host = make_host(n_players=6, v=5)
    reg = host.assign_verifiers("ad1")
    outsider = next(p for p in host.players if p not in reg.verifier_ids)
    with pytest.raises(Rejected, match="not a verifier"):
        request(host, "ad1", outsider)
    with pytest.raises(Rejected, match="not a verifier"):
        request(host, "nope", reg.verifier_ids[0])
    broke = host.players[reg.verifier_ids[1]]
    broke.balance = 0
    with pytest.raises(Rejected, match="insufficient"):
        request(host, "ad1", broke.player_id)


def test_votes_classified():
    host = make_host(n_players=4, v=4)
    host.assign_verifiers("ad1")
    prop = request(host, "ad1", "n000", now=5000)
    assert host.submit_vote(prop.proposition_id, "n001", "true", "alice", 5100).choice is Choice.TRUE
    assert host.submit_vote(prop.proposition_id, "n002", "true", "bob", 5100).choice is Choice.VOID
    with pytest.raises(Rejected, match="late"):
        host.submit_vote(prop.proposition_id, "n003", "false", None, prop.deadline + 1)
    with pytest.raises(Rejected, match="double"):
        host.submit_vote(prop.proposition_id, "n001", "false", None, 5200)
    with pytest.raises(Rejected):
        host.submit_vote(prop.proposition_id, "n000", "true", "alice", 5200)
    res = host.close_proposition(prop.proposition_id, prop.deadline)
    votes = {v["voter_id"]: v["choice"] for v in host.audit[-1].votes}
    assert votes["n003"] == "absent"
    # 2 True (submitter + n001) vs 1 Absent; the void vote is out of the tally.
    assert res.outcome and (res.trues, res.falses) == (2, 1)


def test_vote_on_deadline_is_on_time():
    host = make_host(n_players=3, v=3)
    host.assign_verifiers("ad1")
    prop = request(host, "ad1", "n000")
    host.submit_vote(prop.proposition_id, "n001", "false", None, prop.deadline)


def test_unanimous_close_counts_impression():
    host = make_host()
    host.assign_verifiers("ad1")
    prop = request(host, "ad1", "n000")
    for pid in prop.verifier_ids:
        if pid != "n000":
            host.submit_vote(prop.proposition_id, pid, "true", "alice", 5500)
    res = host.close_proposition(prop.proposition_id, prop.deadline)
    assert res.outcome
    assert host.impression_count("ad1") == 1
    assert host.players["n000"].points == 4
    assert all(host.players[p].points == 1 for p in prop.verifier_ids if p != "n000")
    assert all(p.balance == 10_000 for p in host.players.values())
    assert all(host.players[p].pcd == 99 for p in prop.verifier_ids)


def test_everyone_absent_sinks_the_submitter():
    host = make_host()
    host.assign_verifiers("ad1")
    prop = request(host, "ad1", "n000")
    with pytest.raises(Rejected, match="before deadline"):
        host.close_proposition(prop.proposition_id, prop.deadline - 1)
    res = host.close_proposition(prop.proposition_id, prop.deadline)
    win, (sub_pts, _), rows = reference_tally(["A"] * 14)
    assert res.outcome is win is False
    assert (res.trues, res.falses) == (1, 14)
    assert host.players["n000"].points == sub_pts == -2
    assert host.players["n000"].balance == 9_999
    assert host.pool.pool == 1
    assert host.impression_count("ad1") == 0
    with pytest.raises(Rejected, match="already decided"):
        host.close_proposition(prop.proposition_id, prop.deadline)


def test_ban_after_minus_four_to_minus_six():
    host = make_host(n_players=16, v=15, seed=3)
    host.assign_verifiers("ad1")
    reg = host.registrations["ad1"]
    sub = host.players[reg.verifier_ids[0]]
    sub.points = -4
    prop = request(host, "ad1", sub.player_id)
    host.close_proposition(prop.proposition_id, prop.deadline)
    assert sub.points == -6 and sub.banned
    assert len(host.eligible()) == 15
    later = host.assign_verifiers("ad2")
    assert sub.player_id not in later.verifier_ids


def test_redeem_pays_share_and_resets():
    host = make_host(n_players=3, v=3, initial_fund=100)
    a, b, c = host.players.values()
    a.pcd, a.points = 0, 30
    b.points, c.points = 20, -7
    assert host.redeem(a.player_id) == 60
    assert host.pool.pool == 40
    assert (a.points, a.pcd) == (0, 100)
    assert host.conservation_gap() == 0


def test_redeem_nonpositive_and_countdown():
    host = make_host(n_players=2, v=2, initial_fund=100)
    a, b = host.players.values()
    a.pcd, a.points = 0, -2
    assert host.redeem(a.player_id) == 0
    assert (a.points, a.pcd) == (0, 100)
    b.pcd = 3
    with pytest.raises(Rejected, match="countdown"):
        host.redeem(b.player_id)


def test_impression_count_unknown_and_empty():
    host = make_host(n_players=3, v=3)
    host.assign_verifiers("ad1")
    assert host.impression_count("ad1") == 0
    with pytest.raises(Rejected):
        host.impression_count("ad404")


def _settle_true(host, ad_id, now, user="alice"):
    prop = request(host, ad_id, host.registrations[ad_id].verifier_ids[0], user_id=user, ts=now, now=now)
    host.close_proposition(prop.proposition_id, prop.deadline)
    return prop


def test_purge_keeps_counters():
    host = make_host(n_players=3, v=1, retention=1_000)
    host.assign_verifiers("ad1")
    host.assign_verifiers("ad2")
    _settle_true(host, "ad1", 0)
    _settle_true(host, "ad2", 10_000)
    assert host.purge_expired(0) == 0
    assert host.purge_expired(3_001) == 1
    assert host.purge_expired(10**9) == 1
    assert host.audit == []
    assert host.impression_count("ad1") == host.impression_count("ad2") == 1


def test_audit_replays_to_same_outcome_and_exports():
    host = make_host(n_players=7, v=7)
    host.assign_verifiers("ad1")
    host.receive_pixel(PixelEvent("ad1", "alice", 5000))
    prop = request(host, "ad1", "n000")
    host.submit_vote(prop.proposition_id, "n001", "true", "alice", 5600)
    host.submit_vote(prop.proposition_id, "n002", "false", None, 5600)
    host.submit_vote(prop.proposition_id, "n003", "true", "eve", 5600)
    res = host.close_proposition(prop.proposition_id, prop.deadline)
    buf = io.StringIO()
    assert host.export_audit(buf) == 1
    (record,) = load_audit(buf.getvalue().splitlines())
    assert record.replay() == res
    assert record.pixels[0]["user_id"] == "alice"


def test_snapshot_roundtrip_mid_flight():
    host = make_host(n_players=6, v=4)
    host.assign_verifiers("ad1")
    prop = request(host, "ad1", host.registrations["ad1"].verifier_ids[0])
    host.submit_vote(prop.proposition_id, prop.verifier_ids[1], "true", "alice", 5200)
    clone = Host.from_snapshot(json.loads(host.to_json()))
    assert clone.state_hash() == host.state_hash()
    a = host.close_proposition(prop.proposition_id, prop.deadline)
    b = clone.close_proposition(prop.proposition_id, prop.deadline)
    assert a == b and clone.state_hash() == host.state_hash()


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32), st.integers(1, 7))
def test_property_random_scripts_conserve_currency(seed, v):
    rng = random.Random(seed)
    host = make_host(n_players=12, v=v, initial_pcd=3, initial_fund=50)
    for k in range(30):
        now = k * 10_000
        if len(host.eligible()) < v:
            host.register_player(f"late{k}")
            continue
        reg = host.assign_verifiers(f"ad{k}", now)
        sub = rng.choice(reg.verifier_ids)
        user = f"user{k}"
        try:
            prop = request(host, f"ad{k}", sub, user_id=user, ts=now, now=now,
                           user_hash=None if rng.random() < 0.9 else "ff" * 32)
        except Rejected:
            assert host.conservation_gap() == 0
            continue
        for pid in prop.verifier_ids:
            if pid == sub or host.players[pid].banned:
                continue
            choice = rng.choice(["T", "V", "F", "A"])
            if choice != "A":
                proof = user if choice == "T" else "wrong"
                host.submit_vote(prop.proposition_id, pid, "false" if choice == "F" else "true", proof, now + 1)
        assert host.conservation_gap() == 0
        host.close_proposition(prop.proposition_id, prop.deadline)
        assert host.conservation_gap() == 0
        assert host.impression_count(f"ad{k}") == int(prop.status is Status.TRUE)
        for p in list(host.players.values()):
            if not p.banned and p.pcd == 0:
                pool = host.pool.pool
                assert host.redeem(p.player_id) <= pool
        assert host.conservation_gap() == 0
        assert all(p.balance >= 0 for p in host.players.values())
