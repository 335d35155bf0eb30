import bisect
import hashlib
from collections import Counter

import pytest

from visearch.cluster import (
    MEMBERS,
    PING,
    ClusterView,
    KetamaRing,
    Membership,
    MemberMessage,
    PartitionKey,
    SimulatedBus,
    category_ring_key,
    compute_assignment,
    on_membership_change,
    read_member_file,
    ring_digest,
)
from visearch.errors import ClusterUnavailable, CorruptionError, RejectedInput


def ring_oracle(members, key):
    """Linear scan over all points: smallest point >= key, else the smallest point."""
    pts = sorted(
        (int.from_bytes(hashlib.md5(f"{m}-{i}".encode()).digest()[:8], "little"), m)
        for m in members
        for i in range(160)
    )
    after = [p for p in pts if p[0] >= key]
    return (after[0] if after else pts[0])[1]


def test_ring_digest_frozen():
    assert ring_digest("a-0") == 11636142100125279649
    assert category_ring_key(1) == 9377542946905311940


def test_ring_has_160_points_per_member():
    ring = KetamaRing(["a", "b", "c"])
    assert len(ring.points) == 480
    assert Counter(ring.owners) == {"a": 160, "b": 160, "c": 160}
    assert ring.positions == sorted(ring.positions)


def test_ring_lookup_matches_linear_oracle():
    members = ["n1", "n2", "n3", "n4"]
    ring = KetamaRing(members)
    for cat in range(200):
        key = category_ring_key(cat)
        assert ring.lookup(key) == ring_oracle(members, key)
    # wrap past the last point
    assert ring.lookup(2**64 - 1) == ring.owners[0]
    assert ring.lookup(ring.positions[5]) == ring.owners[5]


def test_empty_ring_unavailable():
    with pytest.raises(ClusterUnavailable):
        KetamaRing([]).lookup(0)
    with pytest.raises(ClusterUnavailable):
        compute_assignment(ClusterView.of([]), [1])


def test_view_sorts_and_rejects_duplicates():
    assert ClusterView(("b", "a")).members == ("a", "b")
    with pytest.raises(RejectedInput):
        ClusterView(("a", "a"))


def test_assignment_frozen_digest_and_owners():
    a = compute_assignment(ClusterView.of(["a", "b", "c"]), range(1, 21))
    assert hashlib.sha256(a.serialize()).hexdigest() == "76b4fb3dcaba37a54f70f50e922664b0140ebf79e6b3030b8c644de2be483f3c"
    assert [(c, i, a.owner(c, i)) for c in (1, 2) for i in range(3)] == [
        (1, 0, "b"), (1, 1, "c"), (1, 2, "a"), (2, 0, "a"), (2, 1, "b"), (2, 2, "c"),
    ]


def test_assignment_covers_every_partition_once():
    view = ClusterView.of(["n1", "n2", "n3", "n4"])
    a = compute_assignment(view, range(50))
    assert len(a.owners) == 200
    for cat in range(50):
        # round-robin: each member holds exactly one slice of each category
        assert sorted(a.owner(cat, i) for i in range(4)) == list(view.members)
        start = view.members.index(a.owner(cat, 0))
        assert [a.owner(cat, i) for i in range(4)] == [view.members[(start + i) % 4] for i in range(4)]
        assert view.members[start] == ring_oracle(view.members, category_ring_key(cat))
    assert all(len(a.held_by(m)) == 50 for m in view.members)


def test_assignment_independent_of_input_order():
    a = compute_assignment(ClusterView.of(["x", "y", "z"]), [5, 3, 9, 3])
    b = compute_assignment(ClusterView.of(["z", "x", "y"]), [9, 5, 3])
    assert a.serialize() == b.serialize()


def test_join_moves_about_one_over_members_of_starts():
    cats = range(1000)
    old = ClusterView.of(["n1", "n2", "n3"])
    new = ClusterView.of(["n1", "n2", "n3", "n4"], 1)
    ring_old, ring_new = KetamaRing(old.members), KetamaRing(new.members)
    moved = sum(ring_old.lookup(category_ring_key(c)) != ring_new.lookup(category_ring_key(c)) for c in cats)
    assert abs(moved / 1000 - 1 / 4) < 0.08
    # only the newcomer gains start positions
    for c in cats:
        before, after = ring_old.lookup(category_ring_key(c)), ring_new.lookup(category_ring_key(c))
        assert after == before or after == "n4"


def test_redistribution_plan_load_and_drop():
    cats = [1, 2, 3]
    old = ClusterView.of(["a", "b"], 1)
    new = ClusterView.of(["a", "b", "c"], 2)
    plan = on_membership_change(old, new, cats, "a")
    assert set(plan.load) == set(compute_assignment(new, cats).held_by("a"))
    assert all(k.count == 2 for k in plan.drop) and all(k.count == 3 for k in plan.load)
    assert not on_membership_change(None, new, cats, "zz")
    with pytest.raises(RejectedInput):
        on_membership_change(new, old, cats, "a")


def test_redistribution_on_unchanged_members_is_empty():
    v1, v2 = ClusterView.of(["a", "b"], 1), ClusterView.of(["a", "b"], 2)
    assert not on_membership_change(v1, v2, range(10), "a")


def test_membership_join_and_three_missed_probes():
    bus = SimulatedBus(["a", "b", "c"])
    m = Membership("a")
    m.resolve_members(bus.discover, bus.probe)
    assert m.view == ClusterView.of(["a", "b", "c"], 1)
    bus.kill("c")
    for _ in range(2):
        assert not m.heartbeat(bus.probe)
    assert m.view.epoch == 1
    assert m.heartbeat(bus.probe)
    assert m.view == ClusterView.of(["a", "b"], 2)


def test_missed_probes_reset_on_success():
    bus = SimulatedBus(["a", "b"])
    m = Membership("a", ["b"])
    for _ in range(5):
        bus.kill("b")
        m.heartbeat(bus.probe)
        m.heartbeat(bus.probe)
        bus.revive("b")
        m.heartbeat(bus.probe)
    assert m.view.members == ("a", "b") and m.view.epoch == 0


def test_flapping_node_bumps_epoch_once_per_change():
    bus = SimulatedBus(["a", "b"])
    m = Membership("a")
    seen = []
    m.subscribe(lambda old, new: seen.append((old.epoch, new.epoch, new.members)))
    m.resolve_members(bus.discover, bus.probe)  # b joins
    bus.kill("b")
    for _ in range(3):
        m.resolve_members(bus.discover, bus.probe)  # b dropped on the third miss
    for _ in range(3):
        m.resolve_members(bus.discover, bus.probe)  # still down: nothing new
    bus.revive("b")
    m.resolve_members(bus.discover, bus.probe)  # b rejoins
    m.resolve_members(bus.discover, bus.probe)
    assert seen == [(0, 1, ("a", "b")), (1, 2, ("a",)), (2, 3, ("a", "b"))]


def test_discovery_failure_keeps_view_and_warns(caplog):
    bus = SimulatedBus(["a", "b"])
    m = Membership("a")
    m.resolve_members(bus.discover, bus.probe)
    bus.unreachable = True
    with caplog.at_level("WARNING"):
        view = m.resolve_members(bus.discover, bus.probe)
    assert view == ClusterView.of(["a", "b"], 1)
    assert m.warnings == 1
    assert "discovery failed" in caplog.text


def test_all_members_agree_on_placement():
    bus = SimulatedBus(["a", "b", "c", "d"])
    nodes = {n: Membership(n) for n in bus.registered}
    for m in nodes.values():
        m.resolve_members(bus.discover, bus.probe)
    digests = {compute_assignment(m.view, range(30)).serialize() for m in nodes.values()}
    assert len(digests) == 1


def test_member_message_round_trip():
    msg = MemberMessage(MEMBERS, "node-1", 7, ("a", "b"))
    raw = msg.encode()
    assert raw[:8] == b"EBVSMBR1"
    assert MemberMessage.decode(raw) == msg
    assert MemberMessage.decode(MemberMessage(PING, "x").encode()).kind == PING
    with pytest.raises(CorruptionError):
        MemberMessage.decode(b"XXXXXXXX" + raw[8:])
    with pytest.raises(CorruptionError):
        MemberMessage.decode(raw + b"\x00")


def test_member_file(tmp_path):
    path = tmp_path / "members.txt"
    path.write_text("# cluster\nn1 127.0.0.1:7001\n\nn2 localhost:7002  # second\n")
    assert read_member_file(path) == {"n1": ("127.0.0.1", 7001), "n2": ("localhost", 7002)}
    path.write_text("n1 127.0.0.1:7001\nbroken\n")
    with pytest.raises(CorruptionError, match="line 2"):
        read_member_file(path)


def test_partition_key_ordering():
    keys = [PartitionKey(2, 0, 3), PartitionKey(1, 2, 3), PartitionKey(1, 0, 3)]
    assert sorted(keys)[0] == PartitionKey(1, 0, 3)
    assert bisect.bisect_left(sorted(keys), PartitionKey(2, 0, 3)) == 2
