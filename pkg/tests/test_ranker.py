import time

import numpy as np
import pytest

from visearch.cluster import ClusterView
from visearch.errors import ClusterUnavailable, CorruptionError, RejectedInput
from visearch.hashmodel import AbsoluteTopN, CategoryModel, HashProjector, SurrogateModel, extract_hash
from visearch.index import CategoryPartition
from visearch.ranker import (
    RERANK_CAP,
    Hits,
    LocalTransport,
    QueryRequest,
    RankedResult,
    SearchNode,
    SearchService,
    decode_request,
    decode_response,
    encode_request,
    encode_response,
    fanout_search,
    merge_across_categories,
    merge_hits,
    node_search,
    rerank,
    scan_partition,
)
from visearch.server import holdings_for
from visearch.sigcore import AspectSet, BinarySignature, ScoringConfig, appearance_score, aspect_score, blended_score


def make_catalog(n_cats, per_cat, nbits=256, seed=0, low_entropy=False):
    """Random partitions with globally unique, per-category sorted ids.

    ``low_entropy`` draws from a handful of base codes so distance ties are common.
    """
    rng = np.random.default_rng(seed)
    ids = rng.permutation(np.arange(1, n_cats * per_cat * 3, dtype=np.uint64))[: n_cats * per_cat]
    cat = {}
    bases = rng.integers(0, 256, size=(8, nbits // 8), dtype=np.uint8)
    for c in range(n_cats):
        lids = np.sort(ids[c * per_cat : (c + 1) * per_cat])
        if low_entropy:
            codes = bases[rng.integers(0, 8, per_cat)].copy()
            codes[:, 0] ^= rng.integers(0, 4, per_cat, dtype=np.uint8)
        else:
            codes = rng.integers(0, 256, size=(per_cat, nbits // 8), dtype=np.uint8)
        cat[c] = CategoryPartition(c, lids, codes)
    return cat


def brute_force(catalog, categories, q, n):
    """Unpacked-bit distances plus Python full sort over (distance, id)."""
    qb = np.unpackbits(np.frombuffer(q.data, dtype=np.uint8))
    rows = []
    for c in categories:
        p = catalog[c]
        d = (np.unpackbits(p.signatures, axis=1) != qb).sum(axis=1)
        rows += [(int(dd), int(lid), c) for dd, lid in zip(d, p.listing_ids)]
    rows.sort()
    return [(lid, c, dd) for dd, lid, c in rows[:n]]


def as_tuples(results):
    return [(r.listing_id, r.category_id, r.hamming) for r in results]


def cluster(catalog, members, workers=1):
    view = ClusterView.of(members)
    nodes = {m: SearchNode(m, holdings_for(view, m, catalog), workers) for m in view.members}
    return view, nodes


def req_for(q, cats, n, **kw):
    return QueryRequest(q, tuple((c, 1.0) for c in cats), n=n, **kw)


# scan_partition


def test_scan_matches_full_sort_on_10k():
    rng = np.random.default_rng(1)
    p = make_catalog(1, 10_000, nbits=4096)[0]
    for _ in range(3):
        q = BinarySignature.random(rng, 4096)
        hits = scan_partition(p, q, 50, block=1024)
        assert [(lid, d) for lid, _, d in brute_force({0: p}, [0], q, 50)] == hits.pairs()


def test_scan_ties_break_by_listing_id():
    p = make_catalog(1, 2000, nbits=64, low_entropy=True)[0]
    q = BinarySignature(p.signatures[0].tobytes(), 64)
    hits = scan_partition(p, q, 300, block=128)
    expected = [(lid, d) for lid, _, d in brute_force({0: p}, [0], q, 300)]
    assert hits.pairs() == expected
    assert len(set(hits.hamming.tolist())) < 300  # ties actually present


def test_scan_n_above_size_returns_everything_sorted():
    p = make_catalog(1, 30, nbits=64)[0]
    q = BinarySignature.zeros(64)
    hits = scan_partition(p, q, 100)
    assert len(hits) == 30
    assert hits.pairs() == [(lid, d) for lid, _, d in brute_force({0: p}, [0], q, 100)]


def test_scan_errors_and_empty():
    p = make_catalog(1, 5, nbits=64)[0]
    with pytest.raises(RejectedInput):
        scan_partition(p, BinarySignature.zeros(128), 5)
    with pytest.raises(RejectedInput):
        scan_partition(p, BinarySignature.zeros(64), 0)
    assert len(scan_partition(CategoryPartition.empty(1, 64), BinarySignature.zeros(64), 5)) == 0


def test_merge_hits_orders_by_distance_then_id():
    a = Hits(np.array([5, 9], dtype=np.uint64), np.array([1, 3]))
    b = Hits(np.array([2, 7], dtype=np.uint64), np.array([1, 2]))
    assert merge_hits([a, b], 3).pairs() == [(2, 1), (5, 1), (7, 2)]


# node_search


@pytest.mark.parametrize("workers", [1, 8])
def test_node_search_equals_sequential_scan(workers):
    catalog = make_catalog(3, 3000, low_entropy=True)
    q = BinarySignature(catalog[1].signatures[10].tobytes(), 256)
    node = SearchNode("n", {c: [p] for c, p in catalog.items()}, workers)
    res = node.search(req_for(q, [0, 1, 2, 77], 40))
    for c in range(3):
        assert res.per_category[c].pairs() == scan_partition(catalog[c], q, 40).pairs()
    assert 77 not in res.per_category
    node.close()


def test_node_search_w1_equals_w8():
    catalog = make_catalog(4, 2500, seed=3)
    q = BinarySignature.random(np.random.default_rng(0), 256)
    r1 = SearchNode("a", {c: [p] for c, p in catalog.items()}, 1).search(req_for(q, range(4), 25))
    w8 = SearchNode("b", {c: [p] for c, p in catalog.items()}, 8)
    r8 = w8.search(req_for(q, range(4), 25))
    w8.close()
    assert {c: h.pairs() for c, h in r1.per_category.items()} == {c: h.pairs() for c, h in r8.per_category.items()}


def test_node_search_unheld_category_is_empty():
    res = node_search(req_for(BinarySignature.zeros(64), [5], 10), {})
    assert res.per_category == {} and res.partitions_missing == 0


# fanout_search


def test_one_node_cluster_equals_node_search():
    catalog = make_catalog(3, 500)
    view, nodes = cluster(catalog, ["solo"])
    q = BinarySignature.random(np.random.default_rng(2), 256)
    req = req_for(q, [0, 2], 30)
    resp = fanout_search(req, view, LocalTransport(nodes))
    direct = nodes["solo"].search(req)
    assert {c: h.pairs() for c, h in resp.per_category.items()} == {c: h.pairs() for c, h in direct.per_category.items()}
    assert not resp.degraded


@pytest.mark.parametrize("members", [["a"], ["a", "b"], ["a", "b", "c", "d"]])
@pytest.mark.parametrize("workers", [1, 8])
def test_topology_invariance(members, workers):
    catalog = make_catalog(5, 1200, low_entropy=True, seed=4)
    view, nodes = cluster(catalog, members, workers)
    rng = np.random.default_rng(5)
    for i in range(5):
        q = BinarySignature(catalog[i % 5].signatures[i].tobytes(), 256) if i % 2 else BinarySignature.random(rng, 256)
        cats = [0, 1, 3] if i % 2 else [2, 4]
        resp = fanout_search(req_for(q, cats, 60), view, LocalTransport(nodes))
        assert as_tuples(resp.results) == brute_force(catalog, cats, q, 60)
    for node in nodes.values():
        node.close()


def test_killed_node_degrades_to_surviving_data():
    catalog = make_catalog(6, 800, seed=6)
    view, nodes = cluster(catalog, ["n1", "n2", "n3", "n4"])
    transport = LocalTransport(nodes)
    transport.kill("n3")
    q = BinarySignature.random(np.random.default_rng(7), 256)
    resp = fanout_search(req_for(q, range(6), 50), view, transport)
    assert resp.degraded and resp.missing_nodes == ("n3",)
    assert resp.partitions_missing == 6
    surviving = {}
    for m in ("n1", "n2", "n4"):
        for c, pieces in holdings_for(view, m, catalog).items():
            surviving.setdefault(c, []).extend(pieces)
    merged = {}
    for c, ps in surviving.items():
        ps = sorted(ps, key=lambda p: p.partition_index)
        merged[c] = CategoryPartition(c, np.concatenate([p.listing_ids for p in ps]), np.concatenate([p.signatures for p in ps]))
    assert as_tuples(resp.results) == brute_force(merged, range(6), q, 50)


def test_late_node_counted_missing():
    catalog = make_catalog(2, 100)
    view, nodes = cluster(catalog, ["a", "b"])
    transport = LocalTransport(nodes)
    transport.delay["b"] = 0.3
    t0 = time.perf_counter()
    resp = fanout_search(req_for(BinarySignature.zeros(256), [0, 1], 10), view, transport, timeout=0.05)
    assert time.perf_counter() - t0 < 0.25
    assert resp.degraded and resp.missing_nodes == ("b",)


def test_all_nodes_down_is_unavailable():
    catalog = make_catalog(1, 10)
    view, nodes = cluster(catalog, ["a", "b"])
    transport = LocalTransport(nodes)
    transport.kill("a")
    transport.kill("b")
    with pytest.raises(ClusterUnavailable):
        fanout_search(req_for(BinarySignature.zeros(256), [0], 5), view, transport)
    with pytest.raises(ClusterUnavailable):
        fanout_search(req_for(BinarySignature.zeros(256), [0], 5), ClusterView.of([]), transport)


def test_cross_category_dedup_keeps_best_entry():
    per_cat = {
        4: Hits(np.array([10, 11], dtype=np.uint64), np.array([5, 6])),
        2: Hits(np.array([10, 12], dtype=np.uint64), np.array([3, 9])),
    }
    out = merge_across_categories(per_cat, 10, 64)
    assert as_tuples(out) == [(10, 2, 3), (11, 4, 6), (12, 2, 9)]
    assert out[0].s_appearance == appearance_score(3, 64)


def test_result_length_is_min_of_n_and_available():
    catalog = make_catalog(2, 7)
    view, nodes = cluster(catalog, ["a", "b", "c"])
    resp = fanout_search(req_for(BinarySignature.zeros(256), [0, 1], 50), view, LocalTransport(nodes))
    assert len(resp.results) == 14


def test_query_request_validation():
    q = BinarySignature.zeros(64)
    with pytest.raises(RejectedInput):
        QueryRequest(q, ((1, 1.0),), n=0)
    with pytest.raises(RejectedInput):
        QueryRequest(q, ((1, 1.0),), n=10001)
    with pytest.raises(RejectedInput):
        QueryRequest(q, ())


# rerank


def rr(lid, d, nbits=64):
    s = appearance_score(d, nbits)
    return RankedResult(lid, 0, d, s, 0.0, s)


def test_rerank_color_match_first():
    initial = [rr(1, 8), rr(2, 8)]
    truth = {1: AspectSet({"color": "red"}), 2: AspectSet({"color": "blue"})}
    out = rerank(initial, [(("color", "blue"), 1.0)], truth)
    assert [r.listing_id for r in out] == [2, 1]
    assert out[0].s_aspect == 1.0


def test_rerank_lambda_one_keeps_order():
    initial = [rr(i, d) for i, d in enumerate([1, 2, 2, 5, 9])]
    truth = {i: AspectSet({"color": "blue"}) for i in range(0, 5, 2)}
    out = rerank(initial, [(("color", "blue"), 1.0)], truth, ScoringConfig(1.0))
    assert [r.listing_id for r in out] == [0, 1, 2, 3, 4]


def test_rerank_matches_full_sort_oracle():
    rng = np.random.default_rng(8)
    colors, brands = ["red", "blue", "green"], ["X", "Y"]
    d = np.sort(rng.integers(0, 64, 100))
    initial = [rr(int(i), int(dd)) for i, dd in zip(rng.permutation(1000)[:100], d)]
    truth = {r.listing_id: AspectSet({"color": colors[rng.integers(3)], "brand": brands[rng.integers(2)]}) for r in initial[:90]}
    pred = [(("color", "red"), 1.0), (("brand", "Y"), 3.0)]
    cfg = ScoringConfig(0.6)
    expected = []
    for r in initial:
        s_asp = aspect_score(pred, truth[r.listing_id]) if r.listing_id in truth else 0.0
        expected.append((-blended_score(r.s_appearance, s_asp, cfg), -r.s_appearance, r.listing_id))
    expected.sort()
    out = rerank(initial, pred, truth, cfg)
    assert [r.listing_id for r in out] == [t[2] for t in expected]
    assert sorted(r.listing_id for r in out) == sorted(r.listing_id for r in initial)


def test_rerank_preconditions():
    with pytest.raises(RejectedInput):
        rerank([rr(1, 5), rr(2, 1)], [], {})
    with pytest.raises(RejectedInput):
        rerank([rr(i, 0) for i in range(RERANK_CAP + 1)], [], {})
    assert len(rerank([rr(i, 0) for i in range(RERANK_CAP)], [], {})) == RERANK_CAP


# end to end


def test_service_own_signature_at_rank_one():
    rng = np.random.default_rng(9)
    X = rng.standard_normal((300, 16))
    cats = np.arange(300) % 3
    proj = HashProjector(1, 256, 16)
    catalog = {
        c: CategoryPartition.from_records(c, [(i + 1, extract_hash(X[i], proj)) for i in np.flatnonzero(cats == c)], nbits=256)
        for c in range(3)
    }
    view, nodes = cluster(catalog, ["a", "b"])
    model = SurrogateModel(proj, CategoryModel({c: X[cats == c].mean(axis=0) for c in range(3)}))
    svc = SearchService(LocalTransport(nodes), view, model)
    out = svc.query(signature=extract_hash(X[4], proj), categories=[(int(cats[4]), 1.0)])
    assert (out.results[0].listing_id, out.results[0].hamming) == (5, 0)
    out = svc.query(X[4], mode=AbsoluteTopN(3))
    assert len(out.categories) == 3
    assert set(out.timings) == {"hash_predict", "fanout", "merge", "rerank", "total"}
    parts = sum(v for k, v in out.timings.items() if k != "total")
    assert parts == pytest.approx(out.timings["total"], rel=0.1)


def test_service_rerank_then_cut_to_n():
    catalog = make_catalog(1, 200, nbits=64, seed=10)
    view, nodes = cluster(catalog, ["a"])
    blue = {int(lid): AspectSet({"color": "blue"}) for lid in catalog[0].listing_ids[::10]}
    svc = SearchService(LocalTransport(nodes), view, aspects=blue, scoring=ScoringConfig(0.0))
    out = svc.query(signature=BinarySignature.zeros(64), categories=[(0, 1.0)], n=5, fetch=200, predicted_aspects=[(("color", "blue"), 1.0)])
    assert len(out.results) == 5
    assert all(r.listing_id in blue for r in out.results)
    plain = svc.query(signature=BinarySignature.zeros(64), categories=[(0, 1.0)], n=5, rerank_results=False)
    assert [r.hamming for r in plain.results] == sorted(r.hamming for r in plain.results)


# wire codec


def test_request_round_trip():
    q = BinarySignature.random(np.random.default_rng(1), 4096)
    req = QueryRequest(q, ((3, 0.0), (9, 0.0)), n=20, predicted_aspects=((("color", "blue"), 2.0),), rerank=True, request_id=77)
    assert decode_request(encode_request(req)) == req
    # node-to-node messages carry only the per-category fetch size
    back = decode_request(encode_request(QueryRequest(q, ((3, 0.0),), n=20, fetch=50, local=True)))
    assert (back.local, back.per_category, back.category_ids) == (True, 50, [3])
    raw = encode_request(req)
    assert raw[:8] == b"EBVSQRY1"
    with pytest.raises(CorruptionError):
        decode_request(raw[:-1])


def test_response_round_trip():
    results = [RankedResult(2**40, 5, 17, 0.5, 0.25, 0.4375)]
    rid, degraded, back = decode_response(encode_response(9, True, results))
    assert (rid, degraded, back) == (9, True, results)
    with pytest.raises(CorruptionError):
        decode_response(b"EBVSRSPX" + encode_response(1, False, [])[8:])
