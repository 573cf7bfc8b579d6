import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from eupas.data import (
    GeoNeighbors,
    MobilityRecord,
    ParseError,
    POITable,
    build_mobility_distributions,
    build_poi_similarity,
    build_relation_graphs,
    generate_synthetic_city,
    load_city,
    load_geo,
    load_trips,
    sparsify_top_k,
    write_city,
)


def write_trips(tmp_path, text):
    path = tmp_path / "trips.csv"
    path.write_text(text)
    return path


class TestLoadTrips:
    def test_basic_parse(self, tmp_path):
        records = load_trips(write_trips(tmp_path, "0,1,5\n"), 4)
        assert records == [MobilityRecord(0, 1, 5)]

    def test_self_trip_allowed(self, tmp_path):
        records = load_trips(write_trips(tmp_path, "3,3,2\n"), 4)
        assert records == [MobilityRecord(3, 3, 2)]

    def test_negative_count_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="negative trip count"):
            load_trips(write_trips(tmp_path, "0,1,-2\n"), 4)

    def test_header_skipped(self, tmp_path):
        records = load_trips(write_trips(tmp_path, "origin,destination,count\n0,1,5\n"), 4)
        assert len(records) == 1

    def test_malformed_line_reports_number(self, tmp_path):
        with pytest.raises(ParseError, match="line 2"):
            load_trips(write_trips(tmp_path, "0,1,5\n0,1\n"), 4)
        with pytest.raises(ParseError, match="line 3"):
            load_trips(write_trips(tmp_path, "0,1,5\n1,2,3\n0,x,1\n"), 4)

    def test_id_out_of_range(self, tmp_path):
        with pytest.raises(ValueError, match="out of range"):
            load_trips(write_trips(tmp_path, "0,7,5\n"), 4)


class TestMobilityDistributions:
    def test_origin_normalization(self):
        records = [MobilityRecord(0, 1, 3), MobilityRecord(0, 2, 1)]
        p_o, _ = build_mobility_distributions(records, 3)
        assert np.allclose(p_o[0], [0.0, 0.75, 0.25])

    def test_uniform_fallback(self):
        records = [MobilityRecord(0, 1, 3)]
        p_o, _ = build_mobility_distributions(records, 3)
        assert np.allclose(p_o[2], [1 / 3, 1 / 3, 1 / 3])

    def test_destination_conditioning(self):
        p_o, p_t = build_mobility_distributions([MobilityRecord(1, 0, 1)], 3)
        assert np.allclose(p_t[0], [0.0, 1.0, 0.0])

    @given(
        st.lists(
            st.tuples(st.integers(0, 4), st.integers(0, 4), st.integers(0, 9)),
            max_size=20,
        )
    )
    def test_rows_stochastic(self, trips):
        records = [MobilityRecord(o, t, c) for o, t, c in trips]
        p_o, p_t = build_mobility_distributions(records, 5)
        assert np.allclose(p_o.sum(axis=1), 1.0, atol=1e-9)
        assert np.allclose(p_t.sum(axis=1), 1.0, atol=1e-9)


def hand_tfidf_similarity(counts):
    """Independent brute-force TF-IDF + cosine oracle (plain loops)."""
    n, f = counts.shape
    weighted = np.zeros((n, f))
    for c in range(f):
        df = sum(1 for i in range(n) if counts[i, c] > 0)
        idf = math.log(n / df) if df > 0 else 0.0
        for i in range(n):
            total = counts[i].sum()
            tf = counts[i, c] / total if total > 0 else 0.0
            weighted[i, c] = tf * idf
    sim = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            ni, nj = np.linalg.norm(weighted[i]), np.linalg.norm(weighted[j])
            sim[i, j] = float(weighted[i] @ weighted[j] / (ni * nj)) if ni > 0 and nj > 0 else 0.0
    for i in range(n):
        total = sim[i].sum()
        if total > 0:
            sim[i] /= total
        else:
            sim[i] = 1.0 / (n - 1)
            sim[i, i] = 0.0
    return sim


class TestPoiSimilarity:
    def test_hand_case_matches_oracle(self):
        counts = np.array([[2, 0], [1, 1], [0, 2]])
        got = build_poi_similarity(POITable(counts))
        assert np.allclose(got, hand_tfidf_similarity(counts), atol=1e-12)

    def test_orthogonal_categories(self):
        # region 2 uses both categories so the idf stays nonzero
        counts = np.array([[3, 0], [0, 5], [1, 1]])
        s = build_poi_similarity(POITable(counts))
        assert s[0, 1] == 0.0 and s[1, 0] == 0.0

    def test_identical_rows_dominat(self):
        counts = np.array([[2, 1, 0], [2, 1, 0], [0, 1, 3]])
        s = build_poi_similarity(POITable(counts))
        # identical vectors have cosine 1, the strongest possible partner
        assert s[0, 1] >= s[0, 2]
        assert np.allclose(s, hand_tfidf_similarity(counts), atol=1e-12)

    def test_all_zero_row_uniform(self):
        counts = np.array([[0, 0], [1, 2], [3, 1]])
        s = build_poi_similarity(POITable(counts))
        assert np.allclose(s[0], [0.0, 0.5, 0.5])

    def test_rows_stochastic(self):
        rng = np.random.default_rng(4)
        counts = rng.integers(0, 6, size=(12, 5))
        s = build_poi_similarity(POITable(counts))
        assert np.allclose(s.sum(axis=1), 1.0, atol=1e-9)


class TestSparsify:
    def test_top1_keeps_argmax_plus_loop(self):
        a = sparsify_top_k(np.array([[0.0, 0.75, 0.25]] * 3), 1)
        assert a[0, 1] == 0.75 and a[0, 2] == 0.0 and a[0, 0] == 1.0

    def test_ties_break_to_lower_id(self):
        row = np.array([[0.0, 0.5, 0.5, 0.5], [0, 0, 0, 0], [0, 0, 0, 0], [0, 0, 0, 0]])
        a = sparsify_top_k(row, 2)
        assert a[0, 1] == 0.5 and a[0, 2] == 0.5 and a[0, 3] == 0.0

    def test_isolated_row_keeps_self_loop(self):
        a = sparsify_top_k(np.zeros((3, 3)), 2)
        assert np.array_equal(a, np.eye(3))

    @given(st.integers(1, 4), st.integers(0, 1000))
    def test_support_bound(self, top_k, seed):
        m = np.random.default_rng(seed).random((8, 8))
        a = sparsify_top_k(m, top_k)
        support = (a != 0).sum(axis=1)
        assert (support <= top_k + 1).all()
        assert np.array_equal(np.diag(a), np.ones(8))


class TestRelationGraphs:
    def test_geo_adjacency(self):
        records = [MobilityRecord(0, 1, 1)]
        poi = POITable(np.array([[1, 0], [0, 1], [1, 1]]))
        geo = GeoNeighbors(((1,), (0,), ()))
        graph = build_relation_graphs(records, poi, geo, top_k=2)
        expected = np.array([[1, 1, 0], [1, 1, 0], [0, 0, 1]], dtype=float)
        assert np.array_equal(graph.adjacency["geo"].toarray(), expected)
        assert np.allclose(graph.similarity["geo"].sum(axis=1), 1.0)

    def test_poi_and_geo_symmetric(self, small_graph):
        for name in ("poi", "geo"):
            a = small_graph.adjacency[name].toarray()
            assert np.array_equal(a, a.T)

    def test_mobility_support_bound(self, small_graph):
        for name in ("origin", "destination"):
            support = (small_graph.adjacency[name].toarray() != 0).sum(axis=1)
            assert (support <= small_graph.top_k + 1).all()

    def test_similarity_rows_stochastic(self, small_graph):
        for s in small_graph.similarity.values():
            assert np.allclose(s.sum(axis=1), 1.0, atol=1e-9)

    def test_deterministic_rebuild(self, small_city):
        records, poi, geo, _, _ = small_city
        g1 = build_relation_graphs(records, poi, geo, top_k=5)
        g2 = build_relation_graphs(records, poi, geo, top_k=5)
        for name in g1.relations:
            assert np.array_equal(g1.adjacency[name].toarray(), g2.adjacency[name].toarray())
            assert np.array_equal(g1.similarity[name], g2.similarity[name])

    def test_similarity_immutable(self, small_graph):
        with pytest.raises(ValueError):
            small_graph.similarity["poi"][0, 0] = 5.0


class TestGeoNeighbors:
    def test_asymmetry_rejected(self):
        with pytest.raises(ValueError, match="asymmetric"):
            GeoNeighbors(((1,), (), ()))

    def test_self_membership_rejected(self):
        with pytest.raises(ValueError, match="itself"):
            GeoNeighbors(((0,), ()))


class TestSyntheticCity:
    def test_deterministic(self):
        a = generate_synthetic_city(40, 6, 4, seed=7)
        b = generate_synthetic_city(40, 6, 4, seed=7)
        assert a[0] == b[0]
        assert np.array_equal(a[1].counts, b[1].counts)
        assert a[2].neighbors == b[2].neighbors
        assert np.array_equal(a[3], b[3])
        for task in a[4]:
            assert np.array_equal(a[4][task], b[4][task])

    def test_within_cluster_trips_dominate(self):
        records, _, _, labels, _ = generate_synthetic_city(40, 6, 4, seed=7)
        within, across = [], []
        for r in records:
            (within if labels[r.origin] == labels[r.destination] else across).append(r.count)
        assert np.mean(within) > 5 * np.mean(across)

    def test_singleton_clusters(self):
        _, _, _, labels, _ = generate_synthetic_city(4, 2, 4, seed=1)
        assert labels.tolist() == [0, 1, 2, 3]

    def test_cluster_count_validated(self):
        with pytest.raises(ValueError):
            generate_synthetic_city(40, 6, 50, seed=1)

    def test_write_load_round_trip(self, tmp_path, small_city):
        records, poi, geo, labels, targets = small_city
        write_city(tmp_path, records, poi, geo, labels, targets)
        r2, p2, g2, l2, t2 = load_city(tmp_path)
        assert r2 == records
        assert np.array_equal(p2.counts, poi.counts)
        assert g2.neighbors == geo.neighbors
        assert np.array_equal(l2, labels)
        for task in targets:
            assert np.allclose(t2[task], targets[task], atol=1e-6)

    def test_geo_loader_validates_line_count(self, tmp_path):
        (tmp_path / "geo.txt").write_text("1\n0\n")
        with pytest.raises(ParseError, match="neighbor lines"):
            load_geo(tmp_path / "geo.txt", 3)
