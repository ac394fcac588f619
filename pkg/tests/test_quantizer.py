import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from sklearn.base import clone

from conftest import TOY
from mevi.errors import DataError
from mevi.quantizer import (
    EmbeddingSet,
    HierarchicalKMeans,
    ResidualQuantizer,
    RqCodebook,
    build_hierarchical_kmeans,
    build_rq,
    encode,
    kmeans,
    quantization_error,
    reconstruct,
)


def _partition(labels):
    groups = {}
    for i, lab in enumerate(labels):
        groups.setdefault(tuple(np.atleast_1d(lab).tolist()), []).append(i)
    return sorted(tuple(g) for g in groups.values())


def _best_two_partition(X):
    """Brute force over every split of X into two non-empty groups."""
    best = None
    n = len(X)
    for mask in range(1, 2 ** (n - 1)):
        labels = [(mask >> i) & 1 for i in range(n)]
        sse = 0.0
        for g in (0, 1):
            pts = X[[i for i in range(n) if labels[i] == g]].astype(np.float64)
            sse += ((pts - pts.mean(axis=0)) ** 2).sum()
        if best is None or sse < best[0]:
            best = (sse, labels)
    return best


class TestKmeans:
    def test_toy_matches_brute_force(self):
        res = kmeans(TOY, 2)
        sse, labels = _best_two_partition(TOY)
        assert _partition(res.assignments) == _partition(labels)
        assert res.sse == pytest.approx(sse)
        cents = sorted(map(tuple, res.centroids.tolist()))
        assert cents == [(0.0, 0.5), (10.0, 10.5)]

    def test_identical_points_single_cluster(self):
        res = kmeans(np.full((4, 2), 3.0), 1)
        np.testing.assert_array_equal(res.centroids, [[3.0, 3.0]])
        assert res.sse == 0.0

    def test_one_cluster_per_distinct_point(self, rng):
        X = rng.standard_normal((12, 3))
        res = kmeans(X, 12)
        assert res.sse == pytest.approx(0.0, abs=1e-10)
        assert len(set(res.assignments.tolist())) == 12

    def test_more_codewords_than_distinct_points(self):
        X = np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 1.0]])
        res = kmeans(X, 5)
        assert res.centroids.shape == (5, 2)
        assert res.sse == 0.0

    def test_deterministic_per_seed(self, rng):
        X = rng.standard_normal((300, 4))
        a, b = kmeans(X, 7, seed=3), kmeans(X, 7, seed=3)
        np.testing.assert_array_equal(a.centroids, b.centroids)
        np.testing.assert_array_equal(a.assignments, b.assignments)

    def test_assignments_are_nearest_centroid(self, rng):
        X = rng.standard_normal((200, 5))
        res = kmeans(X, 6)
        d2 = ((X[:, None, :] - res.centroids.astype(np.float64)[None]) ** 2).sum(axis=2)
        np.testing.assert_array_equal(res.assignments, d2.argmin(axis=1))

    @pytest.mark.parametrize("bad", [np.zeros((0, 2)), np.array([[np.nan, 1.0]]), np.zeros(3)])
    def test_rejects_bad_input(self, bad):
        with pytest.raises(DataError):
            kmeans(bad, 1)

    def test_rejects_bad_b(self):
        with pytest.raises(DataError):
            kmeans(TOY, 0)


class TestBuildRq:
    def test_single_layer_is_kmeans(self, rng):
        X = rng.standard_normal((150, 4)).astype(np.float32)
        cb, codes, report = build_rq(X, m=1, b=5, seed=2)
        km = kmeans(X, 5, seed=2)
        np.testing.assert_array_equal(codes[:, 0], km.assignments)
        np.testing.assert_array_equal(cb.layers[0], km.centroids)
        assert report.total_sse == pytest.approx(km.sse)

    def test_toy_two_layers(self):
        cb, codes, report = build_rq(TOY, m=2, b=2)
        assert sorted(map(tuple, cb.layers[0].tolist())) == [(0.0, 0.5), (10.0, 10.5)]
        assert sorted(map(tuple, cb.layers[1].tolist())) == [(0.0, -0.5), (0.0, 0.5)]
        assert report.total_sse == 0.0
        np.testing.assert_array_equal(cb.reconstruct(codes), TOY)
        assert quantization_error(TOY, codes, cb) == 0.0

    def test_default_code_space(self):
        cb = RqCodebook(np.zeros((4, 32, 2), dtype=np.float32))
        assert cb.n_clusters == 32**4 == 1_048_576

    @given(arrays(np.float64, st.tuples(st.integers(5, 40), st.integers(1, 4)),
                  elements=st.floats(-100, 100)),
           st.integers(1, 4), st.integers(1, 6), st.integers(0, 5))
    def test_per_layer_sse_non_increasing(self, X, m, b, seed):
        _, _, report = build_rq(X, m=m, b=b, seed=seed)
        sse = report.per_layer_sse
        start = float((X.astype(np.float32).astype(np.float64) ** 2).sum())  # zero-vector baseline
        for prev, cur in zip((start,) + sse[:-1], sse):
            assert cur <= prev * (1 + 1e-9) + 1e-6

    def test_encode_matches_build_codes(self, rng):
        X = rng.standard_normal((2000, 8)).astype(np.float32)
        cb, codes, _ = build_rq(X, m=3, b=16)
        np.testing.assert_array_equal(cb.encode(X), codes)
        for i in range(0, 2000, 97):
            assert encode(X[i], cb) == tuple(codes[i])

    def test_accepts_embedding_set(self, rng):
        es = EmbeddingSet.from_array(rng.standard_normal((40, 3)))
        _, codes, _ = build_rq(es, m=2, b=3)
        assert codes.shape == (40, 2)


class TestEncodeReconstruct:
    def _strict_codebook(self, rng, m=3, b=4, d=6):
        # layer t codewords shrink geometrically so the greedy choice is unambiguous
        layers = np.stack([rng.standard_normal((b, d)) * 10.0 ** (-t) for t in range(m)]).astype(np.float32)
        return RqCodebook(layers)

    def test_strictly_nearest_code_round_trips(self, rng):
        cb = self._strict_codebook(rng)
        for c in itertools.product(range(4), repeat=3):
            v = reconstruct(c, cb)
            # verify the margins really are strict at every layer before asserting
            r = v.copy()
            for t in range(3):
                d2 = ((r[None, :] - cb.layers[t].astype(np.float64)) ** 2).sum(axis=1)
                if np.sort(d2)[1] - d2.min() < 1e-6 or d2.argmin() != c[t]:
                    break
                r = r - cb.layers[t][c[t]]
            else:
                assert encode(v, cb) == c

    def test_single_layer_centroid(self, rng):
        cb = RqCodebook(rng.standard_normal((1, 5, 3)).astype(np.float32))
        for j in range(5):
            assert encode(cb.layers[0, j], cb) == (j,)
            np.testing.assert_array_equal(reconstruct((j,), cb), cb.layers[0, j])

    def test_zero_codebook(self):
        cb = RqCodebook(np.zeros((3, 4, 2), dtype=np.float32))
        np.testing.assert_array_equal(reconstruct((1, 2, 3), cb), [0.0, 0.0])

    def test_quantization_error_oracle(self, rng):
        X = rng.standard_normal((30, 4)).astype(np.float32)
        cb = RqCodebook(rng.standard_normal((2, 3, 4)).astype(np.float32))
        codes = rng.integers(0, 3, (30, 2))
        total = 0.0
        for i in range(30):
            for j in range(4):
                rec = float(cb.layers[0, codes[i, 0], j]) + float(cb.layers[1, codes[i, 1], j])
                total += (float(X[i, j]) - rec) ** 2
        assert quantization_error(X, codes, cb) == pytest.approx(total, rel=1e-12)

    def test_bad_codes(self):
        cb = RqCodebook(np.zeros((2, 3, 2), dtype=np.float32))
        with pytest.raises(DataError):
            reconstruct((0, 3), cb)
        with pytest.raises(DataError):
            reconstruct((0,), cb)
        with pytest.raises(DataError):
            encode(np.zeros(3), cb)


class TestHierarchicalKmeans:
    def test_single_layer_equals_rq(self, rng):
        X = rng.standard_normal((120, 3)).astype(np.float32)
        tcb, tcodes, trep = build_hierarchical_kmeans(X, m=1, b=4, seed=5)
        rcb, rcodes, rrep = build_rq(X, m=1, b=4, seed=5)
        np.testing.assert_array_equal(tcodes, rcodes)
        np.testing.assert_array_equal(tcb.nodes[()], rcb.layers[0])
        assert trep.per_layer_sse == rrep.per_layer_sse

    def test_toy_partition_matches_rq(self):
        _, hcodes, hrep = build_hierarchical_kmeans(TOY, m=2, b=2)
        _, rcodes, _ = build_rq(TOY, m=2, b=2)
        assert hrep.total_sse == 0.0
        assert _partition(map(tuple, hcodes)) == _partition(map(tuple, rcodes))

    def test_small_cluster_splits_into_singletons(self, rng):
        # 3 tight groups of exactly b=3 points each
        centers = np.array([[0, 0], [50, 0], [0, 50]], dtype=np.float64)
        X = np.repeat(centers, 3, axis=0) + rng.standard_normal((9, 2)) * 0.1
        cb, codes, report = build_hierarchical_kmeans(X, m=2, b=3)
        assert report.per_layer_sse[1] == pytest.approx(0.0, abs=1e-9)
        assert len({tuple(c) for c in codes}) == 9

    def test_encode_matches_build_codes(self, rng):
        X = rng.standard_normal((800, 5)).astype(np.float32)
        cb, codes, _ = build_hierarchical_kmeans(X, m=3, b=6)
        np.testing.assert_array_equal(cb.encode(X), codes)

    def test_reconstruct_is_leaf_centroid(self, rng):
        X = rng.standard_normal((200, 3)).astype(np.float32)
        cb, codes, report = build_hierarchical_kmeans(X, m=2, b=4)
        assert quantization_error(X, codes, cb) == pytest.approx(report.total_sse, rel=1e-9)


class TestEstimators:
    @pytest.mark.parametrize("cls", [ResidualQuantizer, HierarchicalKMeans])
    def test_sklearn_contract(self, cls, rng):
        X = rng.standard_normal((300, 6)).astype(np.float32)
        est = cls(n_layers=2, n_codewords=5, random_state=1)
        assert clone(est).get_params() == est.get_params()
        codes = est.fit(X).transform(X)
        np.testing.assert_array_equal(codes, est.codes_)
        assert est.score(X) == pytest.approx(-est.report_.total_sse, rel=1e-9)
        assert est.inverse_transform(codes).shape == X.shape
        np.testing.assert_array_equal(est.fit_transform(X), codes)

    def test_unfitted(self):
        from sklearn.exceptions import NotFittedError

        with pytest.raises(NotFittedError):
            ResidualQuantizer().transform(np.zeros((1, 2)))
