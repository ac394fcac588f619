import pickle
import threading

import numpy as np
import pytest

from mevi.dense import EmbeddingStore, HNSWIndex, exact_search, rank_scores, row_scores, score_candidates
from mevi.errors import DataError
from oracles import naive_search

METRICS = ("ip", "cosine", "l2")


@pytest.fixture(scope="module")
def corpus():
    rng = np.random.default_rng(5)
    return rng.standard_normal((300, 12)).astype(np.float32), rng.standard_normal((15, 12)).astype(np.float32)


@pytest.mark.parametrize("metric", METRICS)
def test_exact_matches_naive(corpus, metric):
    X, Q = corpus
    store = EmbeddingStore.from_array(X)
    for q in Q:
        res = exact_search(store, q, 25, metric)
        ords, scores = naive_search(X, q, 25, metric)
        assert res.ordinals.tolist() == ords
        np.testing.assert_allclose(res.scores, scores, rtol=1e-12)


def test_cosine_self_match_first(corpus):
    X, _ = corpus
    store = EmbeddingStore.from_array(X)
    res = exact_search(store, X[17], 3, "cosine")
    assert res.ordinals[0] == 17
    assert res.scores[0] == pytest.approx(1.0, abs=1e-12)


def test_k_larger_than_corpus_returns_all_sorted(corpus):
    X, Q = corpus
    res = exact_search(EmbeddingStore.from_array(X), Q[0], 10_000)
    assert len(res) == len(X)
    assert np.all(np.diff(res.scores) <= 0)


def test_l2_scores_are_negated_squared_distances(corpus):
    X, Q = corpus
    res = exact_search(EmbeddingStore.from_array(X), Q[0], 1, "l2")
    d2 = ((X.astype(np.float64) - Q[0].astype(np.float64)) ** 2).sum(axis=1)
    assert res.scores[0] == pytest.approx(-d2.min(), rel=1e-12)


def test_ties_go_to_lower_ordinal():
    X = np.ones((6, 2), dtype=np.float32)
    res = exact_search(EmbeddingStore.from_array(X), np.ones(2), 4)
    assert res.ordinals.tolist() == [0, 1, 2, 3]
    o, s = rank_scores(np.array([5, 3, 9, 1]), np.array([1.0, 2.0, 2.0, 1.0]), 3)
    assert o.tolist() == [3, 9, 1]


def test_scores_identical_across_subsets(corpus):
    X, Q = corpus
    full = row_scores(X, Q[0], "ip")
    idx = np.array([5, 200, 7])
    np.testing.assert_array_equal(row_scores(X[idx], Q[0], "ip"), full[idx])


def test_score_candidates(corpus):
    X, Q = corpus
    store = EmbeddingStore.from_array(X)
    allres = score_candidates(store, Q[0], np.arange(len(X)))
    ex = exact_search(store, Q[0], len(X))
    np.testing.assert_array_equal(allres.ordinals, ex.ordinals)
    one = score_candidates(store, Q[0], [4])
    assert one.ordinals.tolist() == [4] and one.scores[0] == pytest.approx(float(X[4] @ Q[0]), rel=1e-6)
    store.kill(4)
    with pytest.raises(DataError):
        score_candidates(store, Q[0], [4])


def test_dead_rows_are_skipped(corpus):
    X, Q = corpus
    store = EmbeddingStore.from_array(X)
    top = exact_search(store, Q[0], 1).ordinals[0]
    store.kill(int(top))
    assert top not in exact_search(store, Q[0], 50).ordinals
    live = np.ones(len(X), dtype=bool)
    live[top] = False
    assert exact_search(store, Q[0], 50).ordinals.tolist() == naive_search(X, Q[0], 50, "ip", live)[0]


def test_store_growth_and_errors():
    store = EmbeddingStore(3, capacity=1)
    for i in range(10):
        assert store.append(np.full(3, i)) == i
    assert store.size == 10 and store.live_count == 10
    with pytest.raises(DataError):
        store.append(np.zeros(4))
    with pytest.raises(DataError):
        exact_search(EmbeddingStore(3), np.zeros(3), 1)
    with pytest.raises(DataError):
        exact_search(store, np.zeros(3), 1, "hamming")


class TestHNSW:
    @pytest.mark.parametrize("metric", METRICS)
    def test_exhaustive_ef_equals_exact(self, corpus, metric):
        X, Q = corpus
        X = X[:100]
        h = HNSWIndex(M=8, ef_construction=50, metric=metric).fit(X)
        store = EmbeddingStore.from_array(X)
        for q in Q:
            a = h.search(q, 10, ef_search=100)
            b = exact_search(store, q, 10, metric)
            np.testing.assert_array_equal(a.ordinals, b.ordinals)
            np.testing.assert_array_equal(a.scores, b.scores)

    def test_insert_then_find(self, corpus):
        X, _ = corpus
        h = HNSWIndex(M=8, ef_construction=40).fit(X[:200])
        v = np.full(12, 5.0, dtype=np.float32)
        (o,) = h.add(v)
        assert o == 200
        assert h.search(v, 1, 32).ordinals[0] == 200
        assert h.degree_ok()

    def test_live_mask_hides_documents(self, corpus):
        X, Q = corpus
        h = HNSWIndex(M=8, ef_construction=40).fit(X)
        top = h.search(Q[0], 5, 300).ordinals
        live = np.ones(len(X), dtype=bool)
        live[top[:2]] = False
        res = h.search(Q[0], 5, 300, live=live)
        assert not set(top[:2]) & set(res.ordinals.tolist())

    def test_pickle_round_trip(self, corpus):
        X, Q = corpus
        h = HNSWIndex(M=8, ef_construction=40).fit(X)
        h2 = pickle.loads(pickle.dumps(h))
        np.testing.assert_array_equal(h.search(Q[1], 10).ordinals, h2.search(Q[1], 10).ordinals)

    def test_deterministic_build(self, corpus):
        X, Q = corpus
        a = HNSWIndex(random_state=3).fit(X)
        b = HNSWIndex(random_state=3).fit(X)
        for q in Q:
            np.testing.assert_array_equal(a.search(q, 10).ordinals, b.search(q, 10).ordinals)

    def test_errors(self, corpus):
        X, Q = corpus
        with pytest.raises(DataError):
            HNSWIndex().search(Q[0], 1)
        h = HNSWIndex().fit(X)
        with pytest.raises(DataError, match="ef_search"):
            h.search(Q[0], 100, ef_search=10)
        with pytest.raises(DataError):
            h.search(Q[0][:3], 1)

    def test_concurrent_searches_agree(self, corpus):
        X, Q = corpus
        h = HNSWIndex(M=8).fit(X)
        expected = [h.search(q, 10).ordinals.tolist() for q in Q]
        errors = []

        def worker():
            for _ in range(5):
                for q, want in zip(Q, expected):
                    if h.search(q, 10).ordinals.tolist() != want:
                        errors.append(1)

        threads = [threading.Thread(target=worker) for _ in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert not errors

    def test_kneighbors_shape(self, corpus):
        X, Q = corpus
        scores, ords = HNSWIndex(M=8).fit(X[:5]).kneighbors(Q[:2], n_neighbors=8)
        assert ords.shape == (2, 8) and (ords[:, 5:] == -1).all()
