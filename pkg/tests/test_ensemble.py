import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mevi.cluster_search import RankedClusters
from mevi.dense import exact_search
from mevi.ensemble import (
    BELOW_MIN_MARGIN,
    DEFAULT_ALPHAS,
    DEFAULT_BETAS,
    EnsembleParams,
    cluster_candidates,
    cluster_score,
    cluster_scores,
    fuse,
    search_clusters_only,
)
from mevi.errors import DataError
from mevi.eval.metrics import recall_at_k
from mevi.eval.synthetic import SyntheticSpec, gen_synthetic
from mevi.model import MEVI

RANKED = RankedClusters(tuple((i,) for i in range(100)), tuple(-float(i) for i in range(100)))


def test_worked_example():
    res = fuse([0, 1], [0.80, 0.85], [0, -1], 1, alpha=0.5, beta=0.02, missing_policy="zero", K=2, metric="ip")
    assert res.ordinals.tolist() == [0, 1]
    assert abs(res.scores[0] - 1.30) <= 1e-9
    assert abs(res.scores[1] - 0.85) <= 1e-9


def test_cluster_score_examples():
    assert cluster_score((0,), RANKED, beta=0.3) == 1.0
    assert cluster_score((57,), RANKED, beta=0.0) == 1.0
    assert cluster_score((50,), RANKED, beta=0.02) == pytest.approx(0.5, abs=1e-12)
    assert cluster_score((500,), RANKED, beta=0.02) == 0.0


def test_below_min_policy():
    floor = cluster_score((500,), RANKED, beta=0.02, missing_policy="below-min")
    lowest = cluster_score((99,), RANKED, beta=0.02)
    assert floor == pytest.approx(lowest - BELOW_MIN_MARGIN, abs=1e-15)
    assert 0 < floor < lowest


@given(st.lists(st.integers(-1, 50), min_size=1, max_size=30), st.floats(0, 1), st.integers(1, 51))
def test_cluster_scores_bounded_and_monotone(ranks, beta, n_ranked):
    ranks = [min(r, n_ranked - 1) for r in ranks]
    for policy in ("zero", "below-min"):
        s = cluster_scores(np.array(ranks), n_ranked, beta, policy)
        assert np.all(s <= 1.0) and np.all(s >= -BELOW_MIN_MARGIN)
        inside = sorted((r, v) for r, v in zip(ranks, s) if r >= 0)
        assert all(a[1] >= b[1] for a, b in zip(inside, inside[1:]))
        if inside:
            assert all(v < inside[-1][1] or r >= 0 for r, v in zip(ranks, s))


def test_fuse_tie_breaks():
    # equal fused scores: higher s0 first, then lower ordinal
    res = fuse([7, 3, 5], [1.0, 0.5, 1.0], [-1, 0, -1], 1, alpha=0.5, beta=0.0, missing_policy="zero",
               K=3, metric="ip")
    assert res.ordinals.tolist() == [5, 7, 3]
    np.testing.assert_array_equal(res.base_scores, [1.0, 1.0, 0.5])


def test_params_validation():
    assert EnsembleParams().depth == 1000 and EnsembleParams(dense_depth=50).depth == 50
    for bad in (dict(alpha=-1), dict(k=0), dict(missing_policy="drop"), dict(dense_depth=0)):
        with pytest.raises(DataError):
            EnsembleParams(**bad)
    assert DEFAULT_ALPHAS[0] == 0.1 and DEFAULT_ALPHAS[-1] == 1.0 and len(DEFAULT_ALPHAS) == 10
    assert DEFAULT_BETAS[0] == 0.005 and DEFAULT_BETAS[-1] == 0.05 and len(DEFAULT_BETAS) == 10


def test_alpha_zero_is_s0_order(small_model, small_corpus):
    _, queries, _ = small_corpus
    for q in queries.vectors[:20]:
        res = small_model.search(q, "ensemble", alpha=0.0, k=10, K=50)
        np.testing.assert_array_equal(res.scores, res.base_scores)
        assert np.all(np.diff(res.scores) <= 0)


def test_score_decomposition(small_model, small_corpus):
    _, queries, _ = small_corpus
    q = queries.vectors[0]
    ranked = small_model.rank_clusters(q, 10)
    res = small_model.search(q, "ensemble", ranked=ranked, K=200)
    exact = dict(exact_search(small_model.store_, q, small_model.store_.size).entries)
    rank_of = ranked.rank_of()
    for o, s, s0 in zip(res.ordinals, res.scores, res.base_scores):
        assert s0 == exact[int(o)]
        r = rank_of.get(small_model.index_.code_of(int(o)), -1)
        sc = 1.0 / (0.02 * r + 1.0) if r >= 0 else 0.0
        assert s - 0.5 * sc == pytest.approx(s0, abs=1e-12)


def test_all_clusters_reduces_to_exact(small_model, small_corpus):
    _, queries, _ = small_corpus
    n = small_model.index_.n_clusters
    for q in queries.vectors[:5]:
        ranked = small_model.rank_clusters(q, n, beam_width=n)
        a = search_clusters_only(small_model.store_, small_model.index_, q, ranked, 30, "ip")
        b = exact_search(small_model.store_, q, 30)
        np.testing.assert_array_equal(a.ordinals, b.ordinals)


def test_cluster_candidates_only_from_ranked(small_model, small_corpus):
    _, queries, _ = small_corpus
    ranked = small_model.rank_clusters(queries.vectors[0], 3)
    ords, ranks = cluster_candidates(small_model.index_, ranked)
    for o, r in zip(ords, ranks):
        assert small_model.index_.code_of(int(o)) == ranked.codes[r]


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_oracle_cluster_ranking_never_hurts(seed):
    docs, queries, qrels = gen_synthetic(SyntheticSpec(n_docs=2000, dim=16, noise_sigma=0.6, n_queries=100,
                                                       seed=seed))
    model = MEVI(n_layers=3, n_codewords=16, dense="exact").fit(docs.vectors, docs.ids)
    dense_run, ens_run = {}, {}
    for qid, q in zip(queries.ids, queries.vectors):
        rel = next(iter(qrels[qid]))
        code = model.index_.code_of(model.id_to_ordinal_[rel])
        oracle = RankedClusters((code,), (0.0,))
        dense_run[qid] = model.external_ids(model.search(q, "exact", K=10).ordinals)
        ens_run[qid] = model.external_ids(model.search(q, "ensemble", ranked=oracle, k=1, K=10).ordinals)
    assert recall_at_k(ens_run, qrels, 10) >= recall_at_k(dense_run, qrels, 10)
