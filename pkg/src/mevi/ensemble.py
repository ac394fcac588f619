"""Fusing dense retrieval with top-k cluster rankings.

A candidate ``x`` gets ``s(x) = s0(x) + alpha * sc(x)`` where ``s0`` is its
exact embedding similarity and ``sc(x) = 1 / (beta * r + 1)`` for a document
whose cluster sits at 0-based rank ``r``.  Documents outside the returned
clusters get 0 (``missing_policy="zero"``) or slightly less than the lowest
in-ranking value (``"below-min"``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cluster_index import ClusterIndex
from .cluster_search import RankedClusters
from .dense.exact import EmbeddingStore, ScoredDocs, rank_scores, row_scores
from .errors import DataError

MISSING_POLICIES = ("zero", "below-min")
BELOW_MIN_MARGIN = 1e-6

DEFAULT_ALPHAS = tuple(round(0.1 * i, 10) for i in range(1, 11))
DEFAULT_BETAS = tuple(round(0.005 * i, 10) for i in range(1, 11))


@dataclass(frozen=True)
class EnsembleParams:
    alpha: float = 0.5
    beta: float = 0.02
    k: int = 100
    K: int = 1000
    missing_policy: str = "zero"
    dense_depth: int | None = None  # K'; defaults to K

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise DataError("alpha and beta must be >= 0")
        if self.k < 1 or self.K < 1:
            raise DataError("k and K must be >= 1")
        if self.missing_policy not in MISSING_POLICIES:
            raise DataError(f"missing_policy must be one of {MISSING_POLICIES}")
        if self.dense_depth is not None and self.dense_depth < 1:
            raise DataError("dense_depth must be >= 1")

    @property
    def depth(self) -> int:
        return self.K if self.dense_depth is None else self.dense_depth


def cluster_scores(ranks: np.ndarray, n_ranked: int, beta: float, missing_policy: str = "zero") -> np.ndarray:
    """Vectorised cluster score; ``ranks`` uses -1 for documents outside the ranking."""
    ranks = np.asarray(ranks)
    out = 1.0 / (beta * np.maximum(ranks, 0) + 1.0)
    if missing_policy == "zero":
        floor = 0.0
    elif missing_policy == "below-min":
        floor = 1.0 / (beta * max(n_ranked - 1, 0) + 1.0) - BELOW_MIN_MARGIN
    else:
        raise DataError(f"missing_policy must be one of {MISSING_POLICIES}")
    return np.where(ranks >= 0, out, floor)


def cluster_score(code, ranked: RankedClusters, beta: float, missing_policy: str = "zero") -> float:
    """Cluster score of a document whose full code is ``code``."""
    if len(ranked) == 0:
        raise DataError("ranked clusters must not be empty")
    rank = ranked.rank_of().get(tuple(int(x) for x in code), -1)
    return float(cluster_scores(np.array([rank]), len(ranked), beta, missing_policy)[0])


def fuse(ordinals, s0, ranks, n_ranked: int, alpha: float, beta: float, missing_policy: str,
         K: int, metric: str) -> ScoredDocs:
    """Rank candidates by ``s0 + alpha * sc``; ties by higher ``s0``, then lower ordinal."""
    ordinals = np.asarray(ordinals, dtype=np.int64)
    s0 = np.asarray(s0, dtype=np.float64)
    s = s0 + alpha * cluster_scores(ranks, n_ranked, beta, missing_policy)
    order = np.lexsort((ordinals, -s0, -s))[:K]
    return ScoredDocs(ordinals[order], s[order], metric, base_scores=s0[order])


def cluster_candidates(index: ClusterIndex, ranked: RankedClusters) -> tuple[np.ndarray, np.ndarray]:
    """Live members of the ranked clusters with the (best) rank of their cluster."""
    ords: list[int] = []
    ranks: list[int] = []
    seen: set[int] = set()
    for r, code in enumerate(ranked.codes):
        for o in index.postings.get(code, ()):
            if o not in seen:
                seen.add(o)
                ords.append(o)
                ranks.append(r)
    return np.asarray(ords, dtype=np.int64), np.asarray(ranks, dtype=np.int64)


def search_clusters_only(store: EmbeddingStore, index: ClusterIndex, q, ranked: RankedClusters, K: int,
                         metric: str) -> ScoredDocs:
    """Exact similarity ranking restricted to members of the ranked clusters."""
    ords, _ = cluster_candidates(index, ranked)
    if len(ords) == 0:
        return ScoredDocs(ords, np.zeros(0), metric)
    scores = row_scores(store.vectors[ords], q, metric)
    o, s = rank_scores(ords, scores, K)
    return ScoredDocs(o, s, metric)


@dataclass(frozen=True)
class Candidates:
    """Union of dense and cluster candidates with what fusion needs."""

    ordinals: np.ndarray
    s0: np.ndarray
    ranks: np.ndarray
    n_ranked: int


def ensemble_candidates(store: EmbeddingStore, index: ClusterIndex, q, ranked: RankedClusters,
                        dense: ScoredDocs, metric: str) -> Candidates:
    c_ords, c_ranks = cluster_candidates(index, ranked)
    ords = np.union1d(np.asarray(dense.ordinals, dtype=np.int64), c_ords)
    rank_of = dict(zip(c_ords.tolist(), c_ranks.tolist()))
    ranks = np.fromiter((rank_of.get(o, -1) for o in ords.tolist()), dtype=np.int64, count=len(ords))
    # always exact s0, also for documents the dense backend already scored
    s0 = row_scores(store.vectors[ords], q, metric)
    return Candidates(ords, s0, ranks, len(ranked))


def ensemble_search(store: EmbeddingStore, index: ClusterIndex, q, ranked: RankedClusters,
                    dense: ScoredDocs, params: EnsembleParams, metric: str) -> ScoredDocs:
    cand = ensemble_candidates(store, index, q, ranked, dense, metric)
    return fuse(cand.ordinals, cand.s0, cand.ranks, cand.n_ranked, params.alpha, params.beta,
                params.missing_policy, params.K, metric)
