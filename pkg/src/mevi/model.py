"""The model-enhanced vector index as one estimator.

``MEVI.fit`` clusters the corpus into a code tree (residual quantization by
default), indexes documents by code, and builds the dense backend.  Queries
can then be answered by exact scan, HNSW, cluster-only search or the
ensemble of dense and cluster candidates.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._rwlock import RWLock
from ._validation import check_ids, check_matrix, check_vector
from .cluster_index import ClusterIndex, build_index
from .cluster_search import RankedClusters, beam_search_clusters, default_beam_width
from .dense.exact import EmbeddingStore, ScoredDocs, check_metric, exact_search
from .dense.hnsw import HNSWIndex
from .ensemble import (
    DEFAULT_ALPHAS,
    DEFAULT_BETAS,
    EnsembleParams,
    ensemble_candidates,
    fuse,
    search_clusters_only,
)
from .errors import DataError
from .eval.metrics import metric_value, parse_metric
from .quantizer import build_hierarchical_kmeans, build_rq

BUILDERS = {"rq": build_rq, "hkmeans": build_hierarchical_kmeans}
MODES = ("exact", "hnsw", "clusters", "ensemble")
DENSE_BACKENDS = ("exact", "hnsw")


class MEVI(BaseEstimator):
    """Cluster-code index plus dense retrieval.

    Parameters mirror the knobs of the method: ``n_layers`` x ``n_codewords``
    code space, ``n_clusters`` (k) clusters retrieved per query, ``top_k`` (K)
    documents returned, ``alpha``/``beta`` for fusion.

    Concurrency: any number of threads may search at once; ``add_document``,
    ``remove_document`` and ``compact`` take an exclusive lock and wait for
    in-flight searches to drain.
    """

    def __init__(self, builder="rq", n_layers=4, n_codewords=32, metric="ip", dense="hnsw",
                 hnsw_M=16, ef_construction=200, ef_search=64, n_clusters=100, top_k=1000,
                 dense_depth=None, beam_width=None, constrained=True, alpha=0.5, beta=0.02,
                 missing_policy="zero", max_iter=50, tol=1e-4, random_state=0):
        self.builder = builder
        self.n_layers = n_layers
        self.n_codewords = n_codewords
        self.metric = metric
        self.dense = dense
        self.hnsw_M = hnsw_M
        self.ef_construction = ef_construction
        self.ef_search = ef_search
        self.n_clusters = n_clusters
        self.top_k = top_k
        self.dense_depth = dense_depth
        self.beam_width = beam_width
        self.constrained = constrained
        self.alpha = alpha
        self.beta = beta
        self.missing_policy = missing_policy
        self.max_iter = max_iter
        self.tol = tol
        self.random_state = random_state

    # -- construction -------------------------------------------------

    def _check_params(self):
        if self.builder not in BUILDERS:
            raise DataError(f"unknown builder {self.builder!r}; expected one of {tuple(BUILDERS)}")
        if self.dense not in DENSE_BACKENDS:
            raise DataError(f"unknown dense backend {self.dense!r}")
        check_metric(self.metric)
        self.ensemble_params()

    def fit(self, X, ids=None):
        self._check_params()
        X = check_matrix(X)
        ids = check_ids(ids, len(X))
        cb, codes, report = BUILDERS[self.builder](
            X, self.n_layers, self.n_codewords, max_iters=self.max_iter, tol=self.tol,
            seed=self.random_state or 0,
        )
        self.report_ = report
        self._install(cb, EmbeddingStore.from_array(X), build_index(codes), list(ids))
        return self

    @classmethod
    def from_parts(cls, codebook, store: EmbeddingStore, index: ClusterIndex, ids: list, **params) -> "MEVI":
        """Assemble a fitted model from loaded pieces. ``ids[o]`` is ``None`` for dead ordinals."""
        model = cls(**params)
        model._check_params()
        if store.dim != codebook.dim:
            raise DataError("codebook and embeddings disagree on dim")
        if len(ids) != store.size:
            raise DataError("id table does not cover every ordinal")
        model._install(codebook, store, index, ids)
        return model

    def _install(self, codebook, store, index, ids):
        self.codebook_ = codebook
        self.store_ = store
        self.index_ = index
        self.ids_ = ids
        self.id_to_ordinal_ = {i: o for o, i in enumerate(ids) if i is not None}
        self.n_features_in_ = codebook.dim
        self._lock = RWLock()
        self.hnsw_ = None
        if self.dense == "hnsw":
            self._build_hnsw()

    def _build_hnsw(self):
        h = HNSWIndex(M=self.hnsw_M, ef_construction=self.ef_construction, ef_search=self.ef_search,
                      metric=self.metric, random_state=self.random_state)
        self.hnsw_ = h.fit(self.store_.vectors) if self.store_.size else None

    def hnsw(self) -> HNSWIndex:
        """The HNSW backend, built on first use when ``dense="exact"``."""
        check_is_fitted(self, "codebook_")
        if self.hnsw_ is None:
            with self._lock.write():
                if self.hnsw_ is None:
                    self._build_hnsw()
        return self.hnsw_

    def ensemble_params(self, **overrides) -> EnsembleParams:
        kw = dict(alpha=self.alpha, beta=self.beta, k=self.n_clusters, K=self.top_k,
                  missing_policy=self.missing_policy, dense_depth=self.dense_depth)
        kw.update({k: v for k, v in overrides.items() if v is not None})
        return EnsembleParams(**kw)

    # -- updates -------------------------------------------------------

    def add_document(self, doc_id: str, v) -> int:
        """Encode ``v`` against the frozen codebook and make it searchable everywhere."""
        check_is_fitted(self, "codebook_")
        doc_id = check_ids([doc_id], 1)[0]
        v = check_vector(v, self.codebook_.dim)
        code = self.codebook_.encode(v[None, :])[0]
        with self._lock.write():
            if doc_id in self.id_to_ordinal_:
                raise DataError(f"duplicate id {doc_id!r}")
            o = self.store_.append(v)
            self.index_.add(o, code)
            if self.hnsw_ is not None:
                h_o = int(self.hnsw_.add(v[None, :])[0])
                assert h_o == o, "dense backend out of step with embedding store"
            self.ids_.append(doc_id)
            self.id_to_ordinal_[doc_id] = o
        return o

    def remove_document(self, doc_id: str) -> None:
        check_is_fitted(self, "codebook_")
        with self._lock.write():
            o = self.id_to_ordinal_.pop(str(doc_id), None)
            if o is None:
                raise DataError(f"unknown id {doc_id!r}")
            self.index_.remove(o)
            self.store_.kill(o)
            self.ids_[o] = None

    def compact(self) -> None:
        """Drop tombstoned rows and renumber ordinals densely; rebuilds the HNSW graph."""
        check_is_fitted(self, "codebook_")
        with self._lock.write():
            live = self.store_.live_ordinals()
            store = EmbeddingStore(self.store_.dim, capacity=max(1, len(live)))
            if len(live):
                store.extend(self.store_.vectors[live])
            index = ClusterIndex(self.index_.m)
            for new, old in enumerate(live.tolist()):
                index.add(new, self.index_.doc_code[old])
            ids = [self.ids_[o] for o in live.tolist()]
            had_hnsw = self.hnsw_ is not None
            self.store_, self.index_, self.ids_ = store, index, ids
            self.id_to_ordinal_ = {i: o for o, i in enumerate(ids)}
            self.hnsw_ = None
            if had_hnsw:
                self._build_hnsw()

    # -- search --------------------------------------------------------

    def external_ids(self, ordinals) -> list[str]:
        return [self.ids_[int(o)] for o in ordinals]

    def rank_clusters(self, q, k: int | None = None, beam_width: int | None = None) -> RankedClusters:
        check_is_fitted(self, "codebook_")
        k = self.n_clusters if k is None else k
        with self._lock.read():
            return self._rank_clusters(q, k, beam_width)

    def _rank_clusters(self, q, k, beam_width):
        if self.constrained:
            available = self.index_.n_clusters
            if available == 0:
                raise DataError("empty index")
            if k > available:
                warnings.warn(f"k={k} exceeds the {available} non-empty clusters; clamped", stacklevel=3)
                k = available
        if beam_width is None:
            beam_width = self.beam_width if self.beam_width is not None else default_beam_width(k)
        beam_width = max(beam_width, k)
        return beam_search_clusters(q, self.codebook_, self.index_, beam_width, k, self.constrained)

    def _dense(self, q, K, backend, ef_search=None) -> ScoredDocs:
        if backend == "exact":
            return exact_search(self.store_, q, K, self.metric)
        h = self.hnsw_
        if h is None:
            raise DataError("HNSW backend not built")
        ef = max(self.ef_search if ef_search is None else ef_search, K)
        return h.search(q, K, ef, live=self.store_.live_mask)

    def search(self, q, mode: str = "ensemble", *, k: int | None = None, K: int | None = None,
               ranked: RankedClusters | None = None, alpha=None, beta=None, missing_policy=None,
               dense_depth=None, ef_search=None, beam_width=None) -> ScoredDocs:
        """Top-``K`` documents for one query.

        ``ranked`` supplies an external cluster ranking (e.g. from a trained
        decoder) instead of the built-in beam search; it is truncated to ``k``.
        """
        check_is_fitted(self, "codebook_")
        if mode not in MODES:
            raise DataError(f"unknown mode {mode!r}; expected one of {MODES}")
        params = self.ensemble_params(alpha=alpha, beta=beta, k=k, K=K, missing_policy=missing_policy,
                                      dense_depth=dense_depth)
        if mode == "hnsw":
            self.hnsw()
        elif mode == "ensemble" and self.dense == "hnsw" and self.hnsw_ is None:
            self.hnsw()
        q = check_vector(q, self.codebook_.dim)
        with self._lock.read():
            if mode in ("exact", "hnsw"):
                return self._dense(q, params.K, mode, ef_search)
            if ranked is None:
                ranked = self._rank_clusters(q, params.k, beam_width)
            else:
                ranked = ranked.head(params.k)
            if self.index_.live_count == 0:
                raise DataError("empty index")
            if mode == "clusters":
                return search_clusters_only(self.store_, self.index_, q, ranked, params.K, self.metric)
            dense = self._dense(q, params.depth, self.dense, ef_search)
            cand = ensemble_candidates(self.store_, self.index_, q, ranked, dense, self.metric)
            return fuse(cand.ordinals, cand.s0, cand.ranks, cand.n_ranked, params.alpha, params.beta,
                        params.missing_policy, params.K, self.metric)

    def search_batch(self, Q, mode: str = "ensemble", *, rankings=None, threads: int = 1, **kw) -> list[ScoredDocs]:
        """Search every row of ``Q``; ``rankings[i]`` optionally overrides query ``i``'s clusters."""
        Q = check_matrix(Q, dim=self.codebook_.dim)

        def one(i):
            r = None if rankings is None else rankings[i]
            return self.search(Q[i], mode, ranked=r, **kw)

        if threads <= 1:
            return [one(i) for i in range(len(Q))]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one, range(len(Q))))

    def run(self, Q, qids, mode: str = "ensemble", **kw) -> dict[str, list[str]]:
        """Like :meth:`search_batch` but returns ``{query_id: [doc_id, ...]}``."""
        results = self.search_batch(Q, mode, **kw)
        return {str(qid): self.external_ids(r.ordinals) for qid, r in zip(qids, results)}

    # -- tuning --------------------------------------------------------

    def grid_search(self, Q, qids, qrels, alphas=DEFAULT_ALPHAS, betas=DEFAULT_BETAS, target="mrr@10",
                    k: int | None = None, K: int | None = None, rankings=None, missing_policy=None):
        """Evaluate ``target`` for every (alpha, beta) pair on fixed candidate sets.

        Returns ``(best_alpha, best_beta, best_value, table)`` with ``table`` a
        list of ``{"alpha", "beta", "value"}`` rows.  Ties go to the smaller
        alpha, then the smaller beta.
        """
        if not len(alphas) or not len(betas):
            raise DataError("alpha and beta grids must be non-empty")
        if len(qids) == 0:
            raise DataError("empty query set")
        spec = parse_metric(target)
        params = self.ensemble_params(k=k, K=K, missing_policy=missing_policy)
        Q = check_matrix(Q, dim=self.codebook_.dim)
        if self.dense == "hnsw":
            self.hnsw()
        cands = []
        with self._lock.read():
            for i, q in enumerate(Q):
                ranked = rankings[i].head(params.k) if rankings is not None else \
                    self._rank_clusters(q, params.k, None)
                dense = self._dense(q, params.depth, self.dense)
                cands.append(ensemble_candidates(self.store_, self.index_, q, ranked, dense, self.metric))
        table = []
        best = None
        for a in sorted(alphas):
            for b in sorted(betas):
                run = {}
                for qid, c in zip(qids, cands):
                    res = fuse(c.ordinals, c.s0, c.ranks, c.n_ranked, a, b, params.missing_policy,
                               params.K, self.metric)
                    run[str(qid)] = self.external_ids(res.ordinals)
                value = metric_value(spec, run, qrels)
                table.append({"alpha": a, "beta": b, "value": value})
                if best is None or value > best[2]:
                    best = (a, b, value)
        return best[0], best[1], best[2], table

    def __getstate__(self):
        state = self.__dict__.copy()
        state.pop("_lock", None)
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        if "codebook_" in state:
            self._lock = RWLock()
