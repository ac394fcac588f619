"""Hierarchical navigable small world graph index.

Graph construction follows the usual layered scheme: a node draws a level from
a geometric distribution, greedy descent finds an entry point, and on each of
its layers it is linked to neighbours chosen by the diversity heuristic.  The
traversal code lives in ``_hnsw_kernels`` (numba); this module owns storage,
growth and the public API.

Candidates found by the graph are rescored with :func:`row_scores`, so any
document returned carries exactly the score exact search would give it.
"""

from __future__ import annotations

import math
import threading

import numpy as np
from sklearn.base import BaseEstimator

from .._rwlock import RWLock
from .._validation import check_matrix, check_positive_int, check_vector
from ..errors import DataError
from . import _hnsw_kernels as _k
from .exact import ScoredDocs, check_metric, rank_scores, row_scores

MAX_LEVEL = 16


class HNSWIndex(BaseEstimator):
    """Approximate top-K search over a growing set of vectors.

    Node ``i`` is the ``i``-th vector ever added, so ordinals line up with an
    :class:`~mevi.dense.exact.EmbeddingStore` fed in the same order.  Deleted
    documents stay in the graph and are filtered out via the ``live`` mask
    given to :meth:`search`.

    Searches may run concurrently; :meth:`add` takes the write lock.
    """

    def __init__(self, M=16, ef_construction=200, ef_search=64, metric="ip", random_state=0):
        self.M = M
        self.ef_construction = ef_construction
        self.ef_search = ef_search
        self.metric = metric
        self.random_state = random_state

    def _reset(self, dim: int, capacity: int) -> None:
        check_positive_int(self.M, "M", minimum=2)
        check_positive_int(self.ef_construction, "ef_construction")
        check_metric(self.metric)
        self.dim_ = dim
        self._kmetric = _k.METRIC_L2 if self.metric == "l2" else _k.METRIC_IP
        cap = max(16, capacity)
        self._data = np.zeros((cap, dim), dtype=np.float32)
        self._raw = np.zeros((cap, dim), dtype=np.float32) if self.metric == "cosine" else None
        self._levels = np.zeros(cap, dtype=np.int64)
        self._slot = np.full(cap, -1, dtype=np.int64)
        self._nbr0 = np.zeros((cap, 2 * self.M), dtype=np.int32)
        self._cnt0 = np.zeros(cap, dtype=np.int32)
        self._nbru = np.zeros((16, MAX_LEVEL, self.M), dtype=np.int32)
        self._cntu = np.zeros((16, MAX_LEVEL), dtype=np.int32)
        self._n_upper = 0
        self._visited = np.zeros(cap, dtype=np.int64)
        self._linkable = np.ones(cap, dtype=np.bool_)
        self._state = np.array([-1, 0, 0], dtype=np.int64)
        self._n = 0
        self._rng = np.random.default_rng(self.random_state)
        self._ml = 1.0 / math.log(self.M)
        self._lock = RWLock()
        self._tls = threading.local()

    def _grow(self, n: int) -> None:
        cap = len(self._data)
        if n > cap:
            cap = max(n, 2 * cap)

            def grown(a, fill=0):
                out = np.full((cap,) + a.shape[1:], fill, dtype=a.dtype)
                out[: len(a)] = a
                return out

            self._data = grown(self._data)
            if self._raw is not None:
                self._raw = grown(self._raw)
            self._levels = grown(self._levels)
            self._slot = grown(self._slot, -1)
            self._nbr0 = grown(self._nbr0)
            self._cnt0 = grown(self._cnt0)
            self._visited = np.zeros(cap, dtype=np.int64)
            self._linkable = np.ones(cap, dtype=np.bool_)

    def _grow_upper(self, n_upper: int) -> None:
        cap = len(self._nbru)
        if n_upper > cap:
            cap = max(n_upper, 2 * cap)
            nbru = np.zeros((cap, MAX_LEVEL, self.M), dtype=np.int32)
            nbru[: len(self._nbru)] = self._nbru
            cntu = np.zeros((cap, MAX_LEVEL), dtype=np.int32)
            cntu[: len(self._cntu)] = self._cntu
            self._nbru, self._cntu = nbru, cntu

    def fit(self, X, y=None):
        X = check_matrix(X)
        self._reset(X.shape[1], X.shape[0])
        self._add(X)
        return self

    def add(self, X) -> np.ndarray:
        """Insert rows of ``X`` (or a single vector); returns their ordinals."""
        if not hasattr(self, "dim_"):
            X = check_matrix(X)
            self._reset(X.shape[1], X.shape[0])
        with self._lock.write():
            return self._add(check_matrix(X, dim=self.dim_))

    def _add(self, X: np.ndarray) -> np.ndarray:
        start, stop = self._n, self._n + len(X)
        self._grow(stop)
        if self._raw is not None:
            self._raw[start:stop] = X
            norms = np.linalg.norm(X.astype(np.float64), axis=1, keepdims=True)
            X = (X / np.where(norms > 0, norms, 1.0)).astype(np.float32)
        self._data[start:stop] = X
        u = self._rng.random(len(X))
        levels = np.minimum((-np.log1p(-u) * self._ml).astype(np.int64), MAX_LEVEL)
        self._levels[start:stop] = levels
        upper = np.flatnonzero(levels > 0) + start
        self._grow_upper(self._n_upper + len(upper))
        self._slot[upper] = np.arange(self._n_upper, self._n_upper + len(upper))
        self._n_upper += len(upper)
        _k.insert_many(self._data, start, stop, self._levels, self._state, self.M, 2 * self.M,
                       self.ef_construction, self._kmetric, self._nbr0, self._cnt0, self._slot,
                       self._nbru, self._cntu, self._visited, self._linkable)
        self._n = stop
        return np.arange(start, stop)

    @property
    def n_nodes(self) -> int:
        return getattr(self, "_n", 0)

    def _thread_visited(self) -> tuple[np.ndarray, int]:
        tl = self._tls
        buf = getattr(tl, "visited", None)
        if buf is None or len(buf) < len(self._data):
            buf = tl.visited = np.zeros(len(self._data), dtype=np.int64)
            tl.tag = 0
        tl.tag += 1
        return buf, tl.tag

    def search(self, q, K: int, ef_search: int | None = None, live=None) -> ScoredDocs:
        """Approximate top-``K``. ``live`` (bool per ordinal) hides deleted documents."""
        if not hasattr(self, "dim_"):
            raise DataError("empty index")
        ef = self.ef_search if ef_search is None else ef_search
        K = check_positive_int(K, "K")
        if ef < K:
            raise DataError(f"ef_search={ef} must be >= K={K}")
        q = check_vector(q, self.dim_)
        with self._lock.read():
            if self._n == 0:
                raise DataError("empty index")
            mask = np.ones(len(self._data), dtype=np.bool_)
            if live is not None:
                live = np.asarray(live, dtype=bool)
                mask[: len(live)] = live
            mask[self._n :] = False
            q32 = np.ascontiguousarray(q, dtype=np.float32)
            if self._raw is not None:
                norm = float(np.linalg.norm(q.astype(np.float64)))
                if norm > 0:
                    q32 = (q32 / norm).astype(np.float32)
            visited, tag = self._thread_visited()
            _, ids = _k.search(self._data, q32, ef, ef, self._state, self._kmetric, self._nbr0,
                               self._cnt0, self._slot, self._nbru, self._cntu, visited, tag, mask)
            rows = self._raw if self._raw is not None else self._data
            scores = row_scores(rows[ids], q, self.metric)
        ords, sc = rank_scores(ids, scores, K)
        return ScoredDocs(ords, sc, self.metric)

    def kneighbors(self, X, n_neighbors: int = 10):
        """Batch search returning ``(scores, ordinals)`` arrays padded with ``-1`` ordinals."""
        X = check_matrix(X, dim=self.dim_)
        ords = np.full((len(X), n_neighbors), -1, dtype=np.int64)
        scores = np.full((len(X), n_neighbors), -np.inf)
        for i, q in enumerate(X):
            res = self.search(q, n_neighbors, max(self.ef_search, n_neighbors))
            ords[i, : len(res)] = res.ordinals
            scores[i, : len(res)] = res.scores
        return scores, ords

    def degree_ok(self) -> bool:
        """Graph sanity: neighbour ids exist and degree caps hold on every layer."""
        n = self._n
        if (self._cnt0[:n] > 2 * self.M).any():
            return False
        for i in range(n):
            nb = self._nbr0[i, : self._cnt0[i]]
            if (nb >= n).any() or (nb < 0).any():
                return False
            s = self._slot[i]
            for layer in range(1, self._levels[i] + 1):
                c = self._cntu[s, layer - 1]
                nb = self._nbru[s, layer - 1, :c]
                if c > self.M or (nb >= n).any() or (self._levels[nb] < layer).any():
                    return False
        return True

    def __getstate__(self):
        state = self.__dict__.copy()
        state.pop("_lock", None)
        state.pop("_tls", None)
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        if "dim_" in state:
            self._lock = RWLock()
            self._tls = threading.local()
