"""Embedding storage and exact (brute-force) scoring."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .._validation import check_matrix, check_vector
from ..errors import DataError

METRICS = ("ip", "cosine", "l2")

_CHUNK_ROWS = 1 << 16


def check_metric(metric: str) -> str:
    if metric not in METRICS:
        raise DataError(f"unknown metric {metric!r}; expected one of {METRICS}")
    return metric


@dataclass(frozen=True)
class ScoredDocs:
    """Ranked documents, best first. Scores are "higher is better" for every metric
    (L2 is reported as the negated squared distance).

    ``base_scores`` carries the plain similarity when ``scores`` are fused ones.
    """

    ordinals: np.ndarray
    scores: np.ndarray
    metric: str
    base_scores: np.ndarray | None = None

    def __len__(self):
        return len(self.ordinals)

    @property
    def entries(self) -> list[tuple[int, float]]:
        return [(int(o), float(s)) for o, s in zip(self.ordinals, self.scores)]

    def head(self, k: int) -> "ScoredDocs":
        base = None if self.base_scores is None else self.base_scores[:k]
        return ScoredDocs(self.ordinals[:k], self.scores[:k], self.metric, base)


def row_scores(rows: np.ndarray, q: np.ndarray, metric: str) -> np.ndarray:
    """Similarity of ``q`` to every row, in float64.

    Each score is an elementwise product reduced over its own row, so a
    document gets the identical value whether it is scored alone, in a
    candidate subset, or in a full scan.
    """
    q = np.asarray(q, dtype=np.float64)
    n = rows.shape[0]
    out = np.empty(n, dtype=np.float64)
    if metric == "cosine":
        qn = np.sqrt((q * q).sum())
    for s in range(0, n, _CHUNK_ROWS):
        r = rows[s : s + _CHUNK_ROWS].astype(np.float64)
        if metric == "l2":
            diff = r - q
            out[s : s + _CHUNK_ROWS] = -(diff * diff).sum(axis=1)
            continue
        dots = (r * q).sum(axis=1)
        if metric == "cosine":
            denom = np.sqrt((r * r).sum(axis=1)) * qn
            safe = denom > 0
            dots = np.where(safe, dots / np.where(safe, denom, 1.0), 0.0)
        out[s : s + _CHUNK_ROWS] = dots
    return out


def rank_scores(ordinals: np.ndarray, scores: np.ndarray, K: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Sort by score descending, then ordinal ascending; keep at most ``K``."""
    ordinals = np.asarray(ordinals, dtype=np.int64)
    if K is not None and K < len(scores):
        kth = np.partition(scores, len(scores) - K)[len(scores) - K]
        sel = scores >= kth
        ordinals, scores = ordinals[sel], scores[sel]
    order = np.lexsort((ordinals, -scores))
    if K is not None:
        order = order[:K]
    return ordinals[order], scores[order]


class EmbeddingStore:
    """Growable float32 row store addressed by ordinal, with a live mask."""

    def __init__(self, dim: int, capacity: int = 1024):
        if dim < 1:
            raise DataError("dim must be >= 1")
        self.dim = dim
        self._data = np.zeros((max(1, capacity), dim), dtype=np.float32)
        self._live = np.zeros(max(1, capacity), dtype=bool)
        self._n = 0

    @classmethod
    def from_array(cls, X) -> "EmbeddingStore":
        X = check_matrix(X)
        store = cls(X.shape[1], capacity=X.shape[0])
        store.extend(X)
        return store

    def _reserve(self, n: int) -> None:
        if n <= len(self._data):
            return
        cap = max(n, 2 * len(self._data))
        data = np.zeros((cap, self.dim), dtype=np.float32)
        data[: self._n] = self._data[: self._n]
        live = np.zeros(cap, dtype=bool)
        live[: self._n] = self._live[: self._n]
        self._data, self._live = data, live

    def extend(self, X) -> np.ndarray:
        X = check_matrix(X, dim=self.dim)
        start = self._n
        self._reserve(start + len(X))
        self._data[start : start + len(X)] = X
        self._live[start : start + len(X)] = True
        self._n += len(X)
        return np.arange(start, self._n)

    def append(self, v) -> int:
        return int(self.extend(check_vector(v, self.dim)[None, :])[0])

    def kill(self, ordinal: int) -> None:
        if not self.is_live(ordinal):
            raise DataError(f"dead or unknown ordinal {ordinal}")
        self._live[ordinal] = False

    def is_live(self, ordinal: int) -> bool:
        return 0 <= ordinal < self._n and bool(self._live[ordinal])

    @property
    def size(self) -> int:
        """Number of ordinals ever allocated (live or not)."""
        return self._n

    @property
    def live_count(self) -> int:
        return int(self._live[: self._n].sum())

    @property
    def vectors(self) -> np.ndarray:
        return self._data[: self._n]

    @property
    def live_mask(self) -> np.ndarray:
        return self._live[: self._n]

    def live_ordinals(self) -> np.ndarray:
        return np.flatnonzero(self.live_mask)


def exact_search(store: EmbeddingStore, q, K: int, metric: str = "ip") -> ScoredDocs:
    """True top-``K`` over live documents; ties go to the lower ordinal."""
    check_metric(metric)
    if K < 1:
        raise DataError("K must be >= 1")
    q = check_vector(q, store.dim)
    live = store.live_ordinals()
    if len(live) == 0:
        raise DataError("empty corpus")
    scores = row_scores(store.vectors, q, metric)
    if len(live) < store.size:
        scores = scores[live]
    ords, sc = rank_scores(live, scores, K)
    return ScoredDocs(ords, sc, metric)


def score_candidates(store: EmbeddingStore, q, ordinals, metric: str = "ip") -> ScoredDocs:
    """Exact scores over exactly ``ordinals`` (deduplicated), best first."""
    check_metric(metric)
    q = check_vector(q, store.dim)
    ords = np.unique(np.asarray(ordinals, dtype=np.int64))
    if len(ords) and (ords[0] < 0 or ords[-1] >= store.size or not store.live_mask[ords].all()):
        raise DataError("dead ordinal in candidate set")
    scores = row_scores(store.vectors[ords], q, metric)
    ords, sc = rank_scores(ords, scores)
    return ScoredDocs(ords, sc, metric)
