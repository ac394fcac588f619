"""K-means, residual quantization and the hierarchical k-means baseline.

All clustering arithmetic runs in float64 on top of float32 inputs.  Codewords
are rounded to float32 (the on-disk precision) *before* the final assignment
pass, and every nearest-codeword decision goes through :func:`nearest`, so
encoding a training vector later reproduces its build-time code bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_matrix, check_positive_int, check_vector
from .errors import DataError

Code = tuple[int, ...]

# elements per temporary (rows x codewords x dim) block
_BLOCK = 1 << 21


def sq_distances(R: np.ndarray, C: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances between rows of ``R`` and ``C`` (float64).

    Computed from explicit differences rather than the expanded
    ``|r|^2 - 2 r.c + |c|^2`` form: each entry depends only on its own pair of
    rows, so results do not change with batch size.
    """
    R = np.asarray(R, dtype=np.float64)
    C = np.asarray(C, dtype=np.float64)
    n, b = R.shape[0], C.shape[0]
    out = np.empty((n, b), dtype=np.float64)
    step = max(1, _BLOCK // max(1, b * C.shape[1]))
    for s in range(0, n, step):
        diff = R[s : s + step, None, :] - C[None, :, :]
        out[s : s + step] = (diff * diff).sum(axis=2)
    return out


def nearest(R: np.ndarray, C: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Index of the nearest row of ``C`` for every row of ``R`` (lowest index on ties)."""
    d2 = sq_distances(R, C)
    labels = np.argmin(d2, axis=1)
    return labels, d2[np.arange(len(labels)), labels]


def _nearest_fast(X: np.ndarray, sq_norms: np.ndarray, C: np.ndarray):
    # expanded form; only used inside Lloyd iterations, never for final codes
    d2 = (C * C).sum(axis=1)[None, :] - 2.0 * (X @ C.T)
    labels = np.argmin(d2, axis=1)
    dist = np.maximum(d2[np.arange(len(labels)), labels] + sq_norms, 0.0)
    return labels, dist


@dataclass(frozen=True)
class EmbeddingSet:
    """Dense document (or query) vectors with their external ids."""

    vectors: np.ndarray
    ids: tuple[str, ...]

    def __post_init__(self):
        vectors = check_matrix(self.vectors)
        ids = tuple(str(i) for i in self.ids)
        if len(ids) != vectors.shape[0]:
            raise DataError(f"got {len(ids)} ids for {vectors.shape[0]} vectors")
        if len(set(ids)) != len(ids):
            raise DataError("ids are not unique")
        vectors.setflags(write=False)
        object.__setattr__(self, "vectors", vectors)
        object.__setattr__(self, "ids", ids)

    @classmethod
    def from_array(cls, vectors, ids=None) -> "EmbeddingSet":
        vectors = np.asarray(vectors)
        if ids is None:
            ids = [str(i) for i in range(len(vectors))]
        return cls(vectors, tuple(ids))

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def count(self) -> int:
        return self.vectors.shape[0]


def _as_points(X) -> np.ndarray:
    if isinstance(X, EmbeddingSet):
        return X.vectors
    return check_matrix(X)


@dataclass(frozen=True)
class KmeansResult:
    centroids: np.ndarray  # (b, d) float32
    assignments: np.ndarray  # (n,) int64
    sse: float
    n_iter: int = 0


def _kmeanspp(X: np.ndarray, b: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centers = np.empty((b, X.shape[1]), dtype=np.float64)
    centers[0] = X[rng.integers(n)]
    closest = sq_distances(X, centers[:1])[:, 0]
    for j in range(1, b):
        total = closest.sum()
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            cum = np.cumsum(closest)
            idx = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
            idx = min(idx, n - 1)
        centers[j] = X[idx]
        closest = np.minimum(closest, sq_distances(X, centers[j : j + 1])[:, 0])
    return centers


def kmeans(points, b: int, max_iters: int = 50, tol: float = 1e-4, seed: int = 0) -> KmeansResult:
    """Lloyd's algorithm with k-means++ seeding.

    Empty clusters are respawned at the point farthest from its centroid.  The
    returned centroids are float32 and ``assignments``/``sse`` come from a final
    nearest-centroid pass against exactly those values.
    """
    X = np.asarray(points)
    if X.size == 0:
        raise DataError("empty input")
    if X.ndim != 2:
        raise DataError(f"points must be 2-d, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise DataError("non-finite value")
    b = check_positive_int(b, "b")
    max_iters = check_positive_int(max_iters, "max_iters")
    if tol < 0:
        raise DataError("tol must be >= 0")
    X = X.astype(np.float64, copy=False)
    n, d = X.shape
    rng = np.random.default_rng(seed)

    C = _kmeanspp(X, b, rng)
    sq_norms = (X * X).sum(axis=1)
    n_iter = 0
    for n_iter in range(1, max_iters + 1):
        labels, d2 = _nearest_fast(X, sq_norms, C)
        counts = np.bincount(labels, minlength=b)
        sums = np.zeros((b, d))
        for j in range(d):
            sums[:, j] = np.bincount(labels, weights=X[:, j], minlength=b)
        new = C.copy()
        full = counts > 0
        new[full] = sums[full] / counts[full, None]
        empties = np.flatnonzero(~full)
        if len(empties):
            far = d2.copy()
            for j in empties:
                i = int(np.argmax(far))
                if far[i] <= 0.0:
                    break  # fewer distinct points than codewords
                new[j] = X[i]
                far[i] = 0.0
        shift = np.sqrt(((new - C) ** 2).sum(axis=1)).max()
        C = new
        if shift < tol:
            break

    centroids = C.astype(np.float32)
    labels, d2 = nearest(X, centroids)
    centroids.setflags(write=False)
    return KmeansResult(centroids, labels.astype(np.int64), float(d2.sum()), n_iter)


@dataclass(frozen=True)
class QuantizationReport:
    per_layer_sse: tuple[float, ...]

    @property
    def total_sse(self) -> float:
        return self.per_layer_sse[-1]


def _check_code(code, m: int, b: int) -> np.ndarray:
    c = np.asarray(code, dtype=np.int64)
    if c.ndim == 1:
        c = c[None, :]
    if c.ndim != 2 or c.shape[1] != m:
        raise DataError(f"code length mismatch: expected {m} digits")
    if c.size and (c.min() < 0 or c.max() >= b):
        raise DataError(f"digit out of range [0, {b})")
    return c


@dataclass(frozen=True)
class RqCodebook:
    """``m`` layers of ``b`` float32 codewords; a vector is the sum of one codeword per layer."""

    layers: np.ndarray  # (m, b, d)
    kind = "rq"

    def __post_init__(self):
        layers = np.ascontiguousarray(self.layers, dtype=np.float32)
        if layers.ndim != 3 or 0 in layers.shape:
            raise DataError("codebook layers must have shape (m, b, d) with m, b, d >= 1")
        if not np.all(np.isfinite(layers)):
            raise DataError("non-finite value")
        layers.setflags(write=False)
        object.__setattr__(self, "layers", layers)

    @property
    def m(self) -> int:
        return self.layers.shape[0]

    @property
    def b(self) -> int:
        return self.layers.shape[1]

    @property
    def dim(self) -> int:
        return self.layers.shape[2]

    @property
    def n_clusters(self) -> int:
        return self.b**self.m

    @cached_property
    def _layers64(self) -> np.ndarray:
        return self.layers.astype(np.float64)

    def encode(self, X) -> np.ndarray:
        R = check_matrix(X, dim=self.dim).astype(np.float64)
        codes = np.empty((R.shape[0], self.m), dtype=np.int64)
        for t in range(self.m):
            C = self._layers64[t]
            labels, _ = nearest(R, C)
            codes[:, t] = labels
            R = R - C[labels]
        return codes

    def reconstruct(self, codes) -> np.ndarray:
        c = _check_code(codes, self.m, self.b)
        out = np.zeros((c.shape[0], self.dim))
        for t in range(self.m):
            out = out + self._layers64[t][c[:, t]]
        return out

    def expand(self, prefixes: np.ndarray, prefix_vecs: np.ndarray):
        """Child vectors of every prefix at depth ``prefixes.shape[1]``.

        Returns ``(child_vecs, valid)`` with shapes ``(W, b, d)`` and ``(W, b)``.
        """
        t = prefixes.shape[1]
        child = prefix_vecs[:, None, :] + self._layers64[t][None, :, :]
        return child, np.ones(child.shape[:2], dtype=bool)


@dataclass(frozen=True)
class TreeCodebook:
    """Hierarchical k-means tree. ``nodes[prefix]`` holds the child centroids of ``prefix``.

    Centroids live in the original space (no residuals), so a code's vector is
    the centroid of its leaf.
    """

    m: int
    b: int
    dim: int
    nodes: dict = field(repr=False)
    kind = "hkmeans"

    def __post_init__(self):
        nodes = {}
        for prefix, cents in self.nodes.items():
            prefix = tuple(int(x) for x in prefix)
            cents = np.ascontiguousarray(cents, dtype=np.float32)
            if len(prefix) >= self.m or cents.ndim != 2 or cents.shape[1] != self.dim:
                raise DataError(f"bad tree node {prefix}")
            if not 1 <= cents.shape[0] <= self.b:
                raise DataError(f"tree node {prefix} has {cents.shape[0]} children, b={self.b}")
            if not np.all(np.isfinite(cents)):
                raise DataError("non-finite value")
            cents.setflags(write=False)
            nodes[prefix] = cents
        if () not in nodes:
            raise DataError("tree codebook has no root node")
        object.__setattr__(self, "nodes", nodes)

    @property
    def n_clusters(self) -> int:
        return self.b**self.m

    @cached_property
    def _nodes64(self) -> dict:
        return {k: v.astype(np.float64) for k, v in self.nodes.items()}

    def _node(self, prefix: Code) -> np.ndarray:
        try:
            return self._nodes64[prefix]
        except KeyError:
            raise DataError(f"code prefix {prefix} does not exist in the tree") from None

    def encode(self, X) -> np.ndarray:
        X64 = check_matrix(X, dim=self.dim).astype(np.float64)
        codes = np.empty((X64.shape[0], self.m), dtype=np.int64)
        groups = {(): np.arange(X64.shape[0])}
        for t in range(self.m):
            nxt = {}
            for prefix, idx in groups.items():
                labels, _ = nearest(X64[idx], self._node(prefix))
                codes[idx, t] = labels
                for lab in np.unique(labels):
                    nxt[prefix + (int(lab),)] = idx[labels == lab]
            groups = nxt
        return codes

    def reconstruct(self, codes) -> np.ndarray:
        c = _check_code(codes, self.m, self.b)
        out = np.empty((c.shape[0], self.dim))
        for i, row in enumerate(c):
            cents = self._node(tuple(int(x) for x in row[:-1]))
            if row[-1] >= cents.shape[0]:
                raise DataError(f"digit out of range for node {tuple(row[:-1])}")
            out[i] = cents[row[-1]]
        return out

    def expand(self, prefixes: np.ndarray, prefix_vecs: np.ndarray):
        W = prefixes.shape[0]
        child = np.zeros((W, self.b, self.dim))
        valid = np.zeros((W, self.b), dtype=bool)
        for i in range(W):
            cents = self._nodes64.get(tuple(int(x) for x in prefixes[i]))
            if cents is not None:
                child[i, : cents.shape[0]] = cents
                valid[i, : cents.shape[0]] = True
        return child, valid


def build_rq(X, m: int = 4, b: int = 32, *, max_iters: int = 50, tol: float = 1e-4, seed: int = 0):
    """Residual quantization: layer ``t`` is k-means (seed ``seed + t``) on the residuals of layer ``t - 1``.

    Returns ``(codebook, codes, report)`` where ``codes`` is an ``(n, m)`` int array.
    """
    m = check_positive_int(m, "m")
    b = check_positive_int(b, "b")
    pts = _as_points(X)
    R = pts.astype(np.float64)
    n, d = R.shape
    layers = np.empty((m, b, d), dtype=np.float32)
    codes = np.empty((n, m), dtype=np.int64)
    per_layer = []
    for t in range(m):
        res = kmeans(R, b, max_iters=max_iters, tol=tol, seed=seed + t)
        layers[t] = res.centroids
        codes[:, t] = res.assignments
        R = R - res.centroids.astype(np.float64)[res.assignments]
        per_layer.append(float((R * R).sum()))
    return RqCodebook(layers), codes, QuantizationReport(tuple(per_layer))


def _node_seed(seed: int, depth: int, prefix: Code) -> int:
    if depth == 0:
        return seed
    return int(np.random.SeedSequence([seed, depth, *prefix]).generate_state(1)[0])


def build_hierarchical_kmeans(X, m: int = 4, b: int = 32, *, max_iters: int = 50, tol: float = 1e-4,
                              seed: int = 0):
    """Tree clustering: every cluster of layer ``t - 1`` is split independently into at most ``b`` parts.

    Below the root, a cluster with at most ``b`` members gets one child per
    distinct member.  Codes are length ``m`` like RQ codes.
    """
    m = check_positive_int(m, "m")
    b = check_positive_int(b, "b")
    pts = _as_points(X)
    X64 = pts.astype(np.float64)
    n, d = X64.shape
    codes = np.empty((n, m), dtype=np.int64)
    nodes = {}
    groups = {(): np.arange(n)}
    per_layer = []
    for t in range(m):
        nxt = {}
        sse = 0.0
        for prefix in sorted(groups):
            idx = groups[prefix]
            sub = X64[idx]
            if t > 0 and len(idx) <= b:
                _, first = np.unique(pts[idx], axis=0, return_index=True)
                cents = pts[idx][np.sort(first)]
                labels, d2 = nearest(sub, cents)
            else:
                res = kmeans(sub, b, max_iters=max_iters, tol=tol, seed=_node_seed(seed, t, prefix))
                cents, labels = res.centroids, res.assignments
                d2 = ((sub - cents.astype(np.float64)[labels]) ** 2).sum(axis=1)
            nodes[prefix] = cents
            sse += float(d2.sum())
            codes[idx, t] = labels
            for lab in np.unique(labels):
                nxt[prefix + (int(lab),)] = idx[labels == lab]
        groups = nxt
        per_layer.append(sse)
    return TreeCodebook(m, b, d, nodes), codes, QuantizationReport(tuple(per_layer))


def encode(v, cb) -> Code:
    v = check_vector(v, cb.dim)
    return tuple(int(x) for x in cb.encode(v[None, :])[0])


def reconstruct(c, cb) -> np.ndarray:
    return cb.reconstruct(c)[0]


def quantization_error(X, codes, cb) -> float:
    """Sum of squared distances between vectors and their reconstructions."""
    pts = _as_points(X)
    codes = np.asarray(codes)
    if codes.ndim != 2 or codes.shape[0] != pts.shape[0]:
        raise DataError(f"length mismatch: {pts.shape[0]} vectors, {len(codes)} codes")
    diff = pts.astype(np.float64) - cb.reconstruct(codes)
    return float((diff * diff).sum())


class _CodebookEstimator(TransformerMixin, BaseEstimator):
    def __init__(self, n_layers=4, n_codewords=32, max_iter=50, tol=1e-4, random_state=0):
        self.n_layers = n_layers
        self.n_codewords = n_codewords
        self.max_iter = max_iter
        self.tol = tol
        self.random_state = random_state

    _builder = None

    def fit(self, X, y=None):
        cb, codes, report = type(self)._builder(
            X, self.n_layers, self.n_codewords,
            max_iters=self.max_iter, tol=self.tol, seed=self.random_state or 0,
        )
        self.codebook_ = cb
        self.codes_ = codes
        self.report_ = report
        self.n_features_in_ = cb.dim
        return self

    def transform(self, X):
        """Codes (``n x n_layers`` ints) of the rows of ``X``."""
        check_is_fitted(self, "codebook_")
        return self.codebook_.encode(X)

    def inverse_transform(self, codes):
        check_is_fitted(self, "codebook_")
        return self.codebook_.reconstruct(codes)

    def score(self, X, y=None):
        """Negated squared quantization error of ``X`` (higher is better)."""
        check_is_fitted(self, "codebook_")
        return -quantization_error(X, self.transform(X), self.codebook_)


class ResidualQuantizer(_CodebookEstimator):
    """Estimator wrapper around :func:`build_rq`."""

    _builder = staticmethod(build_rq)


class HierarchicalKMeans(_CodebookEstimator):
    """Estimator wrapper around :func:`build_hierarchical_kmeans`."""

    _builder = staticmethod(build_hierarchical_kmeans)
