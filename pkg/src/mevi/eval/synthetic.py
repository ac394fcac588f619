"""Synthetic corpora standing in for real embedding sets.

Documents are unit vectors drawn around ``n_clusters_true`` random directions;
each query is one chosen document plus isotropic Gaussian noise, and that
document is its single relevant result.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DataError
from ..quantizer import EmbeddingSet


@dataclass(frozen=True)
class SyntheticSpec:
    n_docs: int = 10_000
    dim: int = 32
    n_clusters_true: int = 64
    noise_sigma: float = 0.1
    n_queries: int = 500
    seed: int = 0
    cluster_spread: float = 0.25  # per-dimension std around a cluster direction

    def __post_init__(self):
        for name in ("n_docs", "dim", "n_clusters_true", "n_queries"):
            if getattr(self, name) < 1:
                raise DataError(f"{name} must be positive")
        if self.noise_sigma < 0 or self.cluster_spread < 0:
            raise DataError("noise_sigma and cluster_spread must be >= 0")


def _unit_rows(A: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(A, axis=1, keepdims=True)
    return A / np.where(norms > 0, norms, 1.0)


def gen_synthetic(spec: SyntheticSpec = SyntheticSpec()):
    """Returns ``(docs, queries, qrels)``; deterministic for a given spec."""
    rng = np.random.default_rng(spec.seed)
    centers = _unit_rows(rng.standard_normal((spec.n_clusters_true, spec.dim)))
    which = rng.integers(0, spec.n_clusters_true, spec.n_docs)
    docs = np.empty((spec.n_docs, spec.dim), dtype=np.float32)
    step = 1 << 16
    for s in range(0, spec.n_docs, step):
        e = min(s + step, spec.n_docs)
        block = centers[which[s:e]] + spec.cluster_spread * rng.standard_normal((e - s, spec.dim))
        docs[s:e] = _unit_rows(block)
    targets = rng.choice(spec.n_docs, spec.n_queries, replace=spec.n_queries > spec.n_docs)
    noise = spec.noise_sigma * rng.standard_normal((spec.n_queries, spec.dim))
    queries = (docs[targets].astype(np.float64) + noise).astype(np.float32)
    doc_ids = tuple(f"d{i}" for i in range(spec.n_docs))
    query_ids = tuple(f"q{j}" for j in range(spec.n_queries))
    qrels = {qid: {doc_ids[t]} for qid, t in zip(query_ids, targets)}
    return EmbeddingSet(docs, doc_ids), EmbeddingSet(queries, query_ids), qrels
