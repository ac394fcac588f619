"""Per-query latency measurement."""

from __future__ import annotations

import time
from collections.abc import Callable
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from ..errors import DataError


@dataclass(frozen=True)
class LatencyStats:
    mean: float
    p50: float
    p95: float
    p99: float
    n_samples: int

    @classmethod
    def from_samples(cls, samples_ms) -> "LatencyStats":
        a = np.asarray(samples_ms, dtype=np.float64)
        p50, p95, p99 = np.percentile(a, [50, 95, 99])
        return cls(float(a.mean()), float(p50), float(p95), float(p99), len(a))

    def as_dict(self) -> dict:
        return {"mean": self.mean, "p50": self.p50, "p95": self.p95, "p99": self.p99,
                "n_samples": self.n_samples}


@dataclass(frozen=True)
class BenchReport:
    total: LatencyStats
    components: dict[str, LatencyStats] = field(default_factory=dict)
    n_queries: int = 0

    def as_dict(self) -> dict:
        return {"n_queries": self.n_queries, "total_ms": self.total.as_dict(),
                "components_ms": {k: v.as_dict() for k, v in self.components.items()}}


class Timer:
    """Collects named component durations for one pipeline call."""

    def __init__(self):
        self.parts: dict[str, float] = {}

    @contextmanager
    def section(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.parts[name] = self.parts.get(name, 0.0) + time.perf_counter() - t0


def bench_latency(pipeline: Callable, queries, warmup: int = 1, iters: int = 1) -> BenchReport:
    """Time ``pipeline(q, timer)`` over every query, ``iters`` times, after ``warmup`` passes.

    ``timer.section(name)`` inside the pipeline attributes time to components.
    All figures are milliseconds of wall-clock time.
    """
    if iters < 1:
        raise DataError("iters must be >= 1")
    if len(queries) == 0:
        raise DataError("empty query set")
    for _ in range(max(0, warmup)):
        for q in queries:
            pipeline(q, Timer())
    totals = []
    parts: dict[str, list[float]] = {}
    for _ in range(iters):
        for q in queries:
            timer = Timer()
            t0 = time.perf_counter()
            pipeline(q, timer)
            totals.append((time.perf_counter() - t0) * 1e3)
            for name, secs in timer.parts.items():
                parts.setdefault(name, []).append(secs * 1e3)
    return BenchReport(
        LatencyStats.from_samples(totals),
        {name: LatencyStats.from_samples(v) for name, v in parts.items()},
        len(queries),
    )


def mevi_pipeline(model, mode: str, **kw) -> Callable:
    """A timed search pipeline over a fitted :class:`~mevi.model.MEVI`.

    Components: ``cluster_search``, ``dense``, ``fusion`` (the brute-force
    scoring of candidates and the final ranking).
    """
    from ..ensemble import ensemble_candidates, fuse, search_clusters_only

    params = model.ensemble_params(alpha=kw.get("alpha"), beta=kw.get("beta"), k=kw.get("k"),
                                   K=kw.get("K"), missing_policy=kw.get("missing_policy"),
                                   dense_depth=kw.get("dense_depth"))
    ef = kw.get("ef_search")
    beam = kw.get("beam_width")
    if mode == "hnsw" or (mode == "ensemble" and model.dense == "hnsw"):
        model.hnsw()

    def run(q, timer):
        with model._lock.read():
            return _run(q, timer)

    def _run(q, timer):
        if mode in ("exact", "hnsw"):
            with timer.section("dense"):
                return model._dense(q, params.K, mode, ef)
        with timer.section("cluster_search"):
            ranked = model._rank_clusters(q, params.k, beam)
        if mode == "clusters":
            with timer.section("fusion"):
                return search_clusters_only(model.store_, model.index_, q, ranked, params.K, model.metric)
        with timer.section("dense"):
            dense = model._dense(q, params.depth, model.dense, ef)
        with timer.section("fusion"):
            c = ensemble_candidates(model.store_, model.index_, q, ranked, dense, model.metric)
            return fuse(c.ordinals, c.s0, c.ranks, c.n_ranked, params.alpha, params.beta,
                        params.missing_policy, params.K, model.metric)

    return run
