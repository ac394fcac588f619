"""Binary-relevance Recall@K and MRR@K over TREC-style runs.

A run maps query id -> ranked doc ids (best first).  Qrels map query id ->
set of relevant doc ids.  Means are taken over queries present in both, in
sorted query-id order; queries without relevant documents are skipped and
counted.
"""

from __future__ import annotations

import logging
import re
from collections.abc import Mapping, Sequence
from dataclasses import dataclass

from ..errors import DataError

log = logging.getLogger(__name__)

METRIC_NAMES = ("recall", "mrr")


@dataclass(frozen=True)
class MetricSpec:
    name: str
    k: int

    def __str__(self):
        return f"{self.name}@{self.k}"


def parse_metric(token: str) -> MetricSpec:
    m = re.fullmatch(r"\s*([A-Za-z]+)@(\d+)\s*", token)
    if not m:
        raise DataError(f"bad metric {token!r}; expected name@K")
    name, k = m.group(1).lower(), int(m.group(2))
    if name not in METRIC_NAMES:
        raise DataError(f"unknown metric {name!r}; expected one of {METRIC_NAMES}")
    if k < 1:
        raise DataError("metric cutoff must be >= 1")
    return MetricSpec(name, k)


def parse_metrics(text: str) -> list[MetricSpec]:
    return [parse_metric(t) for t in text.split(",") if t.strip()]


def _paired_queries(run: Mapping[str, Sequence[str]], qrels: Mapping[str, set]) -> tuple[list[str], int]:
    missing = sorted(q for q in run if q not in qrels)
    if missing:
        log.warning("%d run queries have no qrels and are skipped", len(missing))
    shared = sorted(q for q in run if q in qrels)
    if not shared:
        raise DataError("run and qrels share no queries")
    usable = [q for q in shared if qrels[q]]
    return usable, len(shared) - len(usable)


def _mean(values: list[float]) -> float:
    total = 0.0
    for v in values:
        total += v
    return total / len(values) if values else 0.0


def recall_per_query(run, qrels, K: int) -> dict[str, float]:
    if K < 1:
        raise DataError("K must be >= 1")
    queries, _ = _paired_queries(run, qrels)
    out = {}
    for q in queries:
        rel = qrels[q]
        out[q] = len(rel.intersection(run[q][:K])) / len(rel)
    return out


def mrr_per_query(run, qrels, K: int) -> dict[str, float]:
    if K < 1:
        raise DataError("K must be >= 1")
    queries, _ = _paired_queries(run, qrels)
    out = {}
    for q in queries:
        rel = qrels[q]
        out[q] = 0.0
        for rank, doc in enumerate(run[q][:K], 1):
            if doc in rel:
                out[q] = 1.0 / rank
                break
    return out


def recall_at_k(run, qrels, K: int) -> float:
    per = recall_per_query(run, qrels, K)
    return _mean([per[q] for q in sorted(per)])


def mrr_at_k(run, qrels, K: int) -> float:
    per = mrr_per_query(run, qrels, K)
    return _mean([per[q] for q in sorted(per)])


def evaluate(run, qrels, metrics: Sequence[MetricSpec | str]) -> dict:
    """Compute several metrics at once; also reports query counts."""
    specs = [parse_metric(m) if isinstance(m, str) else m for m in metrics]
    queries, skipped = _paired_queries(run, qrels)
    out = {"n_queries": len(queries), "n_skipped_no_relevant": skipped}
    for spec in specs:
        fn = recall_at_k if spec.name == "recall" else mrr_at_k
        out[str(spec)] = fn(run, qrels, spec.k)
    return out


def metric_value(spec: MetricSpec | str, run, qrels) -> float:
    spec = parse_metric(spec) if isinstance(spec, str) else spec
    fn = recall_at_k if spec.name == "recall" else mrr_at_k
    return fn(run, qrels, spec.k)
