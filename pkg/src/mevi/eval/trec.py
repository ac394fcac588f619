"""TREC qrels and run files."""

from __future__ import annotations

import os
from collections.abc import Mapping, Sequence

from ..errors import DataError


def read_qrels(path) -> dict[str, set[str]]:
    """``<query_id> 0 <doc_id> <relevance>``; relevance > 0 counts as relevant."""
    qrels: dict[str, set[str]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 4:
                raise DataError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
            qid, _, doc, rel = parts
            try:
                rel = int(rel)
            except ValueError:
                raise DataError(f"{path}:{lineno}: bad relevance {rel!r}") from None
            docs = qrels.setdefault(qid, set())
            if rel > 0:
                docs.add(doc)
    return qrels


def write_qrels(path, qrels: Mapping[str, set[str]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for qid in qrels:
            for doc in sorted(qrels[qid]):
                fh.write(f"{qid} 0 {doc} 1\n")


def format_run(results: Mapping[str, Sequence[tuple[str, float]]], tag: str = "mevi") -> str:
    lines = []
    for qid, docs in results.items():
        for rank, (doc, score) in enumerate(docs, 1):
            lines.append(f"{qid} Q0 {doc} {rank} {score:.6f} {tag}\n")
    return "".join(lines)


def write_run(path, results: Mapping[str, Sequence[tuple[str, float]]], tag: str = "mevi") -> None:
    """Write ``<qid> Q0 <doc> <rank> <score> <tag>`` lines (1-based ranks) via temp file + rename."""
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(format_run(results, tag))
    os.replace(tmp, path)


def read_run(path) -> dict[str, list[str]]:
    """Doc ids per query ordered by the rank column."""
    rows: dict[str, list[tuple[int, str]]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 6:
                raise DataError(f"{path}:{lineno}: expected 6 fields, got {len(parts)}")
            try:
                rank = int(parts[3])
                float(parts[4])
            except ValueError:
                raise DataError(f"{path}:{lineno}: bad rank or score") from None
            rows.setdefault(parts[0], []).append((rank, parts[2]))
    return {q: [d for _, d in sorted(v)] for q, v in rows.items()}
