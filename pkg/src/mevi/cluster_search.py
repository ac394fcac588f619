"""Top-k cluster codes for a query.

The ranking normally comes from a trained sequence-to-sequence decoder.  Here
it is produced either by a beam search that scores code prefixes by distance
to their partial reconstruction, or read from a file written by an external
model.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from ._validation import check_vector
from .cluster_index import ClusterIndex
from .errors import DataError
from .quantizer import Code


@dataclass(frozen=True)
class RankedClusters:
    codes: tuple[Code, ...]
    scores: tuple[float, ...]

    def __post_init__(self):
        if len(self.codes) != len(self.scores):
            raise DataError("codes and scores differ in length")
        if len(set(self.codes)) != len(self.codes):
            raise DataError("duplicate cluster code in ranking")

    def __len__(self):
        return len(self.codes)

    @property
    def k(self) -> int:
        return len(self.codes)

    def rank_of(self) -> dict[Code, int]:
        """Code -> 0-based rank."""
        return {c: r for r, c in enumerate(self.codes)}

    def head(self, k: int) -> "RankedClusters":
        return RankedClusters(self.codes[:k], self.scores[:k])


def default_beam_width(k: int) -> int:
    return max(k, 100)


def beam_search_clusters(q, cb, idx: ClusterIndex | None, beam_width: int | None = None, k: int = 100,
                         constrained: bool = True) -> RankedClusters:
    """Beam search over code prefixes scored by ``-|q - partial reconstruction|^2``.

    Each of the ``m`` steps extends every beam by all digits (only digits that
    lead to live documents when ``constrained``), keeps the best
    ``beam_width`` prefixes, breaking score ties by the lexicographically
    smaller code, and the best ``k`` complete codes are returned.
    """
    if beam_width is None:
        beam_width = default_beam_width(k)
    if k < 1:
        raise DataError("k must be >= 1")
    if k > beam_width:
        raise DataError(f"k={k} exceeds beam_width={beam_width}")
    q64 = check_vector(q, cb.dim).astype(np.float64)
    if constrained and (idx is None or idx.live_count == 0):
        raise DataError("empty index")

    prefixes = np.zeros((1, 0), dtype=np.int64)
    vecs = np.zeros((1, cb.dim))
    scores = np.zeros(1)
    for t in range(cb.m):
        child, valid = cb.expand(prefixes, vecs)
        if constrained:
            allowed = np.zeros_like(valid)
            for i, p in enumerate(prefixes):
                digits = idx.children(p)
                if digits:
                    allowed[i, digits] = True
            valid &= allowed
        diff = child - q64
        step_scores = -(diff * diff).sum(axis=2)
        wi, di = np.nonzero(valid)
        s = step_scores[wi, di]
        cand = np.concatenate([prefixes[wi], di[:, None]], axis=1)
        keys = tuple(cand[:, j] for j in range(t, -1, -1)) + (-s,)
        keep = np.lexsort(keys)[:beam_width]
        prefixes = cand[keep]
        vecs = child[wi[keep], di[keep]]
        scores = s[keep]
    top = min(k, len(prefixes))
    return RankedClusters(
        tuple(tuple(int(x) for x in p) for p in prefixes[:top]),
        tuple(float(x) for x in scores[:top]),
    )


def format_code(code) -> str:
    return "-".join(str(int(d)) for d in code)


def parse_code(text: str) -> Code:
    parts = text.strip().split("-")
    if not parts or any(not p.isdigit() for p in parts):
        raise ValueError(f"bad code {text!r}")
    return tuple(int(p) for p in parts)


def load_external_rankings(path, m: int | None = None, b: int | None = None) -> dict[str, RankedClusters]:
    """Read ``query_id<TAB>d-d-...-d<TAB>rank<TAB>score`` lines.

    Ranks are 0-based and contiguous per query; the order of the returned
    clusters follows the rank column.
    """
    per_query: dict[str, dict[int, tuple[Code, float]]] = {}
    seen: set[tuple[str, Code]] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            fields = [f.strip() for f in line.rstrip("\n").split("\t")]
            try:
                if len(fields) != 4:
                    raise ValueError(f"expected 4 tab-separated fields, got {len(fields)}")
                qid, code, rank, score = fields[0], parse_code(fields[1]), int(fields[2]), float(fields[3])
                if not qid:
                    raise ValueError("empty query id")
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: malformed line: {exc}") from None
            if m is not None and len(code) != m:
                raise DataError(f"{path}:{lineno}: code length {len(code)} != m={m}")
            if b is not None and max(code) >= b:
                raise DataError(f"{path}:{lineno}: digit out of range [0, {b})")
            if (qid, code) in seen:
                raise DataError(f"{path}:{lineno}: duplicate (query, code) pair")
            seen.add((qid, code))
            ranks = per_query.setdefault(qid, {})
            if rank in ranks:
                raise DataError(f"{path}:{lineno}: non-contiguous ranks for query {qid}")
            ranks[rank] = (code, score)
    out = {}
    for qid, ranks in per_query.items():
        if sorted(ranks) != list(range(len(ranks))):
            raise DataError(f"{path}: non-contiguous ranks for query {qid}")
        ordered = [ranks[r] for r in range(len(ranks))]
        out[qid] = RankedClusters(tuple(c for c, _ in ordered), tuple(s for _, s in ordered))
    return out


def write_external_rankings(path, rankings: dict[str, RankedClusters]) -> None:
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w", encoding="utf-8") as fh:
        for qid, rc in rankings.items():
            for r, (code, score) in enumerate(zip(rc.codes, rc.scores)):
                fh.write(f"{qid}\t{format_code(code)}\t{r}\t{float(score)!r}\n")
    os.replace(tmp, path)
