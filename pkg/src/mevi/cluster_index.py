"""Posting lists keyed by full cluster code, plus a prefix trie of non-empty codes.

Documents are addressed by internal ordinals.  Removal tombstones the ordinal:
it leaves every posting list and the trie immediately, while its code is kept
in ``doc_code`` until :meth:`ClusterIndex.compact` drops it.
"""

from __future__ import annotations

from bisect import bisect_left, insort

import numpy as np

from .errors import DataError
from .quantizer import Code


class _TrieNode:
    __slots__ = ("count", "children")

    def __init__(self):
        self.count = 0
        self.children: dict[int, _TrieNode] = {}


class ClusterIndex:
    """Code -> ordinals mapping for ``m``-digit codes.

    Not thread-safe on its own; :class:`mevi.model.MEVI` wraps it in a
    single-writer / multi-reader lock.
    """

    def __init__(self, m: int):
        if m < 1:
            raise DataError("m must be >= 1")
        self.m = m
        self.postings: dict[Code, list[int]] = {}
        self.doc_code: dict[int, Code] = {}
        self.tombstones: set[int] = set()
        self._root = _TrieNode()

    def _code(self, code) -> Code:
        c = tuple(int(x) for x in code)
        if len(c) != self.m:
            raise DataError(f"wrong code length: expected {self.m}, got {len(c)}")
        return c

    def add(self, ordinal: int, code) -> None:
        ordinal = int(ordinal)
        c = self._code(code)
        if ordinal in self.doc_code:
            raise DataError(f"ordinal {ordinal} already indexed")
        self.doc_code[ordinal] = c
        insort(self.postings.setdefault(c, []), ordinal)
        node = self._root
        node.count += 1
        for digit in c:
            node = node.children.setdefault(digit, _TrieNode())
            node.count += 1

    def remove(self, ordinal: int) -> None:
        ordinal = int(ordinal)
        if ordinal not in self.doc_code or ordinal in self.tombstones:
            raise DataError(f"unknown ordinal {ordinal}")
        c = self.doc_code[ordinal]
        plist = self.postings[c]
        del plist[bisect_left(plist, ordinal)]
        if not plist:
            del self.postings[c]
        self.tombstones.add(ordinal)
        node = self._root
        node.count -= 1
        for digit in c:
            child = node.children[digit]
            child.count -= 1
            if child.count == 0:
                del node.children[digit]
                break
            node = child

    def compact(self) -> None:
        """Forget codes of tombstoned ordinals."""
        for o in self.tombstones:
            del self.doc_code[o]
        self.tombstones.clear()

    def members(self, code) -> list[int]:
        return list(self.postings.get(self._code(code), ()))

    def is_live(self, ordinal: int) -> bool:
        return ordinal in self.doc_code and ordinal not in self.tombstones

    def code_of(self, ordinal: int) -> Code:
        if not self.is_live(ordinal):
            raise DataError(f"unknown ordinal {ordinal}")
        return self.doc_code[ordinal]

    def _find(self, prefix) -> _TrieNode | None:
        node = self._root
        for digit in prefix:
            node = node.children.get(int(digit))
            if node is None:
                return None
        return node

    def has_prefix(self, prefix) -> bool:
        node = self._find(prefix)
        return node is not None and node.count > 0

    def prefix_count(self, prefix) -> int:
        node = self._find(prefix)
        return 0 if node is None else node.count

    def children(self, prefix) -> list[int]:
        node = self._find(prefix)
        return [] if node is None else sorted(node.children)

    def trie_prefixes(self) -> set[Code]:
        """Every non-empty prefix (including the empty one when the index is non-empty)."""
        out: set[Code] = set()
        stack = [((), self._root)]
        while stack:
            prefix, node = stack.pop()
            if node.count > 0:
                out.add(prefix)
            for digit, child in node.children.items():
                stack.append((prefix + (digit,), child))
        return out

    @property
    def live_count(self) -> int:
        return self._root.count

    @property
    def n_clusters(self) -> int:
        return len(self.postings)

    def live_ordinals(self) -> list[int]:
        return sorted(o for o in self.doc_code if o not in self.tombstones)

    def codes(self) -> list[Code]:
        return sorted(self.postings)


def build_index(codes) -> ClusterIndex:
    """Index ``codes[i]`` under ordinal ``i``."""
    arr = [tuple(int(x) for x in c) for c in codes]
    if not arr:
        raise DataError("empty input")
    m = len(arr[0])
    if any(len(c) != m for c in arr):
        raise DataError("inconsistent code lengths")
    idx = ClusterIndex(m)
    for i, c in enumerate(arr):
        idx.add(i, c)
    return idx


def codes_to_array(codes) -> np.ndarray:
    return np.asarray([list(c) for c in codes], dtype=np.int64)
