"""On-disk formats and bundle persistence.

Every binary file starts with an 8-byte magic and a little-endian u32 version.
A bundle directory holds one file per artifact plus ``manifest.txt``
(``key=value`` lines) recording shapes and a 64-bit FNV-1a checksum per file.

Readers validate in a fixed order: magic, version, size, checksum (when the
expected value is known), then header fields against the manifest.
"""

from __future__ import annotations

import os
import shutil
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from filelock import FileLock
from numba import njit

from .cluster_index import ClusterIndex
from .dense.exact import EmbeddingStore
from .errors import (
    ChecksumMismatch,
    DataError,
    HeaderMismatch,
    MagicMismatch,
    StoreError,
    TruncatedFile,
    VersionUnsupported,
)
from .quantizer import RqCodebook, TreeCodebook

VERSION = 1
EMB_MAGIC = b"MEVIEMB1"
CBK_MAGIC = b"MEVICBK1"
TRE_MAGIC = b"MEVITRE1"
COD_MAGIC = b"MEVICOD1"
IDX_MAGIC = b"MEVIIDX1"
MAX_DIGIT = 65535

FILES = {
    "embeddings": "embeddings.emb",
    "codebook": "codebook.cbk",
    "codes": "codes.cod",
    "index": "index.idx",
    "ids": "ids.tsv",
}
MANIFEST = "manifest.txt"

_FNV_OFFSET = np.uint64(0xCBF29CE484222325)


@njit(cache=True)
def _fnv1a_kernel(buf, h):
    for i in range(buf.shape[0]):
        h = (h ^ np.uint64(buf[i])) * np.uint64(0x100000001B3)
    return h


def fnv1a64(data) -> int:
    """64-bit FNV-1a of a bytes-like object."""
    buf = np.frombuffer(memoryview(data).cast("B"), dtype=np.uint8)
    return int(_fnv1a_kernel(buf, _FNV_OFFSET))


def _hex(h: int) -> str:
    return f"{h:016x}"


# -- low-level parsing ------------------------------------------------------


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except FileNotFoundError:
        raise StoreError("file not found", path) from None


def _header(data: bytes, path, magic: bytes, fmt: str) -> tuple:
    """Check magic and version, then unpack the rest of the fixed header."""
    if len(data) < 8 or data[:8] != magic:
        if len(data) < 8 and magic.startswith(data):
            raise TruncatedFile("file ends inside the magic", path)
        raise MagicMismatch(f"expected magic {magic.decode()}", path)
    if len(data) < 12:
        raise TruncatedFile("file ends inside the header", path)
    (version,) = struct.unpack_from("<I", data, 8)
    if version != VERSION:
        raise VersionUnsupported(f"format version {version} unsupported (this build reads {VERSION})", path)
    size = struct.calcsize("<" + fmt)
    if len(data) < 12 + size:
        raise TruncatedFile("file ends inside the header", path)
    return struct.unpack_from("<" + fmt, data, 12), 12 + size


def _check_size(data: bytes, path, expected: int) -> None:
    if len(data) < expected:
        raise TruncatedFile(f"expected {expected} bytes, found {len(data)}", path)
    if len(data) > expected:
        raise TruncatedFile(f"{len(data) - expected} trailing bytes after the payload", path)


def _check_sum(data: bytes, path, expected: str | None) -> None:
    if expected is not None and _hex(fnv1a64(data)) != expected:
        raise ChecksumMismatch("checksum mismatch", path)


def _atomic_write(path, data: bytes) -> None:
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


# -- embeddings -------------------------------------------------------------


def encode_embeddings(X) -> bytes:
    X = np.ascontiguousarray(X, dtype="<f4")
    if X.ndim != 2:
        raise DataError("embeddings must be a 2-D array")
    return EMB_MAGIC + struct.pack("<IIQ", VERSION, X.shape[1], X.shape[0]) + X.tobytes()


def decode_embeddings(data: bytes, path=None, checksum: str | None = None) -> np.ndarray:
    (dim, count), off = _header(data, path, EMB_MAGIC, "IQ")
    _check_size(data, path, off + count * dim * 4)
    _check_sum(data, path, checksum)
    if dim < 1:
        raise HeaderMismatch("dim must be >= 1", path)
    return np.frombuffer(data, dtype="<f4", offset=off, count=count * dim).reshape(count, dim).astype(np.float32)


def write_embeddings(path, X) -> None:
    _atomic_write(path, encode_embeddings(X))


def read_embeddings(path, checksum: str | None = None) -> np.ndarray:
    return decode_embeddings(_read_bytes(path), path, checksum)


# -- codebooks --------------------------------------------------------------


def encode_codebook(cb) -> bytes:
    if isinstance(cb, RqCodebook):
        return CBK_MAGIC + struct.pack("<IIII", VERSION, cb.m, cb.b, cb.dim) + \
            np.ascontiguousarray(cb.layers, dtype="<f4").tobytes()
    if isinstance(cb, TreeCodebook):
        nodes = sorted(cb.nodes, key=lambda p: (len(p), p))
        parts = [TRE_MAGIC, struct.pack("<IIIIQ", VERSION, cb.m, cb.b, cb.dim, len(nodes))]
        for prefix in nodes:
            cents = cb.nodes[prefix]
            parts.append(struct.pack("<II", len(prefix), cents.shape[0]))
            parts.append(np.asarray(prefix, dtype="<u2").tobytes())
            parts.append(np.ascontiguousarray(cents, dtype="<f4").tobytes())
        return b"".join(parts)
    raise DataError(f"cannot serialise codebook of type {type(cb).__name__}")


def decode_codebook(data: bytes, path=None, checksum: str | None = None):
    if data[:8] == TRE_MAGIC:
        return _decode_tree(data, path, checksum)
    (m, b, dim), off = _header(data, path, CBK_MAGIC, "III")
    _check_size(data, path, off + m * b * dim * 4)
    _check_sum(data, path, checksum)
    if min(m, b, dim) < 1:
        raise HeaderMismatch("m, b and dim must be >= 1", path)
    layers = np.frombuffer(data, dtype="<f4", offset=off, count=m * b * dim).reshape(m, b, dim)
    try:
        return RqCodebook(layers.astype(np.float32))
    except DataError as exc:
        raise HeaderMismatch(str(exc), path) from None


def _decode_tree(data: bytes, path, checksum):
    (m, b, dim, n_nodes), off = _header(data, path, TRE_MAGIC, "IIIQ")
    nodes = {}
    for _ in range(n_nodes):
        if len(data) < off + 8:
            raise TruncatedFile("file ends inside a node header", path)
        depth, n_child = struct.unpack_from("<II", data, off)
        off += 8
        need = depth * 2 + n_child * dim * 4
        if depth >= max(m, 1) or n_child > max(b, 1) or len(data) < off + need:
            # a corrupted count reads as a short file before the checksum can be compared
            raise TruncatedFile("file ends inside a node", path)
        prefix = tuple(int(x) for x in np.frombuffer(data, dtype="<u2", offset=off, count=depth))
        off += depth * 2
        nodes[prefix] = np.frombuffer(data, dtype="<f4", offset=off, count=n_child * dim).reshape(n_child, dim)
        off += n_child * dim * 4
    _check_size(data, path, off)
    _check_sum(data, path, checksum)
    if len(nodes) != n_nodes:
        raise HeaderMismatch("duplicate tree node", path)
    try:
        return TreeCodebook(m, b, dim, {p: c.astype(np.float32) for p, c in nodes.items()})
    except DataError as exc:
        raise HeaderMismatch(str(exc), path) from None


def write_codebook(path, cb) -> None:
    _atomic_write(path, encode_codebook(cb))


def read_codebook(path, checksum: str | None = None):
    return decode_codebook(_read_bytes(path), path, checksum)


# -- codes ------------------------------------------------------------------


def _digits(codes) -> np.ndarray:
    c = np.asarray(codes, dtype=np.int64)
    if c.ndim != 2:
        raise DataError("codes must be a 2-D array")
    if c.size and (c.min() < 0 or c.max() > MAX_DIGIT):
        raise DataError("code digits must fit in u16")
    return c.astype("<u2")


def encode_codes(codes) -> bytes:
    c = _digits(codes)
    return COD_MAGIC + struct.pack("<IIQ", VERSION, c.shape[1], c.shape[0]) + c.tobytes()


def decode_codes(data: bytes, path=None, checksum: str | None = None) -> np.ndarray:
    (m, count), off = _header(data, path, COD_MAGIC, "IQ")
    _check_size(data, path, off + count * m * 2)
    _check_sum(data, path, checksum)
    return np.frombuffer(data, dtype="<u2", offset=off, count=count * m).reshape(count, m).astype(np.int64)


def write_codes(path, codes) -> None:
    _atomic_write(path, encode_codes(codes))


def read_codes(path, checksum: str | None = None) -> np.ndarray:
    return decode_codes(_read_bytes(path), path, checksum)


# -- cluster index ----------------------------------------------------------


def _record_dtype(m: int) -> np.dtype:
    return np.dtype([("ordinal", "<u8"), ("code", "<u2", (m,))])


def encode_index(index: ClusterIndex) -> bytes:
    live = index.live_ordinals()
    rec = np.zeros(len(live), dtype=_record_dtype(index.m))
    rec["ordinal"] = live
    if live:
        rec["code"] = _digits([index.doc_code[o] for o in live])
    return IDX_MAGIC + struct.pack("<IIQ", VERSION, index.m, len(live)) + rec.tobytes()


def decode_index_records(data: bytes, path=None, checksum: str | None = None) -> tuple[int, np.ndarray, np.ndarray]:
    """``(m, ordinals, codes)`` of the live documents."""
    (m, live), off = _header(data, path, IDX_MAGIC, "IQ")
    if m < 1:
        raise HeaderMismatch("m must be >= 1", path)
    dt = _record_dtype(m)
    _check_size(data, path, off + live * dt.itemsize)
    _check_sum(data, path, checksum)
    rec = np.frombuffer(data, dtype=dt, offset=off, count=live)
    ords = rec["ordinal"].astype(np.int64)
    if len(np.unique(ords)) != len(ords):
        raise HeaderMismatch("duplicate ordinal in index", path)
    return m, ords, rec["code"].astype(np.int64).reshape(live, m)


def decode_index(data: bytes, path=None, checksum: str | None = None) -> ClusterIndex:
    m, ords, codes = decode_index_records(data, path, checksum)
    idx = ClusterIndex(m)
    for o, c in zip(ords.tolist(), codes):
        idx.add(o, c)
    return idx


def write_index(path, index: ClusterIndex) -> None:
    _atomic_write(path, encode_index(index))


def read_index(path, checksum: str | None = None) -> ClusterIndex:
    return decode_index(_read_bytes(path), path, checksum)


# -- id maps ----------------------------------------------------------------


def encode_id_map(ids) -> bytes:
    """``<ordinal>\\t<id>`` for every ordinal whose id is not ``None``."""
    return "".join(f"{o}\t{i}\n" for o, i in enumerate(ids) if i is not None).encode("utf-8")


def decode_id_map(data: bytes, n: int, path=None, checksum: str | None = None) -> list:
    _check_sum(data, path, checksum)
    ids: list = [None] * n
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError:
        raise HeaderMismatch("id map is not valid UTF-8", path) from None
    seen = set()
    for lineno, line in enumerate(text.splitlines(), 1):
        parts = line.split("\t")
        if len(parts) != 2 or not parts[0].isdigit() or not parts[1]:
            raise HeaderMismatch(f"line {lineno}: malformed id map line", path)
        o = int(parts[0])
        if o >= n or ids[o] is not None:
            raise HeaderMismatch(f"line {lineno}: ordinal {o} out of range or repeated", path)
        if parts[1] in seen:
            raise HeaderMismatch(f"line {lineno}: duplicate id {parts[1]!r}", path)
        seen.add(parts[1])
        ids[o] = parts[1]
    return ids


def read_id_list(path) -> list[str]:
    """A plain id file: one id per line, or ``<ordinal>\\t<id>`` (the second field is used)."""
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except FileNotFoundError:
        raise DataError(f"{path}: file not found") from None
    out = []
    for line in lines:
        if not line.strip():
            continue
        parts = line.split("\t")
        out.append(parts[-1].strip())
    return out


def write_id_list(path, ids) -> None:
    _atomic_write(path, "".join(f"{i}\t{x}\n" for i, x in enumerate(ids)).encode("utf-8"))


# -- manifest ---------------------------------------------------------------


def format_manifest(entries: dict) -> bytes:
    lines = []
    for key, value in entries.items():
        if "=" in key or "\n" in str(value) or "\n" in key:
            raise DataError(f"bad manifest entry {key!r}")
        lines.append(f"{key}={value}\n")
    return "".join(lines).encode("utf-8")


def parse_manifest(data: bytes, path=None) -> dict[str, str]:
    out = {}
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError:
        raise HeaderMismatch("manifest is not valid UTF-8", path) from None
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise HeaderMismatch(f"line {lineno}: expected key=value", path)
        out[key.strip()] = value.strip()
    return out


def _created() -> str:
    # SOURCE_DATE_EPOCH pins the timestamp so identical inputs give identical bundles
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = int(epoch) if epoch else int(time.time())
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(t))


# -- bundles ----------------------------------------------------------------


@dataclass
class Bundle:
    codebook: object
    codes: np.ndarray  # (n_rows, m), one code per ordinal, live or not
    index: ClusterIndex
    store: EmbeddingStore
    ids: list  # ids[o] is None for dead ordinals
    manifest: dict = field(default_factory=dict)


_LOCKS: dict[str, FileLock] = {}


def bundle_lock(directory) -> FileLock:
    """Exclusive lock file ``<directory>.lock``; re-entrant within a process."""
    key = os.path.abspath(str(directory)) + ".lock"
    lock = _LOCKS.get(key)
    if lock is None:
        lock = _LOCKS.setdefault(key, FileLock(key))
    return lock


def save_all(directory, codebook, codes, index: ClusterIndex, embeddings: EmbeddingStore, ids,
             meta: dict | None = None) -> dict:
    """Write a bundle into ``directory``, replacing any previous one.

    Files are written to a sibling temp directory that is renamed into place,
    under an exclusive lock file ``<directory>.lock``.  ``meta`` adds extra
    manifest keys.  Returns the manifest written.
    """
    directory = Path(directory)
    codes = np.asarray(codes, dtype=np.int64)
    n = embeddings.size
    if codes.shape != (n, codebook.m) or index.m != codebook.m:
        raise DataError("codes, index and codebook disagree on shape")
    if embeddings.dim != codebook.dim or len(ids) != n:
        raise DataError("embeddings, ids and codebook disagree on shape")
    live = embeddings.live_mask
    if index.live_ordinals() != np.flatnonzero(live).tolist():
        raise DataError("index and embedding store disagree on live documents")
    if any((i is None) == bool(alive) for i, alive in zip(ids, live)):
        raise DataError("ids must be set exactly for live documents")

    payload = np.ascontiguousarray(embeddings.vectors, dtype="<f4")
    blobs = {
        "embeddings": encode_embeddings(payload),
        "codebook": encode_codebook(codebook),
        "codes": encode_codes(codes),
        "index": encode_index(index),
        "ids": encode_id_map(ids),
    }
    names = dict(FILES)
    if isinstance(codebook, TreeCodebook):
        names["codebook"] = "codebook.tre"
    magics = {"embeddings": EMB_MAGIC, "codebook": blobs["codebook"][:8], "codes": COD_MAGIC, "index": IDX_MAGIC}

    manifest: dict = {"bundle_version": VERSION}
    for key, fname in names.items():
        manifest[f"{key}.file"] = fname
        if key in magics:
            manifest[f"{key}.format"] = magics[key].decode()
            manifest[f"{key}.version"] = VERSION
        manifest[f"{key}.checksum"] = _hex(fnv1a64(blobs[key]))
    manifest.update({
        "builder": codebook.kind,
        "m": codebook.m,
        "b": codebook.b,
        "dim": codebook.dim,
        "n_rows": n,
        "live_count": int(live.sum()),
        "possible_clusters": codebook.n_clusters,
        "nonempty_clusters": index.n_clusters,
        "corpus_checksum": _hex(fnv1a64(payload)),
        "created": _created(),
    })
    for key, value in (meta or {}).items():
        if key in manifest:
            raise DataError(f"manifest key {key!r} is reserved")
        manifest[key] = value

    directory.parent.mkdir(parents=True, exist_ok=True)
    with bundle_lock(directory):
        tmp = directory.with_name(f".{directory.name}.tmp{os.getpid()}")
        old = directory.with_name(f".{directory.name}.old{os.getpid()}")
        shutil.rmtree(tmp, ignore_errors=True)
        tmp.mkdir()
        try:
            for key, fname in names.items():
                (tmp / fname).write_bytes(blobs[key])
            (tmp / MANIFEST).write_bytes(format_manifest(manifest))
            if directory.exists():
                os.replace(directory, old)
            os.replace(tmp, directory)
        finally:
            shutil.rmtree(tmp, ignore_errors=True)
            shutil.rmtree(old, ignore_errors=True)
    return {k: str(v) for k, v in manifest.items()}


def _int(manifest: dict, key: str, path) -> int:
    try:
        return int(manifest[key])
    except (KeyError, ValueError):
        raise HeaderMismatch(f"manifest lacks a valid {key!r}", path) from None


def read_manifest(directory) -> dict[str, str]:
    path = Path(directory) / MANIFEST
    return parse_manifest(_read_bytes(path), path)


def load_all(directory) -> Bundle:
    """Load and cross-validate a bundle written by :func:`save_all`."""
    directory = Path(directory)
    mpath = directory / MANIFEST
    manifest = read_manifest(directory)
    if _int(manifest, "bundle_version", mpath) != VERSION:
        raise VersionUnsupported(f"bundle version {manifest['bundle_version']} unsupported", mpath)
    m, b, dim = (_int(manifest, k, mpath) for k in ("m", "b", "dim"))
    n, live_count = _int(manifest, "n_rows", mpath), _int(manifest, "live_count", mpath)

    def path_of(key):
        name = manifest.get(f"{key}.file")
        if not name or "/" in name or name.startswith("."):
            raise HeaderMismatch(f"manifest lacks a valid {key}.file", mpath)
        return directory / name

    def sum_of(key):
        value = manifest.get(f"{key}.checksum")
        if value is None:
            raise HeaderMismatch(f"manifest lacks {key}.checksum", mpath)
        return value

    p = path_of("embeddings")
    X = read_embeddings(p, sum_of("embeddings"))
    if X.shape != (n, dim):
        raise HeaderMismatch(f"header says {X.shape}, manifest says ({n}, {dim})", p)
    if _hex(fnv1a64(np.ascontiguousarray(X, dtype="<f4"))) != manifest.get("corpus_checksum"):
        raise ChecksumMismatch("corpus checksum mismatch", p)

    p = path_of("codebook")
    cb = read_codebook(p, sum_of("codebook"))
    if (cb.m, cb.b, cb.dim) != (m, b, dim):
        raise HeaderMismatch(f"header says m={cb.m} b={cb.b} dim={cb.dim}, manifest disagrees", p)
    if manifest.get("builder", cb.kind) != cb.kind:
        raise HeaderMismatch(f"codebook kind {cb.kind!r} does not match manifest builder", p)

    p = path_of("codes")
    codes = read_codes(p, sum_of("codes"))
    if codes.shape != (n, m):
        raise HeaderMismatch(f"header says {codes.shape}, manifest says ({n}, {m})", p)
    if codes.size and codes.max() >= b:
        raise HeaderMismatch("code digit exceeds b", p)

    p = path_of("index")
    im, ords, live_codes = decode_index_records(_read_bytes(p), p, sum_of("index"))
    if im != m or len(ords) != live_count:
        raise HeaderMismatch("index header disagrees with manifest", p)
    if len(ords) and (ords.max() >= n or not np.array_equal(codes[ords], live_codes)):
        raise HeaderMismatch("index records disagree with the codes file", p)

    p = path_of("ids")
    ids = decode_id_map(_read_bytes(p), n, p, sum_of("ids"))
    live = np.zeros(n, dtype=bool)
    live[ords] = True
    if [i is not None for i in ids] != live.tolist():
        raise HeaderMismatch("id map does not cover exactly the live documents", p)

    store = EmbeddingStore(dim, capacity=max(1, n))
    if n:
        store.extend(X)
    index = ClusterIndex(m)
    for o in range(n):
        index.add(o, codes[o])
    for o in np.flatnonzero(~live).tolist():
        index.remove(o)
        store.kill(o)
    return Bundle(cb, codes, index, store, ids, manifest)


# -- whole models -----------------------------------------------------------

_MODEL_PARAMS = {
    "metric": str, "dense": str, "hnsw_M": int, "ef_construction": int, "ef_search": int,
    "n_clusters": int, "top_k": int, "alpha": float, "beta": float, "missing_policy": str,
    "random_state": int, "max_iter": int, "tol": float,
}


def model_codes(model) -> np.ndarray:
    n = model.store_.size
    codes = np.zeros((n, model.codebook_.m), dtype=np.int64)
    for o, c in model.index_.doc_code.items():
        codes[o] = c
    return codes


def save_model(directory, model) -> dict:
    """Persist a fitted :class:`~mevi.model.MEVI` together with its search parameters."""
    with model._lock.read():
        meta = {f"param.{k}": getattr(model, k) for k in _MODEL_PARAMS}
        return save_all(directory, model.codebook_, model_codes(model), model.index_, model.store_,
                        model.ids_, meta)


def load_model(directory, **overrides):
    """Rebuild a model from a bundle; the HNSW graph is rebuilt from the embeddings."""
    from .model import MEVI

    bundle = load_all(directory)
    params = {"builder": bundle.codebook.kind, "n_layers": bundle.codebook.m,
              "n_codewords": bundle.codebook.b}
    for key, cast in _MODEL_PARAMS.items():
        raw = bundle.manifest.get(f"param.{key}")
        if raw is not None:
            params[key] = cast(raw)
    params.update({k: v for k, v in overrides.items() if v is not None})
    model = MEVI.from_parts(bundle.codebook, bundle.store, bundle.index, bundle.ids, **params)
    model.manifest_ = bundle.manifest
    return model
