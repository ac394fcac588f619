import os
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mevi import store
from mevi.cluster_index import build_index
from mevi.errors import (
    ChecksumMismatch,
    HeaderMismatch,
    MagicMismatch,
    StoreError,
    TruncatedFile,
    VersionUnsupported,
)
from mevi.model import MEVI
from mevi.quantizer import RqCodebook, build_hierarchical_kmeans


def test_fnv1a_reference_vectors():
    # published FNV-1a 64 test vectors
    assert store.fnv1a64(b"") == 0xCBF29CE484222325
    assert store.fnv1a64(b"a") == 0xAF63DC4C8601EC8C
    assert store.fnv1a64(b"foobar") == 0x85944171F73967E8


def test_embedding_layout_is_little_endian():
    X = np.array([[1.0, -2.0]], dtype=np.float32)
    blob = store.encode_embeddings(X)
    assert blob[:8] == b"MEVIEMB1"
    assert struct.unpack("<IIQ", blob[8:24]) == (1, 2, 1)
    assert blob[24:] == struct.pack("<ff", 1.0, -2.0)


def test_codebook_and_codes_layout():
    layers = np.arange(2 * 3 * 2, dtype=np.float32).reshape(2, 3, 2)
    blob = store.encode_codebook(RqCodebook(layers))
    assert blob[:8] == b"MEVICBK1" and struct.unpack("<IIII", blob[8:24]) == (1, 2, 3, 2)
    assert np.frombuffer(blob[24:], "<f4").tolist() == layers.ravel().tolist()
    cblob = store.encode_codes(np.array([[1, 65535]]))
    assert cblob[:8] == b"MEVICOD1" and struct.unpack("<IIQ", cblob[8:24]) == (1, 2, 1)
    assert struct.unpack("<HH", cblob[24:]) == (1, 65535)


def test_index_layout_lists_live_records():
    idx = build_index([(1, 2), (3, 4), (5, 6)])
    idx.remove(1)
    blob = store.encode_index(idx)
    assert blob[:8] == b"MEVIIDX1" and struct.unpack("<IIQ", blob[8:24]) == (1, 2, 2)
    assert struct.unpack("<QHH", blob[24:36]) == (0, 1, 2)
    assert struct.unpack("<QHH", blob[36:48]) == (2, 5, 6)


finite32 = st.floats(width=32, allow_nan=False, allow_infinity=False)


@given(arrays(np.float32, st.tuples(st.integers(0, 20), st.integers(1, 6)), elements=finite32))
def test_embeddings_round_trip(X):
    blob = store.encode_embeddings(X)
    Y = store.decode_embeddings(blob)
    assert Y.tobytes() == X.tobytes() and Y.shape == X.shape


@given(arrays(np.int64, st.tuples(st.integers(0, 20), st.integers(1, 5)), elements=st.integers(0, 65535)))
def test_codes_round_trip(C):
    np.testing.assert_array_equal(store.decode_codes(store.encode_codes(C)), C)


@given(arrays(np.float32, st.tuples(st.integers(1, 4), st.integers(1, 5), st.integers(1, 4)), elements=finite32))
def test_codebook_round_trip(layers):
    cb = store.decode_codebook(store.encode_codebook(RqCodebook(layers)))
    assert cb.layers.tobytes() == layers.tobytes()


def test_tree_codebook_round_trip(rng):
    cb, _, _ = build_hierarchical_kmeans(rng.standard_normal((300, 3)), m=3, b=4)
    back = store.decode_codebook(store.encode_codebook(cb))
    assert back.nodes.keys() == cb.nodes.keys()
    for k in cb.nodes:
        assert back.nodes[k].tobytes() == cb.nodes[k].tobytes()


@given(st.lists(st.tuples(st.integers(0, 40), st.tuples(st.integers(0, 9), st.integers(0, 9))),
                unique_by=lambda t: t[0], max_size=30))
def test_index_round_trip(records):
    from mevi.cluster_index import ClusterIndex

    idx = ClusterIndex(2)
    for o, c in records:
        idx.add(o, c)
    back = store.decode_index(store.encode_index(idx))
    assert back.postings == idx.postings
    assert back.trie_prefixes() == idx.trie_prefixes()


def test_header_errors():
    blob = store.encode_embeddings(np.ones((2, 3), dtype=np.float32))
    with pytest.raises(MagicMismatch):
        store.decode_embeddings(b"XXXXXXXX" + blob[8:])
    with pytest.raises(VersionUnsupported, match="version 2 unsupported"):
        store.decode_embeddings(blob[:8] + struct.pack("<I", 2) + blob[12:])
    with pytest.raises(TruncatedFile):
        store.decode_embeddings(blob[:-1])
    with pytest.raises(TruncatedFile):
        store.decode_embeddings(blob[:10])
    with pytest.raises(TruncatedFile):
        store.decode_embeddings(blob + b"\0")
    with pytest.raises(MagicMismatch):
        store.decode_codes(blob)
    with pytest.raises(ChecksumMismatch):
        store.decode_embeddings(blob, checksum="0" * 16)


def test_error_codes_are_distinct():
    codes = {cls.code for cls in (MagicMismatch, VersionUnsupported, ChecksumMismatch, TruncatedFile, HeaderMismatch)}
    assert len(codes) == 5


@pytest.fixture
def bundle(tmp_path, small_corpus):
    docs, _, _ = small_corpus
    model = MEVI(n_layers=3, n_codewords=8, dense="exact").fit(docs.vectors, docs.ids)
    model.remove_document(docs.ids[4])
    model.add_document("extra", docs.vectors[4] * 2)
    path = tmp_path / "bundle"
    store.save_model(path, model)
    return path, model


def test_bundle_round_trip(bundle, small_corpus):
    path, model = bundle
    _, queries, _ = small_corpus
    loaded = store.load_model(path)
    assert loaded.store_.vectors.tobytes() == model.store_.vectors.tobytes()
    np.testing.assert_array_equal(loaded.store_.live_mask, model.store_.live_mask)
    assert loaded.ids_ == model.ids_
    assert loaded.index_.postings == model.index_.postings
    assert loaded.index_.tombstones == model.index_.tombstones
    np.testing.assert_array_equal(store.model_codes(loaded), store.model_codes(model))
    for mode in ("exact", "clusters", "ensemble"):
        a = model.search(queries.vectors[0], mode)
        b = loaded.search(queries.vectors[0], mode)
        np.testing.assert_array_equal(a.ordinals, b.ordinals)
        np.testing.assert_array_equal(a.scores, b.scores)


def test_manifest_contents(bundle):
    path, model = bundle
    man = store.read_manifest(path)
    assert man["m"] == "3" and man["b"] == "8" and man["dim"] == "16"
    assert man["possible_clusters"] == str(8**3)
    assert man["live_count"] == str(model.store_.live_count)
    assert man["n_rows"] == str(model.store_.size)
    assert man["embeddings.format"] == "MEVIEMB1" and man["index.version"] == "1"
    payload = np.ascontiguousarray(model.store_.vectors, dtype="<f4").tobytes()
    assert man["corpus_checksum"] == f"{store.fnv1a64(payload):016x}"
    ids = (path / "ids.tsv").read_text().splitlines()
    assert len(ids) == model.store_.live_count and ids[0] == "0\td0"


def test_corrupted_payload_names_file(bundle):
    path, _ = bundle
    f = path / "embeddings.emb"
    data = bytearray(f.read_bytes())
    data[-5] ^= 0x40
    f.write_bytes(bytes(data))
    with pytest.raises(ChecksumMismatch) as info:
        store.load_all(path)
    assert "embeddings.emb" in str(info.value)


def test_future_version_codebook(bundle):
    path, _ = bundle
    f = path / "codebook.cbk"
    data = bytearray(f.read_bytes())
    data[8:12] = struct.pack("<I", 2)
    f.write_bytes(bytes(data))
    with pytest.raises(VersionUnsupported):
        store.load_all(path)


def test_manifest_disagreement(bundle):
    path, _ = bundle
    man = path / "manifest.txt"
    man.write_text(man.read_text().replace("\nm=3\n", "\nm=4\n"))
    with pytest.raises(HeaderMismatch):
        store.load_all(path)


def test_missing_file(bundle):
    path, _ = bundle
    os.remove(path / "codes.cod")
    with pytest.raises(StoreError, match="not found"):
        store.load_all(path)


def test_save_replaces_atomically(bundle, small_corpus):
    path, model = bundle
    model.add_document("another", small_corpus[0].vectors[0])
    store.save_model(path, model)
    assert store.load_model(path).id_to_ordinal_["another"] == model.id_to_ordinal_["another"]
    leftovers = [p for p in path.parent.iterdir() if p.name.startswith(".")]
    assert leftovers == []


def test_identical_inputs_give_identical_bytes(tmp_path, small_corpus, monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "1700000000")
    docs, _, _ = small_corpus
    for name in ("a", "b"):
        model = MEVI(n_layers=2, n_codewords=8, dense="exact").fit(docs.vectors, docs.ids)
        store.save_model(tmp_path / name, model)
    for f in os.listdir(tmp_path / "a"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_lock_is_reentrant(tmp_path):
    lock = store.bundle_lock(tmp_path / "x")
    with lock:
        with store.bundle_lock(tmp_path / "x"):
            assert lock.is_locked
