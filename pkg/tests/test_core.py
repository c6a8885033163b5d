import math
from functools import reduce

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from carls.core import (
    Checkpoint,
    DimensionMismatch,
    EmbeddingEntry,
    FeatureRecord,
    KnowledgeKey,
    MalformedPayload,
    MalformedRecord,
    NonFinite,
    cosine,
    decode_checkpoint,
    decode_entry,
    decode_record,
    decode_vector,
    encode_checkpoint,
    encode_entry,
    encode_record,
    encode_vector,
    fnv1a64,
    l2sq,
    shard_of,
)


def fnv_reference(data: bytes) -> int:
    return reduce(lambda h, c: ((h ^ c) * 0x100000001B3) % 2**64, data, 0xCBF29CE484222325)


@pytest.mark.parametrize(
    "data, expected",
    [(b"", 0xCBF29CE484222325), (b"a", 0xAF63DC4C8601EC8C), (b"foobar", 0x85944171F73967E8)],
)
def test_fnv1a64_published_vectors(data, expected):
    assert fnv1a64(data) == expected


def test_shard_of_examples():
    key = KnowledgeKey("", b"a")
    assert shard_of(key, 1) == 0
    # FNV-1a64(b"\x00a") = 0x08326707b4eb37da, checked with a separate C build
    assert fnv_reference(b"\x00a") == 0x08326707B4EB37DA
    assert shard_of(key, 4) == 2
    assert shard_of(key, 4) == shard_of(KnowledgeKey("", b"a"), 4)


@given(st.text(max_size=8), st.binary(min_size=1, max_size=16), st.integers(1, 64))
def test_shard_of_matches_reference(ns, ident, n):
    key = KnowledgeKey(ns, ident)
    assert shard_of(key, n) == fnv_reference(ns.encode() + b"\x00" + ident) % n


@given(st.sets(st.binary(min_size=1, max_size=6), max_size=50), st.sampled_from([1, 2, 3, 8]))
def test_shard_of_partitions(ids, n):
    keys = [KnowledgeKey("node_emb", i) for i in ids]
    parts = [{k for k in keys if shard_of(k, n) == s} for s in range(n)]
    assert set().union(*parts) == set(keys)
    assert sum(len(p) for p in parts) == len(keys)


def test_key_validation():
    with pytest.raises(ValueError):
        KnowledgeKey("ns", b"")
    assert KnowledgeKey("ns", "x") == KnowledgeKey("ns", b"x")
    assert KnowledgeKey("a", b"x") != KnowledgeKey("b", b"x")


def test_encode_vector_examples():
    assert encode_vector([]) == b"\x00\x00\x00\x00"
    assert encode_vector([1.0]) == bytes.fromhex("01000000" "0000803f")


finite32 = st.floats(allow_nan=False, allow_infinity=False, width=32)


@settings(max_examples=1000)
@given(st.lists(finite32, max_size=32))
def test_vector_round_trip(values):
    v = np.array(values, dtype=np.float32)
    out = decode_vector(encode_vector(v))
    assert out.tobytes() == v.tobytes()


def test_decode_vector_rejects_bad_input():
    good = encode_vector([1.0, 2.0])
    with pytest.raises(MalformedPayload):
        decode_vector(good[:-1])
    with pytest.raises(MalformedPayload):
        decode_vector(good[:3])
    nan = b"\x01\x00\x00\x00" + np.array([np.nan], "<f4").tobytes()
    with pytest.raises(MalformedPayload):
        decode_vector(nan)
    with pytest.raises(NonFinite):
        encode_vector([np.inf])


def test_cosine_l2_examples():
    assert cosine([0.3, -2.0], [0.3, -2.0]) == pytest.approx(1.0)
    assert l2sq([0, 0], [3, 4]) == 25
    assert cosine([1, 0], [0, 1]) == 0
    assert cosine([0, 0], [1, 2]) == 0
    with pytest.raises(DimensionMismatch):
        cosine([1, 2], [1, 2, 3])
    with pytest.raises(DimensionMismatch):
        l2sq([1], [1, 2])


vec_pairs = st.integers(1, 12).flatmap(
    lambda d: st.tuples(st.lists(finite32.filter(lambda x: abs(x) < 1e6), min_size=d, max_size=d),
                        st.lists(finite32.filter(lambda x: abs(x) < 1e6), min_size=d, max_size=d))
)


@given(vec_pairs)
def test_metric_properties(pair):
    a, b = (np.array(x, np.float32) for x in pair)
    c = cosine(a, b)
    assert -1 - 1e-6 <= c <= 1 + 1e-6
    assert abs(c - cosine(b, a)) <= 1e-7
    d = l2sq(a, b)
    assert d >= 0
    assert (d == 0) == bool(np.array_equal(a, b))


keys = st.builds(KnowledgeKey, st.sampled_from(["node_emb", "labels", ""]), st.binary(min_size=1, max_size=8))


@st.composite
def records(draw):
    neighbors = draw(st.lists(st.tuples(keys, st.floats(0, 1e6, width=32)), max_size=5))
    label = None
    if draw(st.booleans()):
        c = draw(st.integers(1, 6))
        raw = np.array(draw(st.lists(st.floats(0.125, 1, width=32), min_size=c, max_size=c)), np.float64)
        label = (raw / raw.sum()).astype(np.float32)
        label[-1] = np.float32(1.0 - label[:-1].sum(dtype=np.float64))
        if label[-1] < 0:
            label = None
    raw_feat = draw(st.none() | st.lists(finite32, max_size=6).map(lambda x: np.array(x, np.float32)))
    return FeatureRecord(neighbors, label, raw_feat, draw(st.sampled_from(["", "inferred"])))


@given(records())
def test_record_round_trip(rec):
    assert decode_record(encode_record(rec)) == rec


def test_record_validation():
    with pytest.raises(MalformedRecord):
        FeatureRecord(label_dist=np.array([0.5, 0.6])).validate()
    with pytest.raises(MalformedRecord):
        FeatureRecord(neighbors=[(KnowledgeKey("n", b"b"), -1.0)]).validate()
    with pytest.raises(MalformedRecord):
        FeatureRecord(neighbors=[(KnowledgeKey("n", b"b"), math.nan)]).validate()


@given(st.lists(finite32, max_size=8), st.integers(0, 2**64 - 1), st.integers(0, 2**64 - 1))
def test_entry_round_trip(values, version, ltime):
    e = EmbeddingEntry(np.array(values, np.float32), version, ltime)
    assert decode_entry(encode_entry(e)) == e


@st.composite
def checkpoints(draw):
    params = {}
    for name in draw(st.lists(st.sampled_from(["W", "V", "U", "A", "B"]), unique=True, max_size=4)):
        r, c = draw(st.integers(0, 4)), draw(st.integers(0, 4))
        params[name] = np.array(draw(st.lists(finite32, min_size=r * c, max_size=r * c)), np.float32).reshape(r, c)
    meta = draw(st.dictionaries(st.text(max_size=5), st.text(max_size=5), max_size=3))
    return Checkpoint(draw(st.integers(0, 2**64 - 1)), params, meta)


@given(checkpoints())
def test_checkpoint_round_trip(ckpt):
    assert decode_checkpoint(encode_checkpoint(ckpt)) == ckpt


def test_checkpoint_layout():
    ckpt = Checkpoint(7, {"W": np.array([[1.0, 2.0]], np.float32)})
    data = encode_checkpoint(ckpt)
    expected = (
        b"CKPT" + (7).to_bytes(8, "little") + (1).to_bytes(4, "little")
        + b"\x01\x00W" + (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
        + np.array([1.0, 2.0], "<f4").tobytes()
    )
    assert data == expected
    with pytest.raises(MalformedPayload):
        decode_checkpoint(data[:-2])
    with pytest.raises(MalformedPayload):
        decode_checkpoint(b"XXXX" + data[4:])
