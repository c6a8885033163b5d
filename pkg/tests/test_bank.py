import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from carls.bank import NEVER, KnowledgeBank, NamespaceConfig
from carls.core import (
    DimensionMismatch,
    FeatureRecord,
    KnowledgeKey,
    MalformedRecord,
    NonFinite,
    UnknownNamespace,
)

from oracles import ScalarLazyKey, brute_knn

E = "node_emb"
F = "labels"


def make_bank(dim=2, expiry=NEVER, shards=1, **kw):
    return KnowledgeBank(
        [NamespaceConfig(E, "embeddings", dim, flush_expiry_ticks=expiry, **kw), NamespaceConfig(F, "features")],
        num_shards=shards,
    )


def k(name, ns=E):
    return KnowledgeKey(ns, name.encode())


def vec(bank, name):
    return bank.lookup_embeddings([k(name)])[0].vector


def test_set_then_lookup_bit_exact():
    bank = make_bank(3)
    v = np.array([0.1, -2.5, 1e-30], np.float32)
    bank.set_embedding(k("a"), v, 1)
    assert vec(bank, "a").tobytes() == v.tobytes()


def test_version_is_monotone():
    bank = make_bank()
    bank.set_embedding(k("a"), [1, 1], 9)
    bank.set_embedding(k("a"), [2, 2], 5)
    e = bank.lookup_embeddings([k("a")])[0]
    assert e.version == 9
    assert list(e.vector) == [2, 2]


def test_set_discards_pending():
    bank = make_bank()
    bank.update_gradient(k("a"), [1, 1], 0.5)
    bank.set_embedding(k("a"), [3, 4], 1)
    assert list(vec(bank, "a")) == [3, 4]
    assert bank.stats()[0].pending_keys == 0


def test_default_creation_and_idempotent_reads():
    bank = make_bank()
    e = bank.lookup_embeddings([k("new")])[0]
    assert list(e.vector) == [0, 0] and e.version == 0
    assert bank.lookup_embeddings([k("new")])[0] == e


def test_uniform_default_is_deterministic():
    a = make_bank(4, init="uniform", init_scale=0.5, seed=3)
    b = make_bank(4, init="uniform", init_scale=0.5, seed=3, shards=4)
    va, vb = vec(a, "x"), vec(b, "x")
    assert va.tobytes() == vb.tobytes()
    assert np.all(np.abs(va) <= 0.5) and np.any(va != 0)
    assert vec(a, "y").tobytes() != va.tobytes()
    assert bank_missing_is_none(a)


def bank_missing_is_none(bank):
    return bank.lookup_embeddings([k("absent")], create=False) == [None]


def test_single_delta_flush():
    bank = make_bank()
    bank.update_gradient(k("a"), [1, 0], 0.1)
    np.testing.assert_allclose(vec(bank, "a"), [-0.1, 0], rtol=1e-7)
    # a second lookup does not apply the delta again
    np.testing.assert_allclose(vec(bank, "a"), [-0.1, 0], rtol=1e-7)


def test_two_sources_average():
    bank = make_bank()
    bank.set_embedding(k("a"), [1, 1], 0)
    bank.update_gradient(k("a"), [1, 0], 1.0, "t1")
    bank.update_gradient(k("a"), [0, 3], 1.0, "t2")
    # e - mean((1,0),(0,3)) = (1,1) - (0.5,1.5)
    np.testing.assert_allclose(vec(bank, "a"), [0.5, -0.5])


def test_outlier_rule():
    bank = make_bank()
    for g in ([1, 0], [1, 0], [100, 0]):
        bank.update_gradient(k("a"), g, 1.0)
    applied = bank.flush_key(k("a"))
    np.testing.assert_array_equal(applied, [1, 0])
    np.testing.assert_array_equal(vec(bank, "a"), [-1, 0])


def test_outlier_rule_needs_three_deltas():
    bank = make_bank()
    bank.update_gradient(k("a"), [1, 0], 1.0)
    bank.update_gradient(k("a"), [100, 0], 1.0)
    np.testing.assert_array_equal(vec(bank, "a"), [-50.5, 0])


def test_zero_median_skips_filtering():
    bank = make_bank()
    for g in ([0, 0], [0, 0], [9, 0]):
        bank.update_gradient(k("a"), g, 1.0)
    np.testing.assert_array_equal(vec(bank, "a"), [-3, 0])


def test_flush_empty_is_noop():
    bank = make_bank()
    bank.set_embedding(k("a"), [1, 2], 0)
    before = bank.lookup_embeddings([k("a")])[0]
    assert bank.flush_key(k("a")) is None
    assert bank.lookup_embeddings([k("a")])[0] == before


def test_nan_gradient_rejected():
    bank = make_bank()
    with pytest.raises(NonFinite):
        bank.update_gradient(k("a"), [np.nan, 0], 0.1)
    with pytest.raises(DimensionMismatch):
        bank.update_gradient(k("a"), [1, 0, 0], 0.1)
    assert bank.stats()[0].pending_keys == 0


def test_unknown_namespace():
    bank = make_bank()
    with pytest.raises(UnknownNamespace):
        bank.set_embedding(KnowledgeKey("nope", b"a"), [1, 2])
    with pytest.raises(UnknownNamespace):
        bank.set_embedding(k("a", F), [1, 2])
    with pytest.raises(UnknownNamespace):
        bank.lookup_features([k("a")])


def test_expiry_zero_flushes_on_next_tick():
    bank = make_bank(expiry=0)
    bank.update_gradient(k("a"), [1, 0], 1.0)
    assert bank.tick_expiry() == 1
    assert bank.stats()[0].pending_keys == 0


def test_expiry_never_keeps_caching():
    bank = make_bank(expiry=NEVER)
    bank.set_embedding(k("a"), [0, 0], 0)
    bank.update_gradient(k("a"), [1, 0], 1.0)
    for _ in range(100):
        assert bank.tick_expiry() == 0
    assert bank.shards[0].embeddings[k("a")].vector.tolist() == [0, 0]


def test_expiry_counts_ticks():
    bank = make_bank(expiry=5)
    bank.update_gradient(k("a"), [1, 0], 1.0)
    t = bank.shards[0].pending[k("a")][0].ltime  # delta arrived at t, clock is now t + 1
    ticks = 0
    while bank.shards[0].pending:
        bank.tick_expiry()
        ticks += 1
    # each tick advances the clock before checking, so the first tick with clock >= t + 5 is tick 4
    assert ticks == 4
    assert bank.shards[0].clock >= t + 5


def test_features_round_trip_and_absence():
    bank = make_bank()
    rec = FeatureRecord([(k("b"), 1.0)])
    bank.set_features(k("a", F), rec)
    assert bank.lookup_features([k("a", F), k("zz", F)]) == [rec, None]
    with pytest.raises(MalformedRecord):
        bank.set_features(k("a", F), FeatureRecord(label_dist=np.array([0.5, 0.6])))


def test_knn_examples():
    bank = make_bank()
    bank.set_embedding(k("a"), [1, 0])
    assert bank.knn_search(E, [1, 0], 1).hits == [(k("a"), 1.0)]
    bank.set_embedding(k("b"), [0, 1])
    bank.set_embedding(k("c"), [0.7, 0.7])
    hits = bank.knn_search(E, [1, 0], 2).hits
    assert [h[0] for h in hits] == [k("a"), k("c")]
    assert hits[1][1] == pytest.approx(0.7071067811865475, abs=1e-6)
    all_hits = bank.knn_search(E, [1, 0], 10, "neg_l2").hits
    assert [h[0] for h in all_hits] == [k("a"), k("c"), k("b")]


def test_knn_ties_break_on_key():
    bank = make_bank(shards=4)
    for name in ["d", "b", "a", "c"]:
        bank.set_embedding(k(name), [1, 1])
    assert [h[0].id for h in bank.knn_search(E, [1, 1], 3).hits] == [b"a", b"b", b"c"]


def test_knn_flushes_pending_in_deterministic_mode():
    bank = make_bank()
    bank.set_embedding(k("a"), [1, 0])
    bank.set_embedding(k("b"), [0.9, 0.1])
    bank.update_gradient(k("a"), [2, -1], 1.0)  # a becomes (-1, 1)
    assert bank.knn_search(E, [1, 0], 1).hits[0][0] == k("b")


def test_stats():
    bank = make_bank(shards=4)
    assert all(s.entries == s.pending_keys == s.clock == s.bytes == 0 for s in bank.stats())
    bank.set_embedding(k("a"), [1, 0])
    assert sorted(s.entries for s in bank.stats()) == [0, 0, 0, 1]
    prev = bank.stats()
    rng = np.random.default_rng(0)
    for i in range(50):
        bank.update_gradient(k(str(i % 7)), rng.normal(size=2), 0.1)
        if i % 5 == 0:
            bank.lookup_embeddings([k(str(i % 7))])
        cur = bank.stats()
        for p, c in zip(prev, cur):
            assert c.entries >= p.entries and c.clock >= p.clock and c.bytes >= p.bytes
        prev = cur


@settings(max_examples=200, deadline=None)
@given(st.data())
def test_lazy_update_matches_scalar_replay(data):
    dim = data.draw(st.integers(1, 4))
    expiry = data.draw(st.sampled_from([0, 1, 3, NEVER]))
    bank = make_bank(dim, expiry=expiry)
    ref = ScalarLazyKey(dim, expiry)
    small = st.floats(-10, 10, allow_nan=False, width=32)
    for _ in range(data.draw(st.integers(1, 25))):
        op = data.draw(st.sampled_from(["update", "update", "lookup", "set", "tick"]))
        if op == "update":
            g = data.draw(st.lists(small, min_size=dim, max_size=dim))
            bank.update_gradient(k("x"), g, 0.5)
            ref.update([float(np.float32(x)) for x in g], 0.5)
        elif op == "set":
            v = data.draw(st.lists(small, min_size=dim, max_size=dim))
            ver = data.draw(st.integers(0, 10))
            bank.set_embedding(k("x"), v, ver)
            ref.set([float(np.float32(x)) for x in v], ver)
        elif op == "tick":
            bank.tick_expiry()
            ref.tick()
        else:
            e = bank.lookup_embeddings([k("x")])[0]
            want, ver = ref.lookup()
            assert e.version == ver
            np.testing.assert_allclose(e.vector, want, rtol=1e-5, atol=1e-5)
        assert bank.shards[0].clock == ref.clock


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([1, 2, 4, 8]), st.sampled_from(["cosine", "neg_l2"]))
def test_knn_matches_brute_force(seed, shards, metric):
    rng = np.random.default_rng(seed)
    n, dim = int(rng.integers(1, 80)), int(rng.integers(1, 6))
    bank = make_bank(dim, shards=shards)
    store = {}
    for i in range(n):
        v = rng.normal(size=dim).astype(np.float32)
        store[f"{i:03d}".encode()] = v
        bank.set_embedding(k(f"{i:03d}"), v)
    q = rng.normal(size=dim).astype(np.float32)
    kk = int(rng.integers(1, n + 3))
    got = bank.knn_search(E, q, kk, metric).hits
    want = brute_knn(store, q, kk, metric)
    assert [h[0].id for h in got] == [w[0] for w in want]
    np.testing.assert_allclose([h[1] for h in got], [w[1] for w in want], rtol=1e-9, atol=1e-12)


def run_script(bank, seed):
    rng = np.random.default_rng(seed)
    out = []
    names = [f"n{i}" for i in range(12)]
    for _ in range(150):
        op = rng.integers(0, 5)
        name = names[rng.integers(0, len(names))]
        if op == 0:
            bank.set_embedding(k(name), rng.normal(size=3), int(rng.integers(0, 5)))
        elif op == 1:
            bank.update_gradient(k(name), rng.normal(size=3), 0.1)
        elif op == 2:
            e = bank.lookup_embeddings([k(name)])[0]
            out.append((e.vector.tobytes(), e.version))
        elif op == 3:
            out.append([(h[0], h[1]) for h in bank.knn_search(E, rng.normal(size=3), 4).hits])
        else:
            bank.tick_expiry()
    return out


@pytest.mark.parametrize("expiry", [0, NEVER])
def test_shard_transparency(expiry):
    ref = None
    for shards in (1, 2, 4, 8):
        bank = make_bank(3, expiry=expiry, shards=shards)
        trace = run_script(bank, 11)
        if ref is None:
            ref, ref_content = trace, bank.content()
        assert trace == ref
        assert bank.content() == ref_content


def test_no_lost_updates_under_concurrency():
    bank = make_bank(1, shards=4)
    bank.set_embedding(k("hot"), [0.0])
    n_threads, per_thread = 8, 200
    barrier = threading.Barrier(n_threads)

    def writer(i):
        barrier.wait()
        for _ in range(per_thread):
            bank.update_gradient(k("hot"), [1.0], 1.0, f"t{i}")

    threads = [threading.Thread(target=writer, args=(i,)) for i in range(n_threads)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    shard = bank.shard_for(k("hot"))
    assert len(shard.pending[k("hot")]) == n_threads * per_thread
    bank.lookup_embeddings([k("hot")])
    assert k("hot") not in shard.pending


def test_synchronous_mode_equals_sgd():
    bank = make_bank(4, expiry=0)
    rng = np.random.default_rng(5)
    local = rng.normal(size=4).astype(np.float32)
    bank.set_embedding(k("a"), local)
    for _ in range(200):
        g = rng.normal(size=4).astype(np.float32)
        bank.update_gradient(k("a"), g, 0.05)
        bank.tick_expiry()
        local = (local - (g.astype(np.float64) * np.float32(0.05)).astype(np.float32)).astype(np.float32)
        np.testing.assert_allclose(bank.shards[0].embeddings[k("a")].vector, local, atol=1e-6)


def test_snapshot_round_trip(tmp_path):
    bank = make_bank(3, shards=3, init="uniform", init_scale=0.1)
    rng = np.random.default_rng(2)
    for i in range(20):
        bank.set_embedding(k(f"e{i}"), rng.normal(size=3), i)
        bank.update_gradient(k(f"e{i % 5}"), rng.normal(size=3), 0.1, "src")
        bank.set_features(k(f"f{i}", F), FeatureRecord([(k(f"e{i}"), 0.5)], np.array([0.25, 0.75], np.float32)))
    paths = bank.save(tmp_path)
    assert len(paths) == 3 and all(p.read_bytes()[:4] == b"CKB1" for p in paths)
    loaded = KnowledgeBank.load(tmp_path)
    assert loaded.content() == bank.content()
    assert [s.clock for s in loaded.stats()] == [s.clock for s in bank.stats()]
    assert loaded.namespaces == bank.namespaces
