"""Acceptance gate: one test per criterion, each reporting a PASS/FAIL line.

Run ``pytest tests/test_acceptance.py`` (lines appear in the terminal
summary) or ``python tests/test_acceptance.py`` to print them directly.
"""

from __future__ import annotations

import functools
import json
import random
import signal
import socket
import subprocess
import sys
import threading
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent))

from oracles import ScalarLazyKey, brute_knn, central_difference, monolithic_two_tower_loss  # noqa: E402

from carls import rpc  # noqa: E402
from carls.bank import NEVER, KnowledgeBank, NamespaceConfig  # noqa: E402
from carls.core import FeatureRecord, KnowledgeKey, one_hot  # noqa: E402
from carls.harness import (  # noqa: E402
    DeterministicRun,
    Scenario,
    batch_for_step,
    build_dataset,
    run_scenario,
)
from carls.maker import Item, graph_agree, write_items  # noqa: E402
from carls.rpc import HEADER_SIZE, BankServer, LookupEmb, RemoteBank, SetEmb, Stats  # noqa: E402
from carls.trainer import (  # noqa: E402
    GRAPH,
    LABELED_EMB,
    LABELS,
    NODE_EMB,
    Batch,
    ModelSpec,
    Neighbors,
    Params,
    Trainer,
    init_params,
    loss_encoder_gnn,
    loss_graph_reg,
    loss_two_tower,
    num_fresh,
    softmax,
    write_checkpoint,
)

RESULTS: list = []


def criterion(number: int, title: str, budget_s: float):
    """Time the wrapped check, record a PASS/FAIL line, and enforce the runtime budget."""

    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            started = time.perf_counter()
            try:
                detail = fn(*args, **kwargs) or ""
                elapsed = time.perf_counter() - started
                assert elapsed < budget_s, f"took {elapsed:.1f}s, budget {budget_s:.0f}s"
            except BaseException as exc:
                elapsed = time.perf_counter() - started
                _record(number, title, False, f"{exc!s:.200} ({elapsed:.1f}s)")
                raise
            _record(number, title, True, f"{detail} ({elapsed:.1f}s)".strip())

        return run

    return wrap


def _record(number, title, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {number:2d} [{title}] {detail}"
    RESULTS.append(line)
    print(line)


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


# ---- 1. lazy updates vs a scalar replay


def _lazy_sequence(rng: random.Random):
    dim = rng.randint(1, 8)
    expiry = rng.choice([0, 1, 2, 3, 5, NEVER])
    bank = KnowledgeBank([NamespaceConfig(NODE_EMB, "embeddings", dim, flush_expiry_ticks=expiry)])
    ref = ScalarLazyKey(dim, expiry)
    key = KnowledgeKey(NODE_EMB, "x")
    shard = bank.shards[0]
    worst = 0.0
    for _ in range(rng.randint(1, 40)):
        op = rng.choices(["update", "lookup", "set", "tick"], [4, 2, 1, 2])[0]
        if op == "update":
            scale = 100.0 if rng.random() < 0.15 else 1.0  # occasional outlier
            g = np.float32([rng.gauss(0, scale) for _ in range(dim)])
            lr = float(np.float32(rng.uniform(0.01, 1.0)))
            bank.update_gradient(key, g, lr)
            ref.update([float(v) for v in g], lr)
        elif op == "set":
            v = np.float32([rng.uniform(-5, 5) for _ in range(dim)])
            version = rng.randint(0, 10)
            bank.set_embedding(key, v, version)
            ref.set([float(x) for x in v], version)
        elif op == "tick":
            bank.tick_expiry()
            ref.tick()
        else:
            e = bank.lookup_embeddings([key])[0]
            want, version = ref.lookup()
            assert e.version == version
            worst = max(worst, rel_err(e.vector.astype(np.float64), np.array(want)))
        # the stored entry itself, not just lookups, must follow the reference
        entry = shard.embeddings.get(key)
        assert (entry is None) == (ref.value is None)
        if entry is not None:
            assert entry.version == ref.version
            worst = max(worst, rel_err(entry.vector.astype(np.float64), np.array(ref.value)))
        assert len(shard.pending.get(key, [])) == len(ref.pending)
        assert shard.clock == ref.clock
    return worst


@criterion(1, "lazy-update oracle", 10)
def test_lazy_update_oracle():
    rng = random.Random(2024)
    worst = max(_lazy_sequence(rng) for _ in range(1000))
    assert worst <= 1e-5, f"relative error {worst:.2e}"
    return f"1000 sequences, worst rel err {worst:.1e}"


# ---- 2. synchronous equivalence


@criterion(2, "synchronous equivalence", 30)
def test_synchronous_equivalence():
    scn = Scenario.preset("ssl_graph_reg", lam=1.0, lr=0.05)
    ds = build_dataset(scn)
    spec = ModelSpec("graph_reg", ds.x.shape[1], scn.hidden_dim, ds.num_classes, lam=scn.lam)
    bank = KnowledgeBank(
        [NamespaceConfig(NODE_EMB, "embeddings", scn.hidden_dim, flush_expiry_ticks=0), NamespaceConfig(GRAPH, "features")],
        num_shards=4,
    )
    nbr_lists = ds.neighbors()
    for i, nbrs in enumerate(nbr_lists):
        rec = FeatureRecord([(KnowledgeKey(NODE_EMB, ds.keys[j]), 1.0) for j in nbrs])
        bank.set_features(KnowledgeKey(GRAPH, ds.keys[i]), rec)
    trainer = Trainer(spec, init_params(spec, 0), bank, lr=scn.lr)

    # local reference: plain f32 table, gradients applied as soon as they exist
    params = init_params(spec, 0)
    table = np.zeros((ds.n, scn.hidden_dim), np.float32)
    lr32 = np.float32(scn.lr)
    rng = np.random.default_rng(7)
    keys = [KnowledgeKey(NODE_EMB, k) for k in ds.keys]
    worst = 0.0
    for _ in range(200):
        idx = np.sort(rng.choice(ds.n, size=48, replace=False))
        labeled = ds.labeled[idx]
        targets = np.zeros((len(idx), ds.num_classes))
        targets[labeled, ds.observed[idx][labeled]] = 1.0
        batch = Batch([ds.keys[i] for i in idx], ds.x[idx].astype(np.float64), targets, labeled)
        trainer.train_step(batch)
        bank.tick_expiry()

        nbrs = Neighbors(
            [np.ones(len(nbr_lists[i])) for i in idx],
            [table[nbr_lists[i]].astype(np.float64).reshape(-1, scn.hidden_dim) for i in idx],
        )
        out = loss_graph_reg(params, batch.x, targets, labeled, nbrs, scn.lam)
        for name, g in out.grads.items():
            params.mats[name] = (params.mats[name] - scn.lr * g).astype(np.float32).astype(np.float64)
        for row, i in enumerate(idx):
            if np.any(out.d_h[row] != 0):
                delta = (out.d_h[row] * np.float64(lr32)).astype(np.float32)
                table[i] = (table[i].astype(np.float64) - delta).astype(np.float32)

        got = np.stack([bank.shard_for(k).embeddings[k].vector if k in bank.shard_for(k).embeddings else np.zeros(scn.hidden_dim, np.float32) for k in keys])
        worst = max(worst, float(np.max(np.abs(got.astype(np.float64) - table))))
        for name in params.mats:
            worst = max(worst, float(np.max(np.abs(trainer.params[name] - params[name]))))
    assert worst <= 1e-6, f"max deviation {worst:.2e}"
    return f"200 steps, max deviation {worst:.1e}"


# ---- 3. kNN vs brute force


@criterion(3, "kNN oracle", 60)
def test_knn_oracle():
    rng = np.random.default_rng(11)
    queries = 0
    for _ in range(200):
        n, dim = int(rng.integers(1, 513)), int(rng.integers(1, 17))
        vecs = rng.normal(size=(n, dim)).astype(np.float32)
        dup = rng.random(n) < 0.05  # exact ties exercise the key tie-break
        vecs[dup] = vecs[0]
        store = {f"{i:04x}".encode(): vecs[i] for i in range(n)}
        q = rng.normal(size=dim).astype(np.float32)
        k = int(rng.integers(1, min(n, 32) + 3))
        want = {m: [ident for ident, _ in brute_knn(store, q, k, m)] for m in ("cosine", "neg_l2")}
        for shards in (1, 2, 4, 8):
            bank = KnowledgeBank([NamespaceConfig(NODE_EMB, "embeddings", dim)], num_shards=shards)
            bank.set_embeddings([(KnowledgeKey(NODE_EMB, ident), v, 0) for ident, v in store.items()])
            for metric in ("cosine", "neg_l2"):
                got = [key.id for key in bank.knn_search(NODE_EMB, q, k, metric).keys]
                assert got == want[metric], f"n={n} dim={dim} shards={shards} {metric}"
                queries += 1
    return f"{queries} queries identical"


# ---- 4. gradient checks


def _max_grad_err(params, loss_fn, extra=()):
    out = loss_fn()
    worst = 0.0
    for name, g in out.grads.items():
        worst = max(worst, rel_err(g, central_difference(lambda: loss_fn().loss, params.mats[name])))
    for analytic, arr in extra:
        worst = max(worst, rel_err(analytic(out), central_difference(lambda: loss_fn().loss, arr)))
    return worst


def _graph_case(seed, variant):
    rng = np.random.default_rng(seed)
    d, h, c, n = int(rng.integers(2, 6)), int(rng.integers(2, 5)), int(rng.integers(2, 5)), int(rng.integers(1, 5))
    spec = ModelSpec(variant, d, h, c)
    params = init_params(spec, seed)
    for name in params.mats:
        params.mats[name] = rng.normal(size=params.mats[name].shape)
    x = rng.normal(size=(n, d))
    targets = softmax(rng.normal(size=(n, c)))
    labeled = rng.random(n) < 0.7
    labeled[0] = True
    counts = rng.integers(0, 4, n)
    nbrs = Neighbors([rng.random(m) for m in counts], [rng.normal(size=(m, h)) for m in counts])
    return params, x, targets, labeled, nbrs


@criterion(4, "gradient checks", 60)
def test_gradient_checks():
    worst = {"graph_reg": 0.0, "encoder_gnn": 0.0, "two_tower": 0.0}
    for seed in range(100):
        params, x, t, lab, nbrs = _graph_case(seed, "graph_reg")
        lam = float(np.random.default_rng(seed).uniform(0, 2))
        extra = [(lambda o, i=i: o.d_nbr[i], e) for i, e in enumerate(nbrs.embs) if len(e)]
        err = _max_grad_err(params, lambda: loss_graph_reg(params, x, t, lab, nbrs, lam), extra)
        worst["graph_reg"] = max(worst["graph_reg"], err)

        params, x, t, lab, nbrs = _graph_case(seed, "encoder_gnn")
        err = _max_grad_err(params, lambda: loss_encoder_gnn(params, x, t, lab, nbrs))
        worst["encoder_gnn"] = max(worst["encoder_gnn"], err)

        rng = np.random.default_rng(seed)
        d, dt, h = int(rng.integers(2, 6)), int(rng.integers(2, 6)), int(rng.integers(2, 5))
        pairs, tau = int(rng.integers(1, 5)), float(rng.uniform(0.2, 1.0))
        nf = num_fresh(pairs, float(rng.uniform(0.1, 1.0)))
        spec = ModelSpec("two_tower", d, h, text_dim=dt, temperature=tau)
        params = init_params(spec, seed)
        x, y = rng.normal(size=(pairs, d)), rng.normal(size=(pairs, dt))
        cached_a, cached_b = rng.normal(size=(pairs - nf, h)), rng.normal(size=(pairs - nf, h))
        negs = int(rng.integers(0, 4))
        neg_a, neg_b = rng.normal(size=(negs, h)), rng.normal(size=(negs, h))
        err = _max_grad_err(params, lambda: loss_two_tower(params, x, y, nf, cached_a, cached_b, neg_a, neg_b, tau))
        worst["two_tower"] = max(worst["two_tower"], err)
    bad = {k: v for k, v in worst.items() if v > 1e-4}
    assert not bad, f"rel err above 1e-4: {bad}"
    return "100 seeds x 3 variants, worst " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items())


# ---- 5. end-to-end SSL


@criterion(5, "end-to-end SSL", 120)
def test_end_to_end_ssl(tmp_path):
    acc = {}
    for label, overrides in (("baseline", dict(lam=0.0)), ("sync", dict(staleness=0)), ("async", dict(staleness=1))):
        scn = Scenario.preset("ssl_graph_reg", seed=0, **overrides)
        acc[label] = run_scenario(scn, tmp_path / label)["test_accuracy"]
    detail = ", ".join(f"{k} {v:.3f}" for k, v in acc.items())
    assert abs(acc["async"] - acc["sync"]) <= 0.02, detail
    assert acc["sync"] - acc["baseline"] >= 0.05 and acc["async"] - acc["baseline"] >= 0.05, detail
    return detail


# ---- 6. curriculum


@criterion(6, "curriculum label mining", 120)
def test_curriculum(tmp_path):
    mined = run_scenario(Scenario.preset("curriculum_label_mine", seed=0), tmp_path / "mined")
    never = run_scenario(Scenario.preset("curriculum_label_mine", seed=0, mining_rounds=0), tmp_path / "never")
    initial, bank_acc = mined["initial_label_accuracy"], mined["bank_label_accuracy"]
    detail = (
        f"labels {initial:.3f} -> {bank_acc:.3f}, "
        f"test {mined['test_accuracy']:.3f} vs never-mined {never['test_accuracy']:.3f}"
    )
    assert abs(initial - 0.7) < 0.05, detail  # the corpus really carries ~30% noise
    assert bank_acc > 0.7 and bank_acc > initial, detail
    assert mined["test_accuracy"] > never["test_accuracy"], detail
    return detail


# ---- 7. graph agreement


def _one_nn(labeled, unlabeled):
    out = {}
    for u, q in unlabeled.items():
        best = None
        for key, (v, label) in labeled.items():
            dot = sum(float(a) * float(b) for a, b in zip(q, v))
            nq = sum(float(a) ** 2 for a in q) ** 0.5
            nv = sum(float(b) ** 2 for b in v) ** 0.5
            s = dot / (nq * nv) if nq > 0 and nv > 0 else 0.0
            rank = (-s, key.encode())
            if best is None or rank < best[0]:
                best = (rank, s, label)
        if best is not None and best[1] > 0:
            out[u] = best[2]
    return out


@criterion(7, "graph agreement 1-NN", 10)
def test_graph_agreement_one_nn():
    copied = 0
    for seed in range(50):
        rng = np.random.default_rng(1000 + seed)
        dim, classes = int(rng.integers(2, 9)), int(rng.integers(2, 6))
        bank = KnowledgeBank(
            [
                NamespaceConfig(NODE_EMB, "embeddings", dim),
                NamespaceConfig(LABELED_EMB, "embeddings", dim),
                NamespaceConfig(LABELS, "features"),
            ],
            num_shards=int(rng.choice([1, 2, 4, 8])),
        )
        labeled = {}
        for i in range(int(rng.integers(1, 40))):
            v = rng.normal(size=dim).astype(np.float32)
            label = int(rng.integers(0, classes))
            labeled[f"L{i}"] = (v, label)
            bank.set_embedding(KnowledgeKey(LABELED_EMB, f"L{i}"), v)
            bank.set_features(KnowledgeKey(LABELS, f"L{i}"), FeatureRecord(label_dist=one_hot(label, classes), provenance="observed"))
        unlabeled = {f"U{i}": rng.normal(size=dim).astype(np.float32) for i in range(int(rng.integers(1, 40)))}
        for u, v in unlabeled.items():
            bank.set_embedding(KnowledgeKey(NODE_EMB, u), v)
        graph_agree(bank, list(unlabeled), 1, classes)
        recs = bank.lookup_features([KnowledgeKey(LABELS, u) for u in unlabeled])
        got = {u: int(np.argmax(r.label_dist)) for u, r in zip(unlabeled, recs) if r is not None}
        assert got == _one_nn(labeled, unlabeled), f"instance {seed}"
        copied += len(got)
    return f"50 instances, {copied} labels copied"


# ---- 8. two-tower


@criterion(8, "two-tower cached negatives", 120)
def test_two_tower(tmp_path):
    scn = Scenario.preset("two_tower", seed=0, steps=100, num_negatives=40)
    run = DeterministicRun(scn, tmp_path / "exact")
    ds, trainer = run.ds, run.trainer
    pre_params, negatives = {}, {}

    def capture(t):
        pre_params[t + 1] = {k: v.copy() for k, v in trainer.params.mats.items()}
        if t:
            negatives[t] = list(trainer.last_negatives)

    run.hooks.append(capture)
    run.run()
    rows = (tmp_path / "exact" / "metrics.csv").read_text().splitlines()
    header = rows[0].split(",")
    losses = [float(r.split(",")[header.index("loss")]) for r in rows[1:]]
    index = {k: i for i, k in enumerate(ds.keys)}
    worst = 0.0
    for t in range(1, scn.steps + 1):
        batch = batch_for_step(scn, ds, t)
        neg = [index[k] for k in negatives[t]]
        assert len(neg) == scn.num_negatives
        want = monolithic_two_tower_loss(
            pre_params[t]["A"], pre_params[t]["B"], batch.x, batch.y_text, ds.x[neg], ds.y[neg],
            num_fresh(len(batch.keys), scn.fresh_fraction), scn.temperature,
        )
        worst = max(worst, abs(losses[t - 1] - want))
    assert worst <= 1e-5, f"loss deviation {worst:.2e}"

    base = Scenario.preset("two_tower", seed=0)
    recall = {}
    for negs in (0, 10 * base.batch_size):
        recall[negs] = run_scenario(base.replace(num_negatives=negs), tmp_path / f"r{negs}")["recall_at_1"]
    detail = f"loss deviation {worst:.1e}; recall@1 in-batch {recall[0]:.3f}, +{10 * base.batch_size} cached {recall[10 * base.batch_size]:.3f}"
    assert recall[10 * base.batch_size] >= recall[0], detail
    return detail


# ---- 9. protocol robustness


def _fuzz_frames(rng: random.Random, count: int):
    valid = [
        rpc.encode_request(Stats(), 1),
        rpc.encode_request(LookupEmb([KnowledgeKey(NODE_EMB, "k1")]), 2),
        rpc.encode_request(SetEmb(KnowledgeKey(NODE_EMB, "fz"), np.ones(4, np.float32), 1), 3),
    ]
    for _ in range(count):
        kind = rng.randrange(5)
        base = bytearray(rng.choice(valid))
        if kind == 0:  # pure noise
            yield bytes(rng.getrandbits(8) for _ in range(rng.randint(1, 64)))
        elif kind == 1:  # flipped bytes
            for _ in range(rng.randint(1, 4)):
                base[rng.randrange(len(base))] = rng.getrandbits(8)
            yield bytes(base)
        elif kind == 2:  # valid header, garbage payload of the declared length
            payload = bytes(rng.getrandbits(8) for _ in range(rng.randint(0, 48)))
            yield rpc.HEADER.pack(b"CRLS", 1, rng.randrange(256), rng.getrandbits(64), len(payload)) + payload
        elif kind == 3:  # truncated
            yield bytes(base[: rng.randrange(1, len(base))])
        else:  # absurd length
            yield rpc.HEADER.pack(b"CRLS", 1, 1, rng.getrandbits(64), rng.choice([2**31, 2**32 - 1]))


def _read_frames(sock, count):
    buf, frames = b"", []
    while len(frames) < count:
        chunk = sock.recv(65536)
        if not chunk:
            break
        buf += chunk
        while len(buf) >= HEADER_SIZE:
            size = HEADER_SIZE + rpc.parse_header(buf).payload_len
            if len(buf) < size:
                break
            frames.append(rpc.decode_response(buf[:size]))
            buf = buf[size:]
    return frames, buf


@criterion(9, "protocol robustness", 60)
def test_protocol_robustness():
    bank = KnowledgeBank([NamespaceConfig(NODE_EMB, "embeddings", 4)], num_shards=4)
    vectors = {i: np.arange(4, dtype=np.float32) * i for i in range(64)}
    for i, v in vectors.items():
        bank.set_embedding(KnowledgeKey(NODE_EMB, f"k{i}"), v, i)
    crashes = []
    old_hook = threading.excepthook
    threading.excepthook = lambda args: crashes.append(args.exc_value)
    try:
        with BankServer(bank, workers=8) as srv:
            rng = random.Random(5)
            frames = list(_fuzz_frames(rng, 10_000))
            for start in range(0, len(frames), 50):
                with socket.create_connection(srv.address) as s:
                    s.settimeout(10)
                    try:
                        s.sendall(b"".join(frames[start:start + 50]))
                        s.shutdown(socket.SHUT_WR)
                        while s.recv(65536):
                            pass
                    except OSError:
                        pass  # the server may close a poisoned stream first
            remote = RemoteBank.connect(srv.endpoint)
            assert remote.lookup_embeddings([KnowledgeKey(NODE_EMB, "k3")])[0].vector.tolist() == vectors[3].tolist()
            remote.close()

            per_conn = 10_000 // 8
            problems = []

            def client(c):
                ids = [c * 1_000_000 + n for n in range(per_conn)]
                wanted = {rid: (rid % 64) for rid in ids}
                with socket.create_connection(srv.address) as s:
                    s.settimeout(30)
                    payload = b"".join(rpc.encode_request(LookupEmb([KnowledgeKey(NODE_EMB, f"k{wanted[r]}")], create=False), r) for r in ids)
                    sender = threading.Thread(target=s.sendall, args=(payload,))
                    sender.start()
                    got, _ = _read_frames(s, per_conn)
                    sender.join()
                    s.shutdown(socket.SHUT_WR)
                    extra, rest = _read_frames(s, 1)
                seen = [rid for rid, _, _ in got]
                if sorted(seen) != ids or extra or rest:
                    problems.append(f"conn {c}: {len(seen)} responses, {len(set(seen))} distinct, {len(extra)} extra")
                for rid, mtype, body in got:
                    if mtype != rpc.MsgType.LOOKUP_EMB or body[0].vector.tolist() != vectors[wanted[rid]].tolist():
                        problems.append(f"conn {c}: wrong reply to {rid}")
                        break

            threads = [threading.Thread(target=client, args=(c,)) for c in range(8)]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
            assert srv.running
    finally:
        threading.excepthook = old_hook
    assert not crashes, f"server thread died: {crashes[0]!r}"
    assert not problems, problems[:3]
    return "10000 fuzz frames survived; 10000 pipelined requests over 8 connections answered exactly once"


# ---- 10. crash and restart


def _maker_cmd(endpoint, ckpt_dir, items_path):
    return [
        sys.executable, "-m", "carls", "maker", "run", "--task", "embed_refresh", "--bank", endpoint,
        "--checkpoint-dir", str(ckpt_dir), "--input", str(items_path), "--batch-size", "4",
        "--poll-ms", "10", "--max-passes", "1",
    ]


@criterion(10, "maker crash and restart", 30)
def test_maker_crash_restart(tmp_path):
    rng = np.random.default_rng(3)
    items = [Item(f"n{i:05d}", rng.normal(size=6)) for i in range(6000)]
    write_items(tmp_path / "items.tsv", items)
    W = rng.normal(size=(4, 6))
    write_checkpoint(Params({"W": W, "V": rng.normal(size=(2, 4))}, 5), tmp_path / "ck")
    namespaces = [NamespaceConfig(NODE_EMB, "embeddings", 4)]
    total = len(items)

    clean = KnowledgeBank(namespaces, num_shards=4)
    with BankServer(clean) as srv:
        subprocess.run(_maker_cmd(srv.endpoint, tmp_path / "ck", tmp_path / "items.tsv"), check=True, timeout=25)
    assert sum(s.entries for s in clean.stats()) == total

    crashed = KnowledgeBank(namespaces, num_shards=4)
    with BankServer(crashed) as srv:
        proc = subprocess.Popen(_maker_cmd(srv.endpoint, tmp_path / "ck", tmp_path / "items.tsv"))
        deadline = time.monotonic() + 20
        while sum(s.entries for s in crashed.stats()) < total // 4:
            assert proc.poll() is None and time.monotonic() < deadline, "maker finished before it could be killed"
            time.sleep(0.005)
        proc.send_signal(signal.SIGKILL)
        proc.wait()
        written = sum(s.entries for s in crashed.stats())
        assert written < total, "kill landed after the stream ended"
        subprocess.run(_maker_cmd(srv.endpoint, tmp_path / "ck", tmp_path / "items.tsv"), check=True, timeout=25)
    assert crashed.content() == clean.content()
    return f"killed after {written}/{total} items; restarted state identical"


if __name__ == "__main__":
    import inspect
    import tempfile

    for name, fn in list(globals().items()):
        if name.startswith("test_"):
            needs_tmp = "tmp_path" in inspect.signature(fn).parameters
            try:
                fn(*([Path(tempfile.mkdtemp())] if needs_tmp else []))
            except Exception:
                pass  # already recorded as FAIL
    print(json.dumps({"passed": sum(r.startswith("PASS") for r in RESULTS), "total": len(RESULTS)}))
