"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest -s tests/test_acceptance.py`` to see the report lines.
"""

import dataclasses
import math

import numpy as np
import pytest

from sparseloco import codec
from sparseloco.codec import CompressedChunk, CompressedDelta, FormatError
from sparseloco.config import from_dict, load_config
from sparseloco.core import ChunkGeometry, InvalidData, ParamVector, Rng, chunk_layout
from sparseloco.optimizer import (
    ErrorFeedback,
    LrSchedule,
    adamw_update,
    aggregate,
    compress_with_ef,
    inner_lr_at,
    median_normalize,
)
from sparseloco.swarm import Swarm
from sparseloco.tasks import make_shards
from sparseloco.timing import PRESETS


def check(name, ok, detail):
    print(f"\n{'PASS' if ok else 'FAIL'} [{name}] {detail}")
    assert ok, detail


def test_01_entropy_bound():
    bits = codec.index_entropy_bound(4096, 64)
    # independent: log2 C(4096, 64) / 64 via lgamma
    oracle = (math.lgamma(4097) - math.lgamma(65) - math.lgamma(4033)) / math.log(2) / 64
    assert bits == pytest.approx(oracle, abs=1e-9)
    check("entropy bound", abs(bits - 7.36) <= 0.01, f"{bits:.4f} bits/value, target 7.36 +/- 0.01")


def test_02_compression_ratio():
    g = ChunkGeometry(k=64)
    ideal = codec.compression_ratio(g, dense_bits=32, wire_bits_per_selected=12 + 2)
    n = 4096 * 1024
    values = np.random.default_rng(0).standard_normal(n)
    delta = ParamVector(values, (("w", (n,)),))
    compressed, _ = compress_with_ef(delta, ErrorFeedback.zeros(n), g, peer_id="bench")
    payload = codec.serialize(compressed)
    measured = codec.measured_compression_ratio(payload, n)
    ok = abs(ideal - 146.29) <= 0.01 and measured >= 140
    check("compression ratio", ok, f"idealized {ideal:.2f} (target 146.29 +/- 0.01), measured {measured:.2f} on {n} values (floor 140)")


def test_03_utilization_presets():
    targets = {"reference-72b": 94.5, "intellect-1": 82.1, "sparseloco-8b": 95.7}
    got = {name: 100 * PRESETS[name].utilization() for name in targets}
    ok = all(abs(got[n] - t) <= 0.1 for n, t in targets.items())
    check("utilization", ok, ", ".join(f"{n} {got[n]:.2f}% (target {t})" for n, t in targets.items()))


def test_04_lossless_identity():
    cfg = from_dict({
        "seed": 3,
        "task": {"kind": "quadratic", "dim": 64, "n_shards": 4, "shards_per_peer": 4, "examples_per_shard": 128},
        "compression": {"chunk": 4096, "topk": 4096, "quant_bits": 0},
        "optim": {"H": 30, "alpha": 1.0, "lr": {"warmup_steps": 30, "peak": 0.02, "floor": 0.002, "flatten_start": 150, "flatten_length": 30, "total_steps": 300}},
        "churn": {"initial_behaviors": ["honest"], "p_leave": 0.0, "join_rate": 0.0},
    })
    sw = Swarm(cfg)
    pid = sw.active_ids()[0]
    shards = np.array(sorted(sw.peers[pid].assignment))
    layout = sw.params.layout
    # reference: one uninterrupted AdamW run fed the same batch streams
    x = sw.params.values.copy()
    m, v, t = np.zeros_like(x), np.zeros_like(x), 0
    mismatched = []
    for r in range(10):
        sw.step()
        g = Rng(cfg.seed).generator("batch", r, pid)
        for h in range(30):
            batch = sw.task.sample_batch(shards, cfg.task.batch_size, g)
            t += 1
            grad = sw.task.gradient(ParamVector(x, layout), batch).values
            x, m, v = adamw_update(x, m, v, t, grad, inner_lr_at(r * 30 + h, sw.schedule), sw.adamw)
        if not np.array_equal(x, sw.params.values):
            mismatched.append(r)
    check("lossless identity", not mismatched, f"10 rounds x H=30, bitwise mismatches at rounds {mismatched}")


def test_05_error_feedback_exactness():
    rng = np.random.default_rng(5)
    layout = (("w", (96, 80)), ("b", (5000,)))
    n = 96 * 80 + 5000
    g = ChunkGeometry(k=64)
    ef = ErrorFeedback.zeros(n, 0.95)
    worst = 0.0
    for r in range(100):
        delta = rng.standard_normal(n) * 10.0 ** rng.uniform(-4, 1)
        compressed, new = compress_with_ef(ParamVector(delta, layout), ef, g, base_round=r, peer_id="p")
        sent = codec.decode_dense(compressed, chunk_layout(layout, g), n, g)
        target = ef.beta * ef.e + delta
        ulp = np.maximum(np.spacing(np.abs(target)), np.spacing(0))
        worst = max(worst, float(np.max(np.abs(new.e + sent - target) / ulp)))
        ef = new
    check("error feedback", worst <= 4, f"max residual {worst:.2f} ulp over 100 rounds (bound 4)")


def test_06_replica_consensus():
    cfg = dataclasses.replace(load_config("logistic-default"), rounds=200)
    cfg = dataclasses.replace(cfg, churn=dataclasses.replace(cfg.churn, initial_peers=8))
    sw = Swarm(cfg)
    disagreements, peers_seen = [], 0
    for _ in range(200):
        log = sw.step()
        digests = {p.params.digest() for p in sw.peers.values()}
        peers_seen = max(peers_seen, len(sw.peers))
        if sw.peers and digests != {log.global_param_digest}:
            disagreements.append(log.round)
    check("replica consensus", not disagreements, f"200 rounds, up to {peers_seen} peers, disagreeing rounds {disagreements}")


def test_07_participation_statistics():
    logs = Swarm(load_config("logistic-default")).run(500)
    active = np.mean([log.active_peers for log in logs])
    contrib = np.mean([log.contributing_peers for log in logs])
    ok = 22 <= active <= 27 and 15 <= contrib <= 19
    check("participation", ok, f"mean active {active:.2f} (22..27), mean contributing {contrib:.2f} (15..19) over 500 rounds")


def test_08a_large_norm_bounded():
    rng = np.random.default_rng(8)
    layout = (("w", (64, 64)), ("b", (4096,)))
    n = 2 * 4096
    g = ChunkGeometry()
    worst = 0.0
    for trial in range(50):
        R = int(rng.integers(3, 21))
        honest = []
        for i in range(R - 1):
            d, _ = compress_with_ef(ParamVector(rng.standard_normal(n) * 0.01, layout), ErrorFeedback.zeros(n), g, base_round=trial, peer_id=f"h{i:02d}")
            honest.append(d)
        huge = rng.standard_normal(n)
        huge *= 1e6 / np.linalg.norm(huge)
        attacker, _ = compress_with_ef(ParamVector(huge, layout), ErrorFeedback.zeros(n), g, base_round=trial, peer_id="zz")
        chunks = chunk_layout(layout, g)
        dense = [codec.decode_dense(d, chunks, n, g) for d in [*honest, attacker]]
        median = sorted(np.linalg.norm(d) for d in dense)[(R - 1) // 2]
        normalized = median_normalize(dense)
        with_attacker = aggregate([*honest, attacker], layout, g, normalize=True).values
        honest_part = sum(normalized[:-1]) / R
        influence = np.linalg.norm(with_attacker - honest_part)
        worst = max(worst, influence / (median / R))
    check("norm-1e6 bound", worst <= 1 + 1e-9, f"worst attacker influence {worst:.6f} x median/R over 50 trials")


def test_08b_copier_excluded():
    base = load_config("logistic-default")
    rounds, excluded = 0, 0
    for seed in range(20):
        cfg = dataclasses.replace(
            base, seed=seed,
            churn=dataclasses.replace(base.churn, initial_behaviors=["honest"] * 23 + ["copier"], p_leave=0.0, join_rate=0.0),
        )
        sw = Swarm(cfg)
        copier = next(p for p, peer in sw.peers.items() if peer.behavior == "copier")
        for r in range(30):
            log = sw.step()
            if r >= 10:
                rounds += 1
                excluded += copier not in log.selected_ids
    frac = excluded / rounds
    check("copier exclusion", frac >= 0.9, f"copier excluded from {100 * frac:.1f}% of {rounds} post burn-in selections over 20 seeds")


def test_09_convergence_vs_lossless():
    def final_loss(lossless):
        comp = {"chunk": 4096, "topk": 4096, "quant_bits": 0} if lossless else {"chunk": 4096, "topk": 64, "quant_bits": 2}
        base = load_config("logistic-default")
        cfg = from_dict({
            **{k: v for k, v in base.to_dict().items() if k not in ("compression", "churn")},
            "compression": comp,
            "churn": {"initial_behaviors": ["honest"] * 4, "p_leave": 0.0, "join_rate": 0.0},
        })
        return Swarm(cfg).run(100)[-1].train_loss

    sparse, dense = final_loss(False), final_loss(True)
    check("convergence", sparse <= 1.1 * dense, f"compressed {sparse:.5f} vs lossless {dense:.5f} (ratio {sparse / dense:.4f}, bound 1.1)")


def _random_delta(rng):
    quantized = bool(rng.integers(2))
    chunks = []
    for _ in range(int(rng.integers(0, 6))):
        k = int(rng.integers(1, 65))
        idx = np.sort(rng.choice(4096, k, replace=False)).astype(np.uint16)
        if quantized:
            lo, hi = sorted(float(np.float16(x)) for x in rng.uniform(0, 10, 2))
            chunks.append(CompressedChunk(idx, rng.integers(0, 4, k).astype(np.uint8), lo, hi))
        else:
            chunks.append(CompressedChunk(idx, values=rng.standard_normal(k)))
    peer = "".join(chr(c) for c in rng.integers(33, 127, int(rng.integers(1, 17))))
    return CompressedDelta(int(rng.integers(0, 2**63)), peer, tuple(chunks), rng.bytes(32))


def test_10_codec_round_trip_and_fuzz():
    rng = np.random.default_rng(10)
    bad_trips = 0
    for _ in range(10_000):
        d = _random_delta(rng)
        data = codec.serialize(d)
        bad_trips += not (codec.deserialize(data) == d)
    silent = rejected = 0
    for _ in range(10_000):
        d = _random_delta(rng)
        data = bytearray(codec.serialize(d))
        kind = rng.integers(3)
        if kind == 0:
            for pos in rng.choice(len(data), int(rng.integers(1, 5)), replace=False):
                data[pos] ^= int(rng.integers(1, 256))
        elif kind == 1:
            del data[int(rng.integers(0, len(data))):]
        else:
            pos = int(rng.integers(0, len(data) + 1))
            data[pos:pos] = rng.bytes(int(rng.integers(1, 8)))
        try:
            back = codec.deserialize(bytes(data))
        except (FormatError, InvalidData):
            rejected += 1
            continue
        silent += not (back == d)
    ok = bad_trips == 0 and silent == 0
    check("codec fuzz", ok, f"round-trip failures {bad_trips}/10000, silent mis-parses {silent}/10000 ({rejected} rejected)")


def _fd(task, params, batch, h=1e-6):
    x = params.values
    out = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        out[i] = (task.loss(params.with_values(x + e), batch) - task.loss(params.with_values(x - e), batch)) / (2 * h)
    return out


def test_11_gradient_oracle():
    worst = {}
    for kind in ("quadratic", "logistic", "mlp"):
        task, _ = make_shards(kind, seed=11)
        rng = np.random.default_rng(11)
        n = task.planted.values.size
        errs = []
        for _ in range(100):
            p = ParamVector(rng.standard_normal(n) * 0.5, task.layout)
            batch = task.sample_batch([0, 1], 8, rng)
            g, fd = task.gradient(p, batch).values, _fd(task, p, batch)
            errs.append(np.linalg.norm(g - fd) / max(np.linalg.norm(g), np.linalg.norm(fd), 1e-12))
        worst[kind] = max(errs)
    ok = all(e < 1e-5 for e in worst.values())
    check("gradient oracle", ok, ", ".join(f"{k} max rel err {e:.2e}" for k, e in worst.items()) + " (bound 1e-5)")


def test_12_schedule_shape():
    s = LrSchedule()
    warm = inner_lr_at(1500, s)
    flat = [inner_lr_at(t, s) for t in range(s.flatten_start, s.flatten_start + s.flatten_length)]
    before, after = inner_lr_at(s.flatten_start - 1, s), inner_lr_at(s.flatten_start + s.flatten_length + 1, s)
    terminal = inner_lr_at(s.total_steps, s)
    ok = (
        abs(warm - 1.2e-4) <= 1e-12
        and len(flat) == 13_500
        and len(set(flat)) == 1
        and before > flat[0] > after
        and abs(terminal - 1.2e-5) <= 1e-15
    )
    check("schedule", ok, f"warmup end {warm:.3e}, flat window {len(flat)} steps at {flat[0]:.4e}, terminal {terminal:.3e}")
