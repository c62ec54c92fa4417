"""Acceptance criteria. Each test prints one ``[PASS]``/``[FAIL]`` line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the summary lines.
"""

import itertools
import math
import time

import numpy as np
import pytest

from oracles import central_differences, max_relative_error
from sparsefl.data import synth_dataset
from sparsefl.federation import Federation, RunConfig
from sparsefl.ledger import compare, cost_report, dense_bits, mib
from sparsefl.secagg import (
    DynamicRateState,
    MaskParams,
    audit_exposure,
    build_masks,
    dh_exchange,
    encrypt_encode,
    round_pair_masks,
    signed_masks_for,
    update_rate,
)
from sparsefl.sparsify import (
    ENTRY_BITS,
    decode,
    encode,
    schedule_rates,
    sparsify_flat,
    sparsify_layered,
)
from sparsefl.tensor import Batch, LayeredTensor, forward_loss_grad, init_model

MLP_SHAPES = [(784, 200), (200,), (200, 10), (10,)]
MNIST_DESK = dict(num_clients=100, clients_per_round=10, local_iterations=5, batch_size=50,
                  learning_rate=0.3, hidden=[200], rounds=100, partition="iid", seed=0)


@pytest.fixture
def verdict(capsys):
    def emit(cid: str, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {cid} {detail}")
        assert ok, f"{cid}: {detail}"

    return emit


def _desk_blobs(seed):
    return (synth_dataset(10, 100, 20, seed), synth_dataset(10, 50, 20, seed, sample_seed=1))


def test_c01_conservation(verdict):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    bad = 0
    for _ in range(1000):
        shapes = [tuple(int(d) for d in rng.integers(1, 12, rng.integers(1, 3))) for _ in range(4)]
        grad = LayeredTensor([rng.normal(size=s) * 10.0 ** rng.integers(-4, 4) for s in shapes])
        rates = np.sort(rng.uniform(0.01, 1.0, 4))[::-1]
        for sparse, res in (sparsify_layered(grad, rates), sparsify_flat(grad, float(rng.uniform(0.01, 1)))):
            back = decode(encode(sparse), shapes).to_dense() + res
            bad += not all(a.tobytes() == b.tobytes() for a, b in zip(back.layers, grad.layers))
    elapsed = time.perf_counter() - start
    verdict("C1", bad == 0 and elapsed < 10,
            f"conservation: {bad} mismatches over 1000 gradients x 2 pipelines, {elapsed:.2f}s")


def test_c02_cardinality(verdict):
    rng = np.random.default_rng(7)
    grad = LayeredTensor([rng.normal(size=s) for s in MLP_SHAPES])
    failures = []
    for s_0, alpha in itertools.product((0.1, 0.01), (0.2, 0.5, 0.8)):
        expected_rates = [s_0]
        for _ in range(len(MLP_SHAPES) - 1):
            expected_rates.append(max(expected_rates[-1] * alpha, 0.01))
        sparse, _ = sparsify_layered(grad, schedule_rates(s_0, alpha, 0.01, len(MLP_SHAPES)))
        expected = [max(1, math.floor(n * s)) for n, s in zip(grad.sizes, expected_rates)]
        nonzero = [int(np.count_nonzero(l)) for l in sparse.to_dense().layers]
        if sparse.counts != expected or nonzero != expected:
            failures.append((s_0, alpha, sparse.counts, expected))
    verdict("C2", not failures, f"cardinality over 6 (s_0, alpha) settings; failures={failures}")


def test_c03_mask_cancellation(verdict):
    start = time.perf_counter()
    worst = 0.0
    for x in (2, 3, 5):
        for seed in range(10):
            train, test = _desk_blobs(seed)
            kw = dict(num_clients=10, clients_per_round=x, hidden=[16], learning_rate=0.1,
                      rounds=20, seed=seed, R_0=0.3, R_min=0.05, k_ratio=1.0)
            sec = Federation(RunConfig(pipeline="secagg", **kw), train, test)
            oracle = Federation(RunConfig(pipeline="secagg-plain", **kw), train, test)
            for _ in range(20):
                sec.run_round()
                oracle.run_round()
                worst = max(worst, sec.model.max_abs_diff(oracle.model))
    elapsed = time.perf_counter() - start
    verdict("C3", worst <= 1e-9 and elapsed < 60,
            f"mask cancellation: max |masked - maskless| = {worst:.2e} over x in {{2,3,5}} x 10 seeds "
            f"x 20 rounds, {elapsed:.1f}s")


def test_c04_identity_degeneration(verdict):
    train, test = _desk_blobs(3)
    kw = dict(num_clients=20, clients_per_round=5, hidden=[16], learning_rate=0.1, rounds=10, seed=3)
    base = Federation(RunConfig(pipeline="fedavg", **kw), train, test)
    thgs = Federation(RunConfig(pipeline="thgs", s_0=1.0, alpha=1.0, s_min=1.0, **kw), train, test)
    flat = Federation(RunConfig(pipeline="flat", s=1.0, **kw), train, test)
    sec = Federation(RunConfig(pipeline="secagg", R_0=1.0, R_min=1.0, k_ratio=0.0, **kw), train, test)
    bitwise, worst = True, 0.0
    for _ in range(10):
        for f in (base, thgs, flat, sec):
            f.run_round()
        for f in (thgs, flat):
            bitwise &= all(a.tobytes() == b.tobytes() for a, b in zip(f.model.layers, base.model.layers))
        worst = max(worst, sec.model.max_abs_diff(base.model))
    verdict("C4", bitwise and worst <= 1e-9,
            f"identity: THGS/flat at s=1 bitwise equal to FedAvg: {bitwise}; "
            f"zero-mask secagg at R=1 max diff {worst:.2e}")


def test_c05_ledger_agreement(verdict):
    train, test = _desk_blobs(5)
    kw = dict(num_clients=20, clients_per_round=5, hidden=[16], learning_rate=0.1, rounds=10, seed=5)
    mismatches = 0
    checked = 0
    m = None
    for pipeline in ("flat", "thgs", "secagg"):
        fed = Federation(RunConfig(pipeline=pipeline, s_0=0.1, alpha=0.5, s_min=0.01, **kw), train, test)
        m = fed.m
        sched = fed.schedule
        for rec in fed.run():
            for measured, predicted in zip(rec.upload_bits, rec.predicted_bits):
                checked += 1
                mismatches += measured != predicted
            if sched is not None:
                k = sum(max(1, math.floor(n * s)) for n, s in zip(fed.model.sizes, sched.rates))
                mismatches += any(b != ENTRY_BITS * k for b in rec.upload_bits)
            mismatches += rec.download_bits != 64 * m
    fedavg = Federation(RunConfig(pipeline="fedavg", **kw), train, test)
    dense_ok = all(b == m * 64 for rec in fedavg.run(3) for b in rec.upload_bits)
    table = {159010: 1.2, 582026: 4.44, 5852170: 44.6, 14728266: 112.0}
    rel = {mm: abs(mib(dense_bits(mm)) - v) / v for mm, v in table.items()}
    table_ok = all(r <= 0.05 for r in rel.values())
    worst = max(rel.values())
    verdict("C5", mismatches == 0 and dense_ok and table_ok,
            f"ledger: {checked} sparse uploads, {mismatches} mismatches; dense = 64m: {dense_ok}; "
            f"published sizes worst rel err {worst:.2%} ("
            + ", ".join(f"{mm}->{mib(dense_bits(mm)):.3f}MiB" for mm in table) + ")")


@pytest.fixture(scope="module")
def fig1_runs(mnist):
    train, test = mnist
    start = time.perf_counter()
    runs = {}
    for name, extra in (("fedavg", dict(pipeline="fedavg")),
                        ("s0.1", dict(pipeline="thgs", s_0=0.1, alpha=0.8, s_min=0.01)),
                        ("s0.01", dict(pipeline="thgs", s_0=0.01, alpha=0.8, s_min=0.01))):
        fed = Federation(RunConfig(**MNIST_DESK, **extra), train, test)
        runs[name] = (fed.run(), fed.m)
    return runs, time.perf_counter() - start


def test_c06_compression_arithmetic(verdict, fig1_runs, capsys):
    runs, _ = fig1_runs
    base_recs, m = runs["fedavg"]
    recs, _ = runs["s0.01"]
    base, rep = cost_report(base_recs), cost_report(recs)
    cmp = compare("s0.01", rep, recs, base, base_recs)
    k = sum(max(1, math.floor(n * 0.01)) for n in (784 * 200, 200, 200 * 10, 10))
    exact_ratio = k * 96 / (m * 64)
    payload_ok = abs(cmp.payload_ratio - exact_ratio) < 1e-12 and abs(cmp.payload_ratio - 0.015) < 0.015 * 0.01
    factor_ok = cmp.round_ratio is not None and math.isclose(
        cmp.upload_ratio, cmp.payload_ratio * cmp.round_ratio, rel_tol=1e-12)
    total_ok = math.isclose(rep.upload_total / base.upload_total, cmp.upload_ratio, rel_tol=1e-12)
    with capsys.disabled():
        print(f"\n      payload ratio {cmp.payload_ratio:.4%} (0.01*96/64 = 1.5000%; exact k={k}: {exact_ratio:.4%})"
              f"\n      round ratio   {cmp.round_ratio:.3f} (n_target {rep.n_target} vs {base.n_target})"
              f"\n      upload ratio  {cmp.upload_ratio:.4%} (= payload x round), multiplier x{cmp.multiplier:.1f}")
    verdict("C6", payload_ok and factor_ok and total_ok,
            f"compression: payload {cmp.payload_ratio:.3%} x round ratio {cmp.round_ratio:.3f} "
            f"= upload {cmp.upload_ratio:.3%}")


def test_c07_convergence_trend(verdict, fig1_runs):
    runs, elapsed = fig1_runs
    final = {name: float(np.mean([r.accuracy for r in recs[-10:]])) for name, (recs, _) in runs.items()}
    gap1 = final["fedavg"] - final["s0.1"]
    gap2 = final["fedavg"] - final["s0.01"]
    ok = gap1 <= 0.02 and gap2 <= 0.04 and final["s0.01"] >= 0.90 and elapsed <= 15 * 60
    verdict("C7", ok,
            f"convergence (last-10 mean, 100 rounds): FedAvg {final['fedavg']:.4f}, "
            f"s=0.1 {final['s0.1']:.4f} (gap {100 * gap1:.2f} pts), "
            f"s=0.01 {final['s0.01']:.4f} (gap {100 * gap2:.2f} pts), {elapsed:.0f}s")


def test_c08_hierarchical_vs_flat(verdict):
    rng = np.random.default_rng(11)
    small = rng.normal(size=(30, 20))
    grad = LayeredTensor([small, rng.normal(size=(20, 10)) * 1000 * np.abs(small).max()])
    s, s_min = 0.05, 0.01
    flat, _ = sparsify_flat(grad, s)
    layered, _ = sparsify_layered(grad, schedule_rates(s, 0.5, s_min, 2))
    need = max(1, math.floor(small.size * s_min))
    ok = flat.counts[0] == 0 and layered.counts[0] >= need
    verdict("C8", ok, f"hierarchical vs flat: small layer gets flat={flat.counts[0]}, "
                      f"THGS={layered.counts[0]} (need >= {need})")


def test_c09_rate_bounds(verdict):
    rng = np.random.default_rng(9)
    violations = 0
    for _ in range(10_000):
        T = int(rng.integers(1, 200))
        R_min = float(rng.uniform(1e-4, 1))
        state = DynamicRateState(
            R=float(rng.uniform(R_min, 1)), R_min=R_min, alpha=float(rng.uniform(0, 3)), T=T,
            t=int(rng.integers(0, T)),
            prev_loss=None if rng.random() < 0.1 else float(rng.exponential(2) * (rng.random() > 0.05)),
        )
        nxt = update_rate(state, float(rng.exponential(2)))
        violations += not (R_min <= nxt.R <= 1)
    verdict("C9", violations == 0, f"rate bounds: {violations} of 10^4 updates left [R_min, 1]")


def test_c10_exposure_audit(verdict):
    shapes = [(8, 6), (6,), (6, 4), (4,)]
    params = MaskParams(0.0, 1.0, k_ratio=1.0, x=2)
    mismatched = 0
    flagged_total = 0
    for trial in range(100):
        rng = np.random.default_rng([10, trial])
        ids = [0, 1]
        pm = round_pair_masks(ids, dh_exchange(ids, seed=trial), shapes, params)
        grads, states, ups = [], [], []
        for c in ids:
            g = LayeredTensor([np.where(rng.random(s) < 0.5, 0.0, rng.normal(size=s)) for s in shapes])
            st = build_masks(g, float(rng.uniform(0.05, 0.3)), signed_masks_for(c, ids, pm))
            grads.append(g)
            states.append(st)
            ups.append(decode(encode(encrypt_encode(g, st)), shapes))
        report = audit_exposure(ups)
        for layer in range(len(shapes)):
            # plaintext oracle: both clients send, neither has gradient there, the mask is live
            both = states[0].mask_t[layer] & states[1].mask_t[layer]
            no_grad = (grads[0][layer] == 0) & (grads[1][layer] == 0)
            live = states[0].mask_e[layer] != 0
            expected = np.flatnonzero((both & no_grad & live).ravel())
            flagged_total += expected.size
            mismatched += not np.array_equal(report.positions[layer], expected)
    verdict("C10", mismatched == 0 and flagged_total > 0,
            f"exposure audit: {mismatched} layer mismatches over 100 rounds ({flagged_total} exposures)")


def test_c11_gradient_correctness(verdict):
    worst = 0.0
    for seed in range(5):
        rng = np.random.default_rng(seed)
        model = init_model([5, 7, 4], seed)
        for b in model.layers[1::2]:
            b[:] = rng.normal(0, 0.3, b.shape)
        batch = Batch(rng.normal(size=(6, 5)), rng.integers(0, 4, 6))
        _, g = forward_loss_grad(model, batch)
        numeric = central_differences(model.flatten(), model.shapes, batch.inputs, batch.labels)
        worst = max(worst, max_relative_error(g.flatten(), numeric))
    verdict("C11", worst < 1e-6 and model.total_len <= 100,
            f"gradient: worst relative error {worst:.2e} over every coordinate of a "
            f"{model.total_len}-parameter model, 5 seeds")
