"""Acceptance criteria 1-10. Each test prints one PASS/FAIL line.

Criteria 7-9 run the toy task in ``configs/toy.json`` (2 modalities x 2
qubits, C=3, 400 training samples, N=4, R=30) over 5 derived seeds.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest

from mmqfed import cli
from mmqfed import model as mdl
from mmqfed.autodiff import OptimizerState, cross_entropy
from mmqfed.circuits import ParamCircuit, build_fusion_circuit, build_modality_pqc, simulate
from mmqfed.config import load_config
from mmqfed.data import gen_synthetic
from mmqfed.federation import FederationSettings, aggregate, aggregation_weights, run_federation
from mmqfed.model import ModalitySpec, MultimodalModel, forward_batch, loss_and_grad
from mmqfed.qstate import GateKind, GateOp, StateVector, apply_gate

import oracles

TOY = Path(__file__).resolve().parent.parent / "configs" / "toy.json"
SEEDS = 5
TWO_BY_TWO = [ModalitySpec("a", 4, 2), ModalitySpec("b", 4, 2)]


@pytest.fixture
def report(capsys):
    def emit(number, title, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {number}] {'PASS' if ok else 'FAIL'}: {title} ({detail})")
        assert ok, detail

    return emit


def toy_config():
    return load_config(TOY)


def median_test_accuracy(cfg, tmp_path, tag):
    accs = []
    for k in range(SEEDS):
        cell = cfg.replace(seed=cli.repeat_seed(cfg.seed, k))
        summary = cli.run_experiment(cell, tmp_path / f"{tag}_{k}")
        accs.append(summary["final"]["test_accuracy"])
    return float(np.median(accs)), accs


# --- 1 --------------------------------------------------------------------------------

def random_circuit(rng):
    n = int(rng.integers(1, 5))
    layers = int(rng.integers(1, 4))
    kind = rng.integers(3) if n > 1 else 0
    if kind == 0:
        return build_modality_pqc(n, layers)
    if kind == 1:
        cut = int(rng.integers(1, n))
        return build_fusion_circuit([cut, n - cut], layers)
    gates, slot = [], 0
    for _ in range(layers * 4 * n):
        if rng.random() < 0.25:
            c, t = rng.choice(n, 2, replace=False)
            gates.append(GateOp(GateKind.CNOT, (int(c), int(t))))
        else:
            kind = (GateKind.RX, GateKind.RY, GateKind.RZ)[rng.integers(3)]
            gates.append(GateOp(kind, (int(rng.integers(n)),), slot))
            slot += 1
    return ParamCircuit(n, gates, slot)


def test_c1_oracle_equivalence(report):
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst = 0.0
    trials = 300
    for _ in range(trials):
        c = random_circuit(rng)
        params = rng.uniform(-2 * np.pi, 2 * np.pi, c.num_params)
        init = rng.standard_normal(1 << c.num_qubits) + 1j * rng.standard_normal(1 << c.num_qubits)
        init /= np.linalg.norm(init)
        out = simulate(c, params, StateVector(c.num_qubits, init)).amps
        worst = max(worst, float(np.max(np.abs(out - oracles.circuit_unitary(c, params) @ init))))
    dt = time.perf_counter() - t0
    report(1, "statevector vs dense oracle", worst < 1e-10 and dt < 30,
           f"{trials} circuits, max diff {worst:.2e}, {dt:.1f}s")


# --- 2 --------------------------------------------------------------------------------

def test_c2_gradient_check(report):
    rng = np.random.default_rng(202)
    t0 = time.perf_counter()
    h = 1e-4
    worst = 0.0
    configs = 100
    for _ in range(configs):
        m = MultimodalModel(TWO_BY_TWO, 3, 1)
        m.params = rng.uniform(-np.pi, np.pi, m.num_params)
        b = int(rng.integers(1, 5))
        feats = [rng.standard_normal((b, 4)) for _ in range(2)]
        ctx = rng.integers(0, 2, (b, 2))
        ctx[ctx.sum(axis=1) == 0, 0] = 1
        labels = rng.integers(0, 3, b)

        def loss(p):
            logits, _ = forward_batch(m, feats, ctx, params=p)
            return float(cross_entropy(logits, labels).mean())

        _, grad, _ = loss_and_grad(m, m.params, feats, ctx, labels)
        for k in range(m.num_params):
            e = np.zeros(m.num_params)
            e[k] = h
            fd = (loss(m.params + e) - loss(m.params - e)) / (2 * h)
            worst = max(worst, abs(fd - grad[k]))
    dt = time.perf_counter() - t0
    report(2, "parameter-shift gradient vs central differences", worst < 1e-6 and dt < 120,
           f"{configs} models, max diff {worst:.2e}, {dt:.1f}s")


# --- 3 --------------------------------------------------------------------------------

def test_c3_norm_and_inverse(report):
    rng = np.random.default_rng(303)
    kinds = (GateKind.RX, GateKind.RY, GateKind.RZ, GateKind.CNOT)
    worst_norm = worst_inv = 0.0
    applications = 10 ** 4
    n = 5
    amps = rng.standard_normal(1 << n) + 1j * rng.standard_normal(1 << n)
    state = StateVector(n, amps / np.linalg.norm(amps))
    for i in range(applications):
        kind = kinds[rng.integers(4)]
        if kind is GateKind.CNOT:
            c, t = rng.choice(n, 2, replace=False)
            gate, theta, inverse = GateOp(kind, (int(c), int(t))), (), ()
        else:
            gate = GateOp(kind, (int(rng.integers(n)),), 0)
            a = rng.uniform(-4 * np.pi, 4 * np.pi)
            theta, inverse = (a,), (-a,)
        nxt = apply_gate(state, gate, theta)
        worst_norm = max(worst_norm, abs(nxt.norm_sq() - 1.0))
        back = apply_gate(nxt, gate, inverse)
        worst_inv = max(worst_inv, float(np.max(np.abs(back.amps - state.amps))))
        state = nxt
        if i % 500 == 499:
            # restart from a fresh random state so drift does not accumulate across the run
            amps = rng.standard_normal(1 << n) + 1j * rng.standard_normal(1 << n)
            state = StateVector(n, amps / np.linalg.norm(amps))
    report(3, "norm preservation and gate inverse", worst_norm < 1e-10 and worst_inv < 1e-10,
           f"{applications} gates, norm drift {worst_norm:.1e}, inverse error {worst_inv:.1e}")


# --- 4 --------------------------------------------------------------------------------

def test_c4_aggregation_algebra(report):
    rng = np.random.default_rng(404)
    worst = 0.0
    trials = 2000
    for _ in range(trials):
        k = int(rng.integers(1, 9))
        dim = int(rng.integers(1, 40))
        vecs = [rng.uniform(-np.pi, np.pi, dim) for _ in range(k)]
        sizes = rng.integers(1, 5000, k)
        w = aggregation_weights(sizes)
        worst = max(worst, abs(w.sum() - 1.0))
        same = int(rng.integers(1, 100))
        worst = max(worst, float(np.max(np.abs(aggregate([(v, same) for v in vecs]) - np.mean(vecs, axis=0)))))
        worst = max(worst, float(np.max(np.abs(aggregate([(vecs[0], sizes[0])]) - vecs[0]))))
        a, b = rng.uniform(-3, 3, 2)
        other = [rng.uniform(-np.pi, np.pi, dim) for _ in range(k)]
        lhs = aggregate([(a * v + b * u, s) for v, u, s in zip(vecs, other, sizes)])
        rhs = a * aggregate(list(zip(vecs, sizes))) + b * aggregate(list(zip(other, sizes)))
        worst = max(worst, float(np.max(np.abs(lhs - rhs))))
    report(4, "aggregation algebra", worst <= 1e-12, f"{trials} trials, max deviation {worst:.1e}")


# --- 5 --------------------------------------------------------------------------------

def test_c5_mma_isolation(report):
    rng = np.random.default_rng(505)
    layouts = [
        TWO_BY_TWO,
        [ModalitySpec("a", 2, 1), ModalitySpec("b", 3, 2)],
        [ModalitySpec("a", 5, 2), ModalitySpec("b", 2, 1), ModalitySpec("c", 4, 2)],
    ]
    trials = 1000
    bad = 0
    for t in range(trials):
        specs = layouts[t % len(layouts)]
        m = MultimodalModel(specs, 3, int(rng.integers(1, 3)))
        m.params = rng.uniform(-np.pi, np.pi, m.num_params)
        missing = int(rng.integers(len(specs)))
        ctx = rng.integers(0, 2, (1, len(specs)))
        ctx[0, missing] = 0
        if ctx.sum() == 0:
            ctx[0, (missing + 1) % len(specs)] = 1
        feats = [rng.standard_normal((1, s.input_dim)) for s in specs]
        label = rng.integers(0, 3, 1)
        garbled = [f.copy() for f in feats]
        scale = 10.0 ** rng.uniform(-3, 3)
        garbled[missing] = rng.standard_normal(feats[missing].shape) * scale
        out0 = forward_batch(m, feats, ctx)[0]
        out1 = forward_batch(m, garbled, ctx)[0]
        _, g0, _ = loss_and_grad(m, m.params, feats, ctx, label)
        _, g1, _ = loss_and_grad(m, m.params, garbled, ctx, label)
        sl = m.modality_slots(missing)
        if out0.tobytes() != out1.tobytes() or g0[sl].tobytes() != g1[sl].tobytes() or g0.tobytes() != g1.tobytes():
            bad += 1
    report(5, "MMA isolation of forward output and modality gradient", bad == 0,
           f"{trials} trials, {bad} bitwise mismatches")


# --- 6 --------------------------------------------------------------------------------

def test_c6_centralized_equivalence(report):
    cases = [(1, 1, "adam", 0.05), (3, 2, "adam", 0.05), (4, 1, "sgd", 0.1), (2, 3, "adam", 0.01)]
    mismatched = []
    for i, (R, E, kind, lr) in enumerate(cases):
        data = gen_synthetic(48, TWO_BY_TWO, 3, 3.0, 0.5, seed=i)
        m = MultimodalModel(TWO_BY_TWO, 3, 1)
        m.init_params(i)
        settings = FederationSettings(rounds=R, local_epochs=E, optimizer=kind, learning_rate=lr, seed=i)
        fed, _ = run_federation(m.copy(), [data], data, settings)
        central, _ = mdl.local_train(m.copy(), data, R * E, OptimizerState(kind, lr))
        if fed.params.tobytes() != central.tobytes():
            mismatched.append((R, E, kind))
    report(6, "N=1 federation equals centralized training", not mismatched,
           f"{len(cases)} (R, E, optimizer) cases, mismatched: {mismatched or 'none'}")


# --- 7 --------------------------------------------------------------------------------

def test_c7_multimodal_benefit(report, tmp_path):
    cfg = toy_config()
    t0 = time.perf_counter()
    fused, _ = median_test_accuracy(cfg, tmp_path, "fused")
    uni = {}
    for m, spec in enumerate(cfg.modalities):
        uni[spec.name], _ = median_test_accuracy(cfg.replace(**{"data.use_modalities": [m]}), tmp_path, spec.name)
    best = max(uni.values())
    dt = time.perf_counter() - t0
    report(7, "fused beats best unimodal by >= 3 pp", fused - best >= 0.03 and dt < 900,
           f"fused {fused:.3f} vs unimodal {uni}, margin {100 * (fused - best):.1f} pp, {dt:.0f}s")


# --- 8 --------------------------------------------------------------------------------

def test_c8_mma_benefit(report, tmp_path):
    cfg = toy_config().replace(**{"missing.fractions": [0.2, 0.0], "missing.garbage": "gaussian_noise"})
    t0 = time.perf_counter()
    on, _ = median_test_accuracy(cfg, tmp_path, "mma")
    off, _ = median_test_accuracy(cfg.replace(mma=False), tmp_path, "nomma")
    dt = time.perf_counter() - t0
    report(8, "MMA beats no-MMA by >= 5 pp at 20% missing", on - off >= 0.05 and dt < 1200,
           f"MMA {on:.3f} vs no-MMA {off:.3f}, margin {100 * (on - off):.1f} pp, {dt:.0f}s")


# --- 9 --------------------------------------------------------------------------------

def test_c9_monotone_axes(report, tmp_path):
    cfg = toy_config()
    rows, _ = cli.sweep(cfg, "data_fraction", [0.25, 0.5, 1.0], SEEDS, tmp_path)
    by_size = cli.median_by_value(rows)
    sizes = [by_size[v] for v in ("0.25", "0.5", "1.0")]
    rows, _ = cli.sweep(cfg.replace(mma=False), "missing_fraction", [0.0, 0.1, 0.2], SEEDS, tmp_path)
    by_missing = cli.median_by_value(rows)
    missing = [by_missing[v] for v in ("0.0", "0.1", "0.2")]
    ok = all(a <= b for a, b in zip(sizes, sizes[1:])) and all(a >= b for a, b in zip(missing, missing[1:]))
    report(9, "monotone data-fraction and missing-fraction sweeps", ok,
           f"data 25/50/100%: {np.round(sizes, 3).tolist()}, missing 0/10/20% (no MMA): {np.round(missing, 3).tolist()}")


# --- 10 -------------------------------------------------------------------------------

def test_c10_determinism(report, tmp_path):
    raw = json.loads(TOY.read_text())
    raw["federation"]["rounds"] = 5
    raw["missing"]["fractions"] = [0.2, 0.0]
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(raw))
    codes = [cli.main(["run", str(path), "--output-dir", str(tmp_path / d)]) for d in ("a", "b")]
    first = (tmp_path / "a" / "metrics.csv").read_bytes()
    second = (tmp_path / "b" / "metrics.csv").read_bytes()
    report(10, "byte-identical metrics CSV across runs", codes == [0, 0] and first == second,
           f"exit codes {codes}, {len(first)} bytes, identical={first == second}")
