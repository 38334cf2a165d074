"""End-to-end acceptance criteria, one test per criterion.

Each test prints an ``ACCEPTANCE n: PASS|FAIL`` line; the lines are
repeated in the pytest terminal summary.  Criteria 6, 7 and 9 train
networks or process a full-size volume and take minutes each.
"""

import gc
import itertools
import time

import numpy as np
import pytest
from scipy.optimize import linprog

from dwfiber.evaluation import crossing_test_set, emd, evaluate_predictions
from dwfiber.inference import predict_neighborhood, predict_voxelwise
from dwfiber.mlp import (
    VOXEL_TRAIN,
    TrainConfig,
    detect_plateau,
    forward,
    gradient_check,
    hyperparameter_grid,
    init_model,
    neighborhood_layer_dims,
    sweep,
    train,
    voxel_layer_dims,
    write_sweep_csv,
)
from dwfiber.multitensor import REFERENCE_LAMBDAS, TensorSpec, single_tensor_signal
from dwfiber.nnls import build_signal_dictionary, gram_inf_norm, nnls_solve, predict_nnls
from dwfiber.plotting import plot_loss_curves
from dwfiber.protocol import AcquisitionProtocol, normalize_signals, synthetic_protocol
from dwfiber.sphere import build_dictionary
from dwfiber.synth import SynthConfig, flatten_patches, generate_dataset, synthetic_volume
from dwfiber.volume import Volume4D

slow = pytest.mark.slow


def test_1_forward_model_exactness(acceptance):
    proto = AcquisitionProtocol([[1.0, 0.0, 0.0]], [1000.0])
    s = single_tensor_signal(proto, TensorSpec(REFERENCE_LAMBDAS, [1.0, 0.0, 0.0]))[0]
    err = abs(s - np.exp(-1.4))
    acceptance(1, err <= 1e-12, f"S = {s:.15f}, |S - exp(-1.4)| = {err:.2e} (tol 1e-12)")


def test_2_gradient_fidelity(acceptance):
    rng = np.random.default_rng(2024)
    hidden = ("relu", "tanh", "sigmoid")
    outputs = ("sigmoid", "tanh", "linear", "relu")
    worst = 0.0
    combos = []
    for c in range(20):
        hid, out, loss = hidden[c % 3], outputs[c % 4], ("mse", "mae")[(c // 4) % 2]
        dims = [int(rng.integers(2, 7))] + [int(rng.integers(2, 8)) for _ in range(int(rng.integers(1, 4)))]
        dims.append(int(rng.integers(1, 5)))
        model = init_model(dims, hid, out, dropout=(0.0, 0.3)[c % 2], seed=c, dtype=np.float64)
        for b in model.biases:
            b += rng.uniform(-0.1, 0.1, b.shape)  # keep relu units off their kink
        x = rng.normal(size=(int(rng.integers(1, 6)), dims[0]))
        y = rng.uniform(size=(x.shape[0], dims[-1]))
        err = gradient_check(model, x, y, loss, h=1e-5)
        worst = max(worst, err)
        combos.append((hid, out, loss))
    assert len(set(combos)) > 10
    acceptance(2, worst < 1e-5, f"max relative error {worst:.2e} over 20 combinations (tol 1e-5)")


def test_3_nnls_optimality(acceptance, stanford_protocol, dictionary):
    rng = np.random.default_rng(3)
    worst_ratio, capped = 0.0, 0
    for k in range(1000):
        A = rng.uniform(size=(30, 100)) if k % 2 else rng.normal(size=(30, 100))
        s = rng.uniform(size=30) if k % 2 else rng.normal(size=30)
        x, info = nnls_solve(A, s, full_output=True)
        capped += info.capped
        w = A.T @ (s - A @ x)
        # dual feasibility off the support, stationarity on it, primal feasibility
        resid = max(np.max(w[x == 0], initial=0.0), np.max(np.abs(w[x > 0]), initial=0.0),
                    np.max(-x, initial=0.0))
        worst_ratio = max(worst_ratio, resid / gram_inf_norm(A))
    kkt_ok = worst_ratio <= 1e-10 and capped == 0

    proto = stanford_protocol.weighted()
    sig = build_signal_dictionary(proto, dictionary)
    recovered, tried = 0, 0
    while tried < 200:
        i, j = rng.choice(dictionary.m, 2, replace=False)
        if np.rad2deg(dictionary.angle_matrix[i, j]) < 30:
            continue
        tried += 1
        a = rng.uniform(0.1, 0.9)
        x = nnls_solve(sig.atoms, a * sig.atoms[:, i] + (1 - a) * sig.atoms[:, j])
        recovered += set(np.flatnonzero(x > 0)) == {i, j}
    ok = kkt_ok and recovered == tried
    acceptance(3, ok, f"max KKT residual / ||A^T A||_inf = {worst_ratio:.2e} (tol 1e-10), capped {capped}; "
                      f"exact 2-atom support {recovered}/{tried}")


def _lp_transport(a, b, cost):
    ns, nd = cost.shape
    rows = np.zeros((ns + nd, ns * nd))
    for i in range(ns):
        rows[i, i * nd : (i + 1) * nd] = 1
    for j in range(nd):
        rows[ns + j, j::nd] = 1
    res = linprog(cost.ravel(), A_eq=rows, b_eq=np.concatenate([a, b]), bounds=(0, None), method="highs")
    assert res.status == 0
    return res.fun


def _brute_transport(a, b, cost):
    ns, nd = cost.shape
    cells = list(itertools.product(range(ns), range(nd)))
    A = np.zeros((ns + nd, len(cells)))
    for k, (i, j) in enumerate(cells):
        A[i, k] = A[ns + j, k] = 1
    rhs = np.concatenate([a, b])
    best = np.inf
    for basis in itertools.combinations(range(len(cells)), ns + nd - 1):
        sub = A[:, basis]
        if np.linalg.matrix_rank(sub) < ns + nd - 1:
            continue
        x = np.linalg.lstsq(sub, rhs, rcond=None)[0]
        if np.all(x >= -1e-12) and np.allclose(sub @ x, rhs, atol=1e-12):
            best = min(best, float(sum(cost[cells[c]] * v for c, v in zip(basis, x))))
    return best


def _full_lp_emd(dictionary, p, q):
    """Reference value: the whole transportation LP on the union of both supports."""
    p, q = p / p.sum(), q / q.sum()
    sp, sq = np.flatnonzero(p), np.flatnonzero(q)
    cost = np.rad2deg(dictionary.angle_matrix[np.ix_(sp, sq)])
    if sp.size * sq.size <= 12:
        return _brute_transport(p[sp], q[sq], cost)
    return _lp_transport(p[sp], q[sq], cost)


def _random_mass(rng, m, max_atoms):
    p = np.zeros(m)
    idx = rng.choice(m, int(rng.integers(1, max_atoms + 1)), replace=False)
    p[idx] = rng.uniform(0.05, 1.0, idx.size)
    return p


def test_4_emd_exactness(acceptance, dictionary):
    rng = np.random.default_rng(4)
    m = dictionary.m
    worst = 0.0
    for k in range(100):
        # every fourth instance shares atoms between p and q
        p = _random_mass(rng, m, 5)
        q = _random_mass(rng, m, 5)
        if k % 4 == 0:
            q[np.flatnonzero(p)[0]] = rng.uniform(0.05, 1.0)
        worst = max(worst, abs(emd(dictionary, p, q) - _full_lp_emd(dictionary, p, q)))
    violations = []
    for _ in range(1000):
        p, q, r = (_random_mass(rng, m, 5) for _ in range(3))
        pq, qp, qr, pr = emd(dictionary, p, q), emd(dictionary, q, p), emd(dictionary, q, r), emd(dictionary, p, r)
        if min(pq, qr, pr) < 0 or abs(pq - qp) > 1e-9 or pr > pq + qr + 1e-9 or emd(dictionary, p, p) != 0:
            violations.append((pq, qp, qr, pr))
        pn, qn = p / p.sum(), q / q.sum()
        if not np.allclose(pn, qn) and pq <= 0:
            violations.append(("indiscernibles", pq))
    ok = worst <= 1e-9 and not violations
    acceptance(4, ok, f"max |EMD - LP| = {worst:.2e} on 100 instances (tol 1e-9); "
                      f"axiom violations {len(violations)}/1000 triples")


def _naive_neighborhood(model, data):
    X, Y, Z, _ = data.shape
    padded = np.pad(data, ((1, 1), (1, 1), (1, 1), (0, 0)))
    out = np.zeros((X, Y, Z, model.layer_dims[-1]), dtype=np.float32)
    for i, j, k in np.ndindex(X, Y, Z):
        patch = padded[i : i + 3, j : j + 3, k : k + 3][None]
        out[i, j, k] = forward(model, flatten_patches(patch), deterministic=True)[0]
    return out


def test_5_strided_inference_equivalence(acceptance, dictionary):
    n = 150
    rng = np.random.default_rng(5)
    model = init_model(neighborhood_layer_dims(n, dictionary.m), seed=5)
    data = rng.uniform(size=(7, 6, 5, n)).astype(np.float32)
    t0 = time.perf_counter()
    fast, _ = predict_neighborhood(model, Volume4D(data), deterministic=True)
    naive = _naive_neighborhood(model, data)
    seconds = time.perf_counter() - t0
    mismatched = int(np.count_nonzero(fast.data != naive))
    acceptance(5, mismatched == 0 and seconds < 60,
               f"{mismatched} of {naive.size} outputs differ bitwise on (7,6,5,{n}); {seconds:.1f}s")


@slow
def test_6_end_to_end_learning(acceptance, stanford_protocol, dictionary):
    t_start = time.perf_counter()
    proto = stanford_protocol.weighted()
    ds = generate_dataset(proto, dictionary, SynthConfig(count=100_000, master_seed=6))
    # tanh output: the sigmoid head collapses to zero on L1-normalized targets
    model = init_model(voxel_layer_dims(proto.n, dictionary.m), "relu", "tanh", 0.2, seed=6)
    model, hist = train(model, ds.signals, ds.labels, VOXEL_TRAIN)
    del ds
    gc.collect()

    signals, truths = crossing_test_set(proto, 2000, np.random.default_rng(66), (60.0, 90.0), (0.5, 0.5), 30.0)
    mlp_coeffs = np.maximum(forward(model, signals.astype(np.float32)), 0.0)
    mlp = evaluate_predictions(dictionary, truths, mlp_coeffs, "mlp", top_k=2)
    sig = build_signal_dictionary(proto, dictionary)
    nnls_coeffs = np.array([nnls_solve(sig.atoms, s, gram_norm=sig.gram_inf_norm) for s in signals])
    nnls = evaluate_predictions(dictionary, truths, nnls_coeffs, "nnls", top_k=2)

    frac = float(np.mean(mlp.worst_error <= 15.0))
    minutes = (time.perf_counter() - t_start) / 60
    ok = frac >= 0.8 and mlp.emd.mean() < nnls.emd.mean() and minutes <= 45
    acceptance(6, ok, f"top-2 peaks within 15 deg: {frac:.3f} (need >= 0.8); mean EMD mlp "
                      f"{mlp.emd.mean():.2f} vs nnls {nnls.emd.mean():.2f} deg (need mlp < nnls); "
                      f"final val loss {hist.val_loss[-1]:.4g}; {minutes:.1f} min")


@slow
def test_7_speed_ratio(acceptance, dictionary):
    t_start = time.perf_counter()
    proto = synthetic_protocol(150, 2000.0, 10)
    raw, _ = synthetic_volume(proto, (81, 106, 76), np.random.default_rng(7), with_truths=False,
                              dtype=np.float32)
    vol, _, mask = normalize_signals(Volume4D(raw), proto)
    del raw
    gc.collect()
    model = init_model(voxel_layer_dims(150, dictionary.m), "relu", "tanh", 0.2, seed=7)
    coeffs, vox = predict_voxelwise(model, vol, mask)
    del coeffs
    gc.collect()
    sig = build_signal_dictionary(proto.weighted(), dictionary)
    coeffs, base = predict_nnls(vol, sig, mask)
    del coeffs
    ratio = base.seconds / vox.seconds
    minutes = (time.perf_counter() - t_start) / 60
    acceptance(7, ratio >= 10 and minutes <= 60,
               f"voxel model {vox.seconds:.1f}s vs NNLS {base.seconds:.1f}s on {vox.voxels} voxels: "
               f"{ratio:.0f}x (need >= 10x); {minutes:.1f} min total")


def test_8_dictionary_quality(acceptance):
    d = build_dictionary(362, 0)
    max_nn, min_pair = np.rad2deg(d.max_nn_angle), np.rad2deg(d.min_pair_angle)
    # independent recomputation of both angles from the raw directions
    ang = np.rad2deg(np.arccos(np.clip(np.abs(d.directions @ d.directions.T), 0, 1)))
    np.fill_diagonal(ang, np.inf)
    assert abs(ang.min(axis=1).max() - max_nn) < 1e-6 and abs(ang.min() - min_pair) < 1e-6
    acceptance(8, d.m == 362 and max_nn <= 12 and min_pair >= 6,
               f"m={d.m}, max nearest-neighbor angle {max_nn:.2f} deg (<= 12), min pairwise {min_pair:.2f} deg (>= 6)")


@slow
def test_9_sweep(acceptance, stanford_protocol, dictionary, tmp_path):
    t_start = time.perf_counter()
    proto = stanford_protocol.weighted()
    ds = generate_dataset(proto, dictionary, SynthConfig(count=10_000, master_seed=9))
    base = TrainConfig(learning_rate=1e-4, lr_decay=1e-6, epochs=30)
    presets = hyperparameter_grid(base)
    rows, runs = sweep(presets, ds.signals, ds.labels, repeats=5, base_seed=90)
    control = TrainConfig(learning_rate=0.0, lr_decay=1e-6, epochs=30)
    c_rows, c_runs = sweep([type(presets[0])("control-zero-lr", control, "sigmoid")], ds.signals, ds.labels,
                           repeats=1, base_seed=99)
    write_sweep_csv(rows + c_rows, tmp_path / "sweep.csv")
    curves = {}
    for r in runs + c_runs:
        curves.setdefault(r["preset"], []).append(r["history"].val_loss)
    png = plot_loss_curves(curves, tmp_path / "val_loss.png")
    minutes = (time.perf_counter() - t_start) / 60
    complete = (len(runs) == 40 and len({(r["preset"], r["repeat"]) for r in runs}) == 40
                and all(len(r["history"]) == 30 for r in runs) and png.stat().st_size > 0)
    control_flagged = all(r["plateau"] for r in c_runs) and detect_plateau(c_runs[0]["history"].val_loss)
    flagged = sorted({r["preset"] for r in runs if r["plateau"]})
    best = min(runs, key=lambda r: r["final_val_loss"])
    acceptance(9, complete and control_flagged and minutes <= 30,
               f"{len(runs)} runs x 30 epochs done, curves emitted; zero-lr control flagged: {control_flagged}; "
               f"other plateaus: {', '.join(flagged) or 'none'}; best final val loss {best['preset']} "
               f"{best['final_val_loss']:.4g}; {minutes:.1f} min")
