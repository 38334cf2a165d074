"""Evaluation metrics: earth mover's distance on the dictionary, angular errors,
crossing-angle heatmaps and method summaries."""

from __future__ import annotations

import csv
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import breadth_first_order

from dwfiber.multitensor import REFERENCE_LAMBDAS, FiberConfig, add_rician_noise, multi_tensor_signals
from dwfiber.protocol import AcquisitionProtocol
from dwfiber.sphere import Peaks, SphereDictionary, encode_labels, extract_peaks
from dwfiber.synth import random_rotation

PRUNE = 1e-12
_REDUCED_COST_TOL = 1e-10


class TransportError(RuntimeError):
    pass


def _normalize_mass(p, name: str) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ValueError(f"{name} must be finite and non-negative")
    total = p.sum()
    if not total > 0:
        raise ValueError(f"{name} has zero total mass")
    return p / total


def _initial_basis(supply, demand, cost):
    """Least-cost greedy start; every allocation retires exactly one row or column.

    That rule yields ns + nd - 1 basic cells forming a spanning tree, with
    degenerate zero allocations where needed.
    """
    ns, nd = cost.shape
    ra, rb = supply.copy(), demand.copy()
    row_alive = np.ones(ns, bool)
    col_alive = np.ones(nd, bool)
    n_rows, n_cols = ns, nd
    basis, flow = [], []
    for flat in np.argsort(cost, axis=None, kind="stable"):
        i, j = divmod(int(flat), nd)
        if not (row_alive[i] and col_alive[j]):
            continue
        x = min(ra[i], rb[j])
        basis.append((i, j))
        flow.append(x)
        ra[i] -= x
        rb[j] -= x
        if n_rows == 1 and n_cols == 1:
            break
        if n_cols == 1 or (n_rows > 1 and ra[i] <= rb[j]):
            row_alive[i] = False
            n_rows -= 1
            rb[j] += ra[i]  # push round-off left on the row into the column
            ra[i] = 0.0
        else:
            col_alive[j] = False
            n_cols -= 1
            ra[i] += rb[j]
            rb[j] = 0.0
    return basis, np.array(flow)


def _spanning_tree(bi, bj, ns, nd):
    """BFS order and predecessors of the basis tree rooted at row 0.

    Nodes 0..ns-1 are rows and ns..ns+nd-1 columns.
    """
    graph = coo_matrix((np.ones(bi.size), (bi, ns + bj)), shape=(ns + nd, ns + nd)).tocsr()
    order, pred = breadth_first_order(graph, 0, directed=False, return_predecessors=True)
    if order.size != ns + nd:
        raise TransportError("basis is not a spanning tree")
    return order, pred


def _potentials(order, pred, cost, ns):
    """u_i + v_j = c_ij on every basic cell, with u_0 = 0."""
    pot = [0.0] * pred.size
    pred_l = pred.tolist()
    for node in order[1:].tolist():
        parent = pred_l[node]
        c = cost[parent, node - ns] if node >= ns else cost[node, parent - ns]
        pot[node] = c - pot[parent]
    pot = np.array(pot)
    return pot[:ns], pot[ns:]


def _cycle(pred, slot, ns, start, goal):
    """Basis slots on the tree path from ``start`` to ``goal``, in path order.

    ``slot[i, j]`` is the basis slot holding cell (i, j).
    """
    up_start = [start]
    while pred[up_start[-1]] >= 0:
        up_start.append(pred[up_start[-1]])
    depth = {node: d for d, node in enumerate(up_start)}
    up_goal = [goal]
    while up_goal[-1] not in depth:
        up_goal.append(pred[up_goal[-1]])
    nodes = up_start[: depth[up_goal[-1]] + 1] + up_goal[-2::-1]
    return [int(slot[a, b - ns] if a < ns else slot[b, a - ns]) for a, b in zip(nodes[:-1], nodes[1:])]


def transport(supply, demand, cost, max_pivots: int | None = None):
    """Exact balanced transportation problem by the MODI simplex method.

    Returns (total cost, flow matrix).  ``supply`` and ``demand`` must have
    equal totals (up to round-off).
    """
    supply = np.asarray(supply, dtype=np.float64)
    demand = np.asarray(demand, dtype=np.float64)
    cost = np.asarray(cost, dtype=np.float64)
    ns, nd = cost.shape
    if supply.shape != (ns,) or demand.shape != (nd,):
        raise ValueError("cost shape does not match supply/demand")
    if abs(supply.sum() - demand.sum()) > 1e-9 * max(1.0, supply.sum()):
        raise ValueError("unbalanced transportation problem")
    basis, flow = _initial_basis(supply, demand, cost)
    bi = np.array([c[0] for c in basis], dtype=np.int64)
    bj = np.array([c[1] for c in basis], dtype=np.int64)
    slot = np.full((ns, nd), -1, dtype=np.int64)
    slot[bi, bj] = np.arange(bi.size)
    max_pivots = max_pivots or 50 * (ns + nd) + 100
    scale = max(1.0, float(np.abs(cost).max()))
    for _ in range(max_pivots):
        order, pred = _spanning_tree(bi, bj, ns, nd)
        u, v = _potentials(order, pred, cost, ns)
        reduced = cost - u[:, None] - v[None, :]
        flat = int(np.argmin(reduced))
        if reduced.flat[flat] >= -_REDUCED_COST_TOL * scale:
            break
        i, j = divmod(flat, nd)
        path = _cycle(pred, slot, ns, ns + j, i)  # column j ... row i; closes the cycle with (i, j)
        minus = path[0::2]
        plus = path[1::2]
        k_out = minus[int(np.argmin(flow[minus]))]
        theta = flow[k_out]
        flow[minus] -= theta
        flow[plus] += theta
        flow[k_out] = theta  # the leaving slot now holds the entering cell
        slot[bi[k_out], bj[k_out]] = -1
        bi[k_out], bj[k_out] = i, j
        slot[i, j] = k_out
    else:
        raise TransportError(f"no optimum after {max_pivots} pivots")
    plan = np.zeros((ns, nd))
    np.add.at(plan, (bi, bj), flow)
    return float(np.sum(plan * cost)), plan


def axial_cost_degrees(dirs_a, dirs_b) -> np.ndarray:
    dots = np.abs(np.asarray(dirs_a) @ np.asarray(dirs_b).T)
    return np.rad2deg(np.arccos(np.minimum(1.0, dots)))


def emd(dictionary: SphereDictionary, p, q) -> float:
    """Earth mover's distance (degrees) between two coefficient vectors on the dictionary.

    Both inputs are L1-normalized first.  Mass shared by the two vectors on
    the same atom costs nothing and is removed before solving, which is
    exact because the axial angle is a metric.
    """
    p = _normalize_mass(p, "p")
    q = _normalize_mass(q, "q")
    if p.shape != (dictionary.m,) or q.shape != (dictionary.m,):
        raise ValueError(f"coefficient vectors must have length {dictionary.m}")
    p = np.where(p > PRUNE, p, 0.0)
    q = np.where(q > PRUNE, q, 0.0)
    common = np.minimum(p, q)
    p, q = p - common, q - common
    sp, sq = np.flatnonzero(p > PRUNE), np.flatnonzero(q > PRUNE)
    if sp.size == 0 or sq.size == 0:
        return 0.0
    a, b = p[sp], q[sq]
    # pruning can leave the two sides a hair apart; balance on the larger side
    if a.sum() > b.sum():
        a = a * (b.sum() / a.sum())
    else:
        b = b * (a.sum() / b.sum())
    cost = np.rad2deg(dictionary.angle_matrix[np.ix_(sp, sq)])
    value, _ = transport(a, b, cost)
    return value


@dataclass
class AngularError:
    errors: list  # degrees, one per matched truth
    missed: int
    spurious: int
    pairs: list = field(default_factory=list)  # (truth index, peak index)

    @property
    def worst(self) -> float:
        """Largest matched error, or inf when a fiber was missed."""
        if self.missed:
            return float("inf")
        return max(self.errors, default=0.0)


def angular_error(truth: FiberConfig, peaks) -> AngularError:
    """Best assignment of estimated peaks to true fibers by total axial angle."""
    dirs = peaks.directions if isinstance(peaks, Peaks) else np.asarray(peaks, dtype=np.float64).reshape(-1, 3)
    t, k = truth.t, dirs.shape[0]
    if k == 0:
        return AngularError([], t, 0)
    ang = axial_cost_degrees(truth.pdds, dirs)
    r = min(t, k)
    best, best_pairs = np.inf, []
    for rows in itertools.combinations(range(t), r):
        for cols in itertools.permutations(range(k), r):
            total = sum(ang[i, j] for i, j in zip(rows, cols))
            if total < best - 1e-12:
                best, best_pairs = total, list(zip(rows, cols))
    return AngularError([float(ang[i, j]) for i, j in best_pairs], t - r, k - r, best_pairs)


def crossing_test_set(proto: AcquisitionProtocol, count: int, rng: np.random.Generator,
                      angle_range=(60.0, 90.0), alphas=(0.5, 0.5), snr: float = 30.0,
                      lambdas=REFERENCE_LAMBDAS):
    """Two-fiber test voxels with a crossing angle drawn uniformly from ``angle_range`` (degrees).

    Each voxel gets its own random rotation.  Returns (signals (count, n), truths).
    """
    alphas = np.asarray(alphas, dtype=np.float64)
    signals = np.empty((count, proto.n))
    truths = []
    for v in range(count):
        ang = np.deg2rad(rng.uniform(*angle_range))
        pdds = np.array([[1.0, 0.0, 0.0], [np.cos(ang), np.sin(ang), 0.0]]) @ random_rotation(rng).T
        signals[v] = add_rician_noise(multi_tensor_signals(proto, alphas, pdds, lambdas), snr, rng)
        truths.append(FiberConfig(alphas, pdds))
    return signals, truths


# -- crossing heatmaps ---------------------------------------------------------

@dataclass
class HeatmapConfig:
    theta1: tuple = tuple(range(0, 91, 5))  # degrees between first and second fiber
    theta_plane: tuple = tuple(range(0, 91, 5))  # degrees of the third fiber out of that plane
    alphas: tuple = (1 / 3, 1 / 3, 1 / 3)
    snr: float = 30.0
    k_noise: int = 25
    lambdas: tuple = REFERENCE_LAMBDAS
    seed: int = 0

    def __post_init__(self):
        if not self.theta1 or not self.theta_plane:
            raise ValueError("heatmap axes need at least one step each")
        if self.k_noise < 1:
            raise ValueError("k_noise must be >= 1")


def crossing_directions(theta1_deg: float, theta_plane_deg: float) -> np.ndarray:
    """Three unit axes: d1 = x, d2 at theta1 in the xy plane, d3 at theta_plane above it.

    d3's in-plane component is perpendicular to the bisector of d1 and d2.
    """
    t1, tp = np.deg2rad(theta1_deg), np.deg2rad(theta_plane_deg)
    d1 = np.array([1.0, 0.0, 0.0])
    d2 = np.array([np.cos(t1), np.sin(t1), 0.0])
    phi = t1 / 2 + np.pi / 2
    d3 = np.array([np.cos(tp) * np.cos(phi), np.cos(tp) * np.sin(phi), np.sin(tp)])
    return np.stack([d1, d2, d3])


def cell_samples(proto: AcquisitionProtocol, dictionary: SphereDictionary, cfg: HeatmapConfig,
                 theta1_deg: float, theta_plane_deg: float, rng: np.random.Generator):
    """Noisy signals (k_noise, n) and their encoded ground-truth labels (k_noise, m).

    Each realization applies its own uniformly random rotation to the cell geometry.
    """
    base = crossing_directions(theta1_deg, theta_plane_deg)
    alphas = np.asarray(cfg.alphas, dtype=np.float64)
    weights = dictionary.weights()
    signals = np.empty((cfg.k_noise, proto.n))
    labels = np.empty((cfg.k_noise, dictionary.m))
    for r in range(cfg.k_noise):
        pdds = base[: alphas.size] @ random_rotation(rng).T
        clean = multi_tensor_signals(proto, alphas, pdds, cfg.lambdas)
        signals[r] = add_rician_noise(clean, cfg.snr, rng)
        labels[r] = encode_labels(dictionary, weights, FiberConfig(alphas, pdds))
    return signals, labels


@dataclass
class HeatmapGrid:
    theta1: np.ndarray
    theta_plane: np.ndarray
    mean: np.ndarray  # (len(theta1), len(theta_plane))
    std: np.ndarray
    meta: dict

    def write_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            for key in sorted(self.meta):
                fh.write(f"# {key}: {json.dumps(self.meta[key])}\n")
            w = csv.writer(fh)
            w.writerow(["theta1_deg", "theta_plane_deg", "mean_emd_deg", "std_emd_deg"])
            for a, t1 in enumerate(self.theta1):
                for b, tp in enumerate(self.theta_plane):
                    w.writerow([f"{t1:g}", f"{tp:g}", f"{self.mean[a, b]:.6f}", f"{self.std[a, b]:.6f}"])
        return path


def heatmap(predictor, proto: AcquisitionProtocol, dictionary: SphereDictionary,
            cfg: HeatmapConfig | None = None) -> HeatmapGrid:
    """Mean and std of the EMD between predictions and encoded truth on a crossing-angle grid.

    ``predictor`` maps signals (k, n) to coefficients (k, m).  Cell (a, b)
    draws its noise from a generator seeded with (cfg.seed, a, b).
    """
    cfg = cfg or HeatmapConfig()
    t1 = np.asarray(cfg.theta1, dtype=np.float64)
    tp = np.asarray(cfg.theta_plane, dtype=np.float64)
    mean = np.zeros((t1.size, tp.size))
    std = np.zeros_like(mean)
    for a, b in itertools.product(range(t1.size), range(tp.size)):
        rng = np.random.default_rng([cfg.seed, a, b])
        signals, labels = cell_samples(proto, dictionary, cfg, t1[a], tp[b], rng)
        pred = np.asarray(predictor(signals), dtype=np.float64)
        vals = np.array([emd(dictionary, np.maximum(p, 0.0), q) if np.any(p > 0) else 90.0
                         for p, q in zip(pred, labels)])
        mean[a, b], std[a, b] = vals.mean(), vals.std()
    meta = {
        "alphas": list(cfg.alphas),
        "snr": cfg.snr,
        "k_noise": cfg.k_noise,
        "seed": cfg.seed,
        "lambdas": list(cfg.lambdas),
        "geometry": "d1=x; d2 at theta1 in xy; d3 at theta_plane out of plane, in-plane part "
                    "perpendicular to the d1/d2 bisector; random rotation per realization",
        "empty_prediction_emd": 90.0,
        "note": "axis ranges, alphas and snr are reconstruction choices",
    }
    return HeatmapGrid(t1, tp, mean, std, meta)


# -- summaries -----------------------------------------------------------------

SUCCESS_THRESHOLDS = (10.0, 15.0, 20.0)


@dataclass
class MetricRecord:
    method: str
    emd: np.ndarray  # per voxel, degrees
    worst_error: np.ndarray  # per voxel, degrees (inf when a fiber was missed)
    matched_errors: np.ndarray  # all matched angles pooled
    missed: int
    spurious: int
    seconds: float


def evaluate_predictions(dictionary: SphereDictionary, truths, coeffs, method: str,
                         seconds: float = float("nan"), top_k: int | None = None) -> MetricRecord:
    """EMD against encoded truth and peak angular errors for each test voxel.

    ``top_k`` keeps only the strongest k peaks (e.g. 2 for two-fiber test sets).
    """
    weights = dictionary.weights()
    emds, worst, pooled = [], [], []
    missed = spurious = 0
    for truth, c in zip(truths, np.asarray(coeffs, dtype=np.float64)):
        c = np.maximum(c, 0.0)
        label = encode_labels(dictionary, weights, truth)
        emds.append(emd(dictionary, c, label) if np.any(c > 0) else 90.0)
        peaks = extract_peaks(dictionary, c)
        if top_k is not None and len(peaks) > top_k:
            order = np.argsort(-peaks.weights, kind="stable")[:top_k]
            peaks = Peaks(peaks.indices[order], peaks.directions[order], peaks.weights[order], peaks.degenerate)
        err = angular_error(truth, peaks)
        worst.append(err.worst)
        pooled.extend(err.errors)
        missed += err.missed
        spurious += err.spurious
    return MetricRecord(method, np.array(emds), np.array(worst), np.array(pooled), missed, spurious, seconds)


SUMMARY_COLUMNS = (
    ["method", "voxels", "emd_mean", "emd_median", "angle_q25", "angle_median", "angle_q75", "angle_q95"]
    + [f"success_{t:g}" for t in SUCCESS_THRESHOLDS]
    + ["missed", "spurious", "seconds", "time_ratio"]
)


def summarize(records) -> list:
    """One row per method; ``time_ratio`` is seconds relative to the fastest method."""
    records = list(records)
    if not records:
        raise ValueError("nothing to summarize")
    times = [r.seconds for r in records if np.isfinite(r.seconds) and r.seconds > 0]
    fastest = min(times) if times else float("nan")
    rows = []
    for r in records:
        q = (np.quantile(r.matched_errors, [0.25, 0.5, 0.75, 0.95]) if r.matched_errors.size
             else np.full(4, np.nan))
        row = {
            "method": r.method,
            "voxels": int(r.emd.size),
            "emd_mean": float(np.mean(r.emd)),
            "emd_median": float(np.median(r.emd)),
            "angle_q25": float(q[0]),
            "angle_median": float(q[1]),
            "angle_q75": float(q[2]),
            "angle_q95": float(q[3]),
        }
        for t in SUCCESS_THRESHOLDS:
            row[f"success_{t:g}"] = float(np.mean(r.worst_error <= t))
        row.update(missed=r.missed, spurious=r.spurious, seconds=float(r.seconds),
                   time_ratio=float(r.seconds / fastest) if np.isfinite(fastest) else float("nan"))
        rows.append(row)
    return rows


def write_summary(rows, csv_path=None, json_path=None) -> None:
    if csv_path is not None:
        with Path(csv_path).open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS)
            w.writeheader()
            for row in rows:
                w.writerow(row)
    if json_path is not None:
        Path(json_path).write_text(json.dumps(rows, indent=2))
