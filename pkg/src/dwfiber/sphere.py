"""Hemisphere direction dictionary, Gaussian label blurring and peak extraction.

Directions are axes: d and -d are the same atom, and every angle in this
module is the axial angle arccos(|d_i . d_j|) in [0, pi/2].
"""

from __future__ import annotations

import functools
import hashlib
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dwfiber.multitensor import FiberConfig

log = logging.getLogger(__name__)

DEFAULT_M = 362
DEFAULT_SIGMA = 0.1  # radians
LABEL_CLIP = 1e-3


def axial_angles(a, b) -> np.ndarray:
    """Pairwise axial angles (radians) between rows of ``a`` and rows of ``b``."""
    dots = np.abs(np.asarray(a) @ np.asarray(b).T)
    return np.arccos(np.minimum(1.0, dots))


def canonical_hemisphere(x: np.ndarray) -> np.ndarray:
    """Flip each row to the representative with z>0 (ties: x>0, then y>0)."""
    x = np.array(x, dtype=np.float64)
    flip = (x[:, 2] < 0) | ((x[:, 2] == 0) & ((x[:, 0] < 0) | ((x[:, 0] == 0) & (x[:, 1] < 0))))
    x[flip] *= -1
    return x


def fibonacci_hemisphere(m: int) -> np.ndarray:
    k = np.arange(m) + 0.5
    z = 1.0 - k / m
    r = np.sqrt(1.0 - z**2)
    phi = np.pi * (3.0 - np.sqrt(5.0)) * np.arange(m)
    return np.column_stack([r * np.cos(phi), r * np.sin(phi), z])


def _coulomb(points: np.ndarray):
    """Energy of the antipodally symmetric set and tangential forces on ``points``."""
    full = np.vstack([points, -points])
    d2 = np.maximum(2.0 - 2.0 * (points @ full.T), 1e-30)
    m = points.shape[0]
    idx = np.arange(m)
    d2[idx, idx] = np.inf
    inv = 1.0 / np.sqrt(d2)
    # sum over (representative, any point) equals the full-set pair sum by symmetry
    energy = inv.sum()
    inv3 = inv**3
    force = inv3.sum(axis=1)[:, None] * points - inv3 @ full
    force -= np.sum(force * points, axis=1, keepdims=True) * points
    return energy, force


def electrostatic_repulsion(start: np.ndarray, max_iter: int = 5000, tol: float = 1e-10):
    """Minimize the Coulomb energy of {x_i} U {-x_i} by projected gradient steps.

    Returns (points, converged).  The step size grows after accepted steps
    and halves after rejected ones.
    """
    x = start / np.linalg.norm(start, axis=1, keepdims=True)
    energy, force = _coulomb(x)
    step = 0.1 / max(1.0, np.abs(force).max())
    converged = False
    for it in range(max_iter):
        trial = x + step * force
        trial /= np.linalg.norm(trial, axis=1, keepdims=True)
        e_trial, f_trial = _coulomb(trial)
        if e_trial < energy:
            rel = (energy - e_trial) / energy
            x, energy, force = trial, e_trial, f_trial
            step *= 1.2
            if rel < tol:
                converged = True
                break
        else:
            step *= 0.5
            if step < 1e-16:
                converged = True
                break
    log.debug("repulsion stopped after %d iterations (converged=%s)", it + 1, converged)
    return x, converged


@dataclass(eq=False)
class SphereDictionary:
    directions: np.ndarray
    seed: int = 0
    converged: bool = True
    angle_matrix: np.ndarray = field(init=False, repr=False)
    adjacency: list = field(init=False, repr=False)

    def __post_init__(self):
        d = np.asarray(self.directions, dtype=np.float64)
        norms = np.linalg.norm(d, axis=1, keepdims=True)
        if np.max(np.abs(norms - 1.0)) > 1e-12:  # leave stored unit vectors bit-exact
            d = d / norms
        self.directions = d
        ang = axial_angles(d, d)
        np.fill_diagonal(ang, 0.0)
        ang = 0.5 * (ang + ang.T)
        self.angle_matrix = ang
        radius = self.adjacency_radius
        self.adjacency = [np.flatnonzero((row <= radius) & (row > 0)) for row in ang]
        width = max(1, max(len(a) for a in self.adjacency))
        pad = np.repeat(np.arange(self.m)[:, None], width, axis=1)
        for i, nb in enumerate(self.adjacency):
            pad[i, : len(nb)] = nb
        self._adjacency_padded = pad
        self._weights_cache = {}

    @property
    def m(self) -> int:
        return self.directions.shape[0]

    @functools.cached_property
    def nearest_neighbor_angles(self) -> np.ndarray:
        ang = self.angle_matrix + np.diag(np.full(self.m, np.inf))
        return ang.min(axis=1)

    @property
    def max_nn_angle(self) -> float:
        return float(self.nearest_neighbor_angles.max())

    @property
    def min_pair_angle(self) -> float:
        return float(self.nearest_neighbor_angles.min())

    @property
    def adjacency_radius(self) -> float:
        return 1.5 * self.max_nn_angle

    def weights(self, sigma: float = DEFAULT_SIGMA) -> "GaussianWeights":
        if sigma not in self._weights_cache:
            self._weights_cache[sigma] = gaussian_weight_matrix(self, sigma)
        return self._weights_cache[sigma]

    def digest(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.directions, dtype="<f8").tobytes()).hexdigest()

    def to_json(self, path) -> None:
        payload = {
            "m": self.m,
            "seed": self.seed,
            "converged": self.converged,
            "sha256": self.digest(),
            "directions": self.directions.tolist(),
        }
        Path(path).write_text(json.dumps(payload))

    @classmethod
    def from_json(cls, path) -> "SphereDictionary":
        payload = json.loads(Path(path).read_text())
        d = cls(np.array(payload["directions"]), payload.get("seed", 0), payload.get("converged", True))
        if d.m != payload["m"]:
            raise ValueError(f"{path}: m={payload['m']} but {d.m} directions")
        return d


@functools.lru_cache(maxsize=8)
def build_dictionary(m: int = DEFAULT_M, seed: int = 0, max_iter: int = 5000) -> SphereDictionary:
    """m hemisphere axes spread by electrostatic repulsion of 2m antipodal charges.

    Starts from a Fibonacci hemisphere lattice, jittered by ``seed`` (seed 0
    keeps the lattice untouched).  If the iteration cap is hit the best
    iterate is returned with ``converged=False``.
    """
    if m < 3:
        raise ValueError("need m >= 3")
    start = fibonacci_hemisphere(m)
    if seed:
        rng = np.random.default_rng(seed)
        start = start + rng.normal(0.0, 1e-3, start.shape)
    pts, converged = electrostatic_repulsion(start, max_iter=max_iter)
    if not converged:
        warnings.warn(f"sphere dictionary (m={m}) hit the iteration cap", RuntimeWarning)
    return SphereDictionary(canonical_hemisphere(pts), seed, converged)


def nearest_atom(dictionary: SphereDictionary, d) -> np.ndarray | int:
    """Index of the atom with minimal axial angle to ``d`` (lowest index on ties)."""
    d = np.asarray(d, dtype=np.float64)
    idx = np.argmax(np.abs(d @ dictionary.directions.T), axis=-1)
    return int(idx) if d.ndim == 1 else idx


@dataclass(frozen=True, eq=False)
class GaussianWeights:
    sigma: float
    matrix: np.ndarray


def gaussian_weight_matrix(dictionary: SphereDictionary, sigma: float = DEFAULT_SIGMA) -> GaussianWeights:
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    theta = dictionary.angle_matrix
    w = np.exp(-(theta**2) / (2.0 * sigma**2))
    w.setflags(write=False)
    return GaussianWeights(float(sigma), w)


def encode_labels(dictionary: SphereDictionary, weights: GaussianWeights, config: FiberConfig) -> np.ndarray:
    """Blurred, clipped and L1-normalized dictionary coefficients of ``config``."""
    sparse = np.zeros(dictionary.m)
    np.add.at(sparse, nearest_atom(dictionary, config.pdds), config.alphas)
    return _blur_clip_normalize(weights.matrix, sparse)


def encode_labels_batch(dictionary: SphereDictionary, weights: GaussianWeights, alphas, pdds) -> np.ndarray:
    """encode_labels over a batch: alphas (B, t), pdds (B, t, 3) -> (B, m)."""
    alphas = np.asarray(alphas, dtype=np.float64)
    idx = nearest_atom(dictionary, np.asarray(pdds, dtype=np.float64))
    sparse = np.zeros((alphas.shape[0], dictionary.m))
    rows = np.repeat(np.arange(alphas.shape[0]), alphas.shape[1])
    np.add.at(sparse, (rows, idx.ravel()), alphas.ravel())
    return _blur_clip_normalize(weights.matrix, sparse)


def _blur_clip_normalize(w: np.ndarray, sparse: np.ndarray) -> np.ndarray:
    blurred = sparse @ w  # w is symmetric
    blurred[blurred < LABEL_CLIP] = 0.0
    total = blurred.sum(axis=-1, keepdims=True)
    assert np.all(total > 0), "label vanished after clipping"
    return blurred / total


@dataclass
class Peaks:
    indices: np.ndarray
    directions: np.ndarray
    weights: np.ndarray
    degenerate: bool = False

    def __len__(self) -> int:
        return len(self.indices)


def extract_peaks(dictionary: SphereDictionary, coeffs, rel_threshold: float = 0.1,
                  min_sep_deg: float = 15.0, max_peaks: int = 3) -> Peaks:
    """Local maxima of ``coeffs`` over the atom adjacency graph.

    Candidates below ``rel_threshold * max`` are dropped, then peaks closer
    than ``min_sep_deg`` to a stronger one are suppressed greedily.  Returned
    weights are renormalized to sum to one.  ``degenerate`` marks peaks that
    tie with a neighbor (flat input).
    """
    c = np.asarray(coeffs, dtype=np.float64)
    if np.any(c < 0):
        raise ValueError("coefficients must be non-negative")
    top = c.max() if c.size else 0.0
    if top <= 0:
        return Peaks(np.zeros(0, int), np.zeros((0, 3)), np.zeros(0))
    nb_max = c[dictionary._adjacency_padded].max(axis=1)
    is_max = (c >= nb_max) & (c >= rel_threshold * top)
    cand = np.flatnonzero(is_max)
    cand = cand[np.lexsort((cand, -c[cand]))]
    min_sep = np.deg2rad(min_sep_deg)
    kept = []
    for i in cand:
        if all(dictionary.angle_matrix[i, j] >= min_sep for j in kept):
            kept.append(i)
            if len(kept) == max_peaks:
                break
    kept = np.array(kept, dtype=int)
    has_nb = np.array([len(dictionary.adjacency[i]) > 0 for i in kept])
    degenerate = bool(np.any((c[kept] <= nb_max[kept]) & has_nb))
    w = c[kept]
    return Peaks(kept, dictionary.directions[kept], w / w.sum(), degenerate)
