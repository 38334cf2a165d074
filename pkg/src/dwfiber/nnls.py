"""Diffusion-basis-function baseline: fixed signal atoms fitted by NNLS."""

from __future__ import annotations

import functools
import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import qr, solve_triangular

from dwfiber.multitensor import REFERENCE_LAMBDAS, multi_tensor_signals
from dwfiber.protocol import AcquisitionProtocol
from dwfiber.sphere import SphereDictionary
from dwfiber.volume import Volume4D

log = logging.getLogger(__name__)

# coefficients below this fraction of the largest are treated as round-off
DUST = 1e-12


@dataclass
class SignalDictionary:
    atoms: np.ndarray  # (n, m) or (n, m + 1) with the isotropic column last
    m: int
    isotropic: bool = False

    @functools.cached_property
    def gram_inf_norm(self) -> float:
        return gram_inf_norm(self.atoms)


def build_signal_dictionary(proto: AcquisitionProtocol, dictionary: SphereDictionary,
                            lambdas=REFERENCE_LAMBDAS, include_isotropic: bool = False) -> SignalDictionary:
    """Column k is the unit-S0 single-tensor signal along dictionary direction k."""
    pdds = dictionary.directions[:, None, :]
    atoms = multi_tensor_signals(proto, np.ones((dictionary.m, 1)), pdds, lambdas).T
    if include_isotropic:
        lam_iso = float(np.mean(lambdas))
        atoms = np.column_stack([atoms, np.exp(-proto.bvalues * lam_iso)])
    return SignalDictionary(np.ascontiguousarray(atoms), dictionary.m, include_isotropic)


@dataclass
class NnlsInfo:
    iterations: int
    capped: bool
    objective: list = field(default_factory=list)  # 0.5*||Ax - s||^2 after each outer iteration
    kkt_threshold: float = 0.0


def gram_inf_norm(A) -> float:
    """||A^T A||_inf, the scale of the NNLS stopping threshold."""
    A = np.asarray(A, dtype=np.float64)
    return float(np.abs(A.T @ A).sum(axis=1).max())


def _ls_on_support(A, s, support):
    q, r = qr(A[:, support], mode="economic", check_finite=False)
    return solve_triangular(r, q.T @ s, check_finite=False)


def nnls_solve(A, s, tol: float = 1e-10, max_iter: int | None = None, full_output: bool = False,
               gram_norm: float | None = None):
    """min ||Ax - s||_2 subject to x >= 0 by the Lawson-Hanson active-set method.

    The outer loop stops when every inactive gradient component
    (A^T (s - Ax))_i is at most ``tol * ||A^T A||_inf``.  After ``max_iter``
    outer iterations (default 3m) the best iterate so far is returned and
    ``info.capped`` is set.  ``gram_norm`` may carry a precomputed
    :func:`gram_inf_norm` when many right-hand sides share ``A``.
    """
    A = np.asarray(A, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    n, m = A.shape
    if n < 1 or s.shape != (n,):
        raise ValueError(f"shape mismatch: A {A.shape}, s {s.shape}")
    max_iter = 3 * m if max_iter is None else max_iter
    threshold = tol * (gram_inf_norm(A) if gram_norm is None else gram_norm)
    x = np.zeros(m)
    passive = np.zeros(m, dtype=bool)
    w = A.T @ s
    info = NnlsInfo(0, False, [0.5 * float(s @ s)], threshold)
    best_x, best_obj = x.copy(), info.objective[0]
    barred = np.zeros(m, dtype=bool)

    while True:
        candidates = ~passive & ~barred
        if not candidates.any() or w[candidates].max() <= threshold:
            break
        if info.iterations >= max_iter:
            info.capped = True
            x = best_x
            break
        j = int(np.flatnonzero(candidates)[np.argmax(w[candidates])])
        passive[j] = True
        entering = True
        while True:
            support = np.flatnonzero(passive)
            z = _ls_on_support(A, s, support)
            if np.all(z > 0):
                x[:] = 0.0
                x[support] = z
                barred[:] = False
                break
            if entering and z[np.searchsorted(support, j)] <= 0:
                # rounding made the entering column useless; bar it until x moves
                passive[j] = False
                barred[j] = True
                break
            entering = False
            neg = z <= 0
            xs = x[support]
            ratios = xs[neg] / (xs[neg] - z[neg])
            step = ratios.min()
            x[support] = xs + step * (z - xs)
            x[support[neg][ratios <= step]] = 0.0
            x[x < 0] = 0.0
            passive = x > 0
            if not passive.any():
                break
        resid = s - A @ x
        w = A.T @ resid
        obj = 0.5 * float(resid @ resid)
        info.iterations += 1
        info.objective.append(obj)
        if obj <= best_obj:
            best_x, best_obj = x.copy(), obj
    if not info.capped:
        x = _drop_dust(A, s, x, threshold)
    return (x, info) if full_output else x


def _drop_dust(A, s, x, threshold):
    """Remove round-off-sized coefficients left on the support, keeping KKT optimality."""
    top = x.max(initial=0.0)
    dust = (x > 0) & (x <= DUST * top)
    if not dust.any():
        return x
    support = np.flatnonzero((x > 0) & ~dust)
    z = _ls_on_support(A, s, support)
    if np.any(z <= 0):
        return x
    cleaned = np.zeros_like(x)
    cleaned[support] = z
    w = A.T @ (s - A @ cleaned)
    off = np.ones(x.size, dtype=bool)
    off[support] = False
    return cleaned if np.max(w[off], initial=-np.inf) <= threshold else x


@dataclass
class NnlsReport:
    seconds: float
    voxels: int
    capped: int


def predict_nnls(volume: Volume4D, sigdict: SignalDictionary, mask=None, normalize: bool = True):
    """Per-voxel NNLS coefficients on the direction atoms (isotropic part dropped).

    Coefficients are L1-normalized when their sum is positive.  Returns the
    coefficient volume (C=m) and an NnlsReport with the wall time.
    """
    data = volume.data
    if data.shape[3] != sigdict.atoms.shape[0]:
        raise ValueError(f"volume has {data.shape[3]} channels, dictionary expects {sigdict.atoms.shape[0]}")
    spatial = data.shape[:3]
    mask = np.ones(spatial, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    out = np.zeros(spatial + (sigdict.m,), dtype=np.float32)
    idx = np.argwhere(mask)
    capped = 0
    t0 = time.perf_counter()
    atoms, gram_norm = sigdict.atoms, sigdict.gram_inf_norm
    for i, j, k in idx:
        s = data[i, j, k]
        if not np.any(s):
            continue
        x, info = nnls_solve(atoms, s, full_output=True, gram_norm=gram_norm)
        capped += info.capped
        coeffs = x[: sigdict.m]
        total = coeffs.sum()
        if normalize and total > 0:
            coeffs = coeffs / total
        out[i, j, k] = coeffs
    seconds = time.perf_counter() - t0
    if capped:
        log.warning("%d of %d NNLS solves hit the iteration cap", capped, len(idx))
    return volume.like(out), NnlsReport(seconds, len(idx), capped)
