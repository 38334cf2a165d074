"""Gaussian diffusion tensors, the multi-tensor signal model and Rician noise."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dwfiber.protocol import AcquisitionProtocol

# Single-fiber diffusivities (mm^2/s) of the reference tensor fitted in the corpus callosum.
REFERENCE_LAMBDAS = (0.0014, 0.00029, 0.00029)

_UNIT_TOL = 1e-9


class ConstraintError(ValueError):
    pass


def _check_lambdas(lambdas) -> np.ndarray:
    lam = np.asarray(lambdas, dtype=np.float64).ravel()
    if lam.shape != (3,):
        raise ConstraintError(f"need 3 eigenvalues, got {lam.shape}")
    if np.any(lam <= 0) or not np.all(np.isfinite(lam)):
        raise ConstraintError(f"eigenvalues must be positive, got {lam}")
    if not (lam[0] >= lam[1] >= lam[2]):
        raise ConstraintError(f"eigenvalues must be sorted descending, got {lam}")
    return lam


@dataclass(frozen=True)
class TensorSpec:
    lambdas: np.ndarray
    pdd: np.ndarray

    def __post_init__(self):
        lam = _check_lambdas(self.lambdas)
        pdd = np.asarray(self.pdd, dtype=np.float64).ravel()
        if pdd.shape != (3,) or abs(np.linalg.norm(pdd) - 1.0) > _UNIT_TOL:
            raise ConstraintError(f"pdd must be a unit 3-vector, got {pdd}")
        object.__setattr__(self, "lambdas", lam)
        object.__setattr__(self, "pdd", pdd)


@dataclass(frozen=True)
class FiberConfig:
    """Volume fractions and principal directions of the fibers in one voxel.

    Fractions sum to one, each exceeds 0.1 and they are sorted ascending.
    """

    alphas: np.ndarray
    pdds: np.ndarray

    def __post_init__(self):
        alphas = np.asarray(self.alphas, dtype=np.float64).ravel()
        pdds = np.asarray(self.pdds, dtype=np.float64).reshape(-1, 3)
        t = alphas.size
        if t not in (1, 2, 3) or pdds.shape[0] != t:
            raise ConstraintError(f"need 1-3 fibers with one pdd each, got {t} fractions, {pdds.shape[0]} pdds")
        if abs(alphas.sum() - 1.0) > 1e-12:
            raise ConstraintError(f"fractions sum to {alphas.sum()!r}, not 1")
        if np.any(alphas <= 0.1):
            raise ConstraintError(f"every fraction must exceed 0.1, got {alphas}")
        if np.any(np.diff(alphas) < 0):
            raise ConstraintError(f"fractions must be non-decreasing, got {alphas}")
        if np.any(np.abs(np.linalg.norm(pdds, axis=1) - 1.0) > _UNIT_TOL):
            raise ConstraintError("pdds must be unit vectors")
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "pdds", pdds)

    @property
    def t(self) -> int:
        return self.alphas.size

    def to_dict(self) -> dict:
        return {"alphas": self.alphas.tolist(), "pdds": self.pdds.tolist()}

    @classmethod
    def from_dict(cls, d) -> "FiberConfig":
        return cls(d["alphas"], d["pdds"])


def eigenframe(pdd) -> np.ndarray:
    """Rows (e1, e2, e3) of a right-handed orthonormal frame with e1 = pdd.

    e2 is Gram-Schmidt of the canonical axis least aligned with pdd
    (lowest index on ties), so the frame is reproducible.
    Accepts a single vector or a stack (..., 3).
    """
    e1 = np.asarray(pdd, dtype=np.float64)
    axis = np.argmin(np.abs(e1), axis=-1)
    a = np.zeros_like(e1)
    np.put_along_axis(a, axis[..., None], 1.0, axis=-1)
    e2 = a - np.sum(a * e1, axis=-1, keepdims=True) * e1
    e2 /= np.linalg.norm(e2, axis=-1, keepdims=True)
    e3 = np.cross(e1, e2)
    return np.stack([e1, e2, e3], axis=-2)


def tensor_matrix(spec: TensorSpec) -> np.ndarray:
    lam, p = spec.lambdas, spec.pdd
    if lam[1] == lam[2]:
        return (lam[0] - lam[1]) * np.outer(p, p) + lam[1] * np.eye(3)
    frame = eigenframe(p)
    return frame.T @ np.diag(lam) @ frame


def single_tensor_signal(proto: AcquisitionProtocol, spec: TensorSpec, s0: float = 1.0) -> np.ndarray:
    """Stejskal-Tanner signal s0 * exp(-b g^T D g) for every acquisition."""
    D = tensor_matrix(spec)
    g = proto.gradients
    quad = np.einsum("ni,ij,nj->n", g, D, g)
    return s0 * np.exp(-proto.bvalues * quad)


def multi_tensor_signal(proto: AcquisitionProtocol, config: FiberConfig, lambdas=REFERENCE_LAMBDAS,
                        s0: float = 1.0) -> np.ndarray:
    """Noise-free mixture of single-tensor signals sharing ``lambdas``."""
    lam = _check_lambdas(lambdas)
    signal = np.zeros(proto.n)
    for alpha, pdd in zip(config.alphas, config.pdds):
        signal += alpha * single_tensor_signal(proto, TensorSpec(lam, pdd), s0)
    return signal


def multi_tensor_signals(proto: AcquisitionProtocol, alphas, pdds, lambdas=REFERENCE_LAMBDAS,
                         s0: float = 1.0) -> np.ndarray:
    """Vectorized mixture model.

    Parameters
    ----------
    alphas : array (..., t)
    pdds : array (..., t, 3), unit rows
    Returns an array (..., n).  Constraints on ``alphas`` are not checked.
    """
    lam = _check_lambdas(lambdas)
    alphas = np.asarray(alphas, dtype=np.float64)
    pdds = np.asarray(pdds, dtype=np.float64)
    g, b = proto.gradients, proto.bvalues
    if lam[1] == lam[2]:
        proj = pdds @ g.T  # (..., t, n)
        quad = lam[1] + (lam[0] - lam[1]) * proj**2
    else:
        frames = eigenframe(pdds)  # (..., t, 3, 3)
        proj = frames @ g.T  # (..., t, 3, n)
        quad = np.einsum("k,...kn->...n", lam, proj**2)
    return s0 * np.einsum("...t,...tn->...n", alphas, np.exp(-b * quad))


def add_rician_noise(signal, snr: float, rng: np.random.Generator, s0: float = 1.0) -> np.ndarray:
    """Magnitude of the signal plus complex Gaussian noise of std s0/snr.

    ``snr=np.inf`` returns the signal unchanged.
    """
    if not snr > 0:
        raise ValueError(f"snr must be positive, got {snr}")
    signal = np.asarray(signal, dtype=np.float64)
    if np.isinf(snr):
        return signal.copy()
    sigma = s0 / snr
    e1 = rng.normal(0.0, sigma, signal.shape)
    e2 = rng.normal(0.0, sigma, signal.shape)
    return np.sqrt((signal + e1) ** 2 + e2**2)
