"""Acquisition protocols (FSL bvals/bvecs) and S0 normalization."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from dwfiber.volume import Volume4D

EPSILON_S0 = 1e-8
_UNIT_TOL = 1e-6


class ProtocolError(ValueError):
    pass


@dataclass(frozen=True)
class AcquisitionProtocol:
    """Gradient table of one scan.

    ``gradients`` is (n, 3); rows with ``bvalues > 0`` are unit vectors.
    b-values are in s/mm^2.
    """

    gradients: np.ndarray
    bvalues: np.ndarray

    def __post_init__(self):
        g = np.array(self.gradients, dtype=np.float64).reshape(-1, 3)
        b = np.array(self.bvalues, dtype=np.float64).ravel()
        if g.shape[0] != b.shape[0]:
            raise ProtocolError(f"{g.shape[0]} gradients but {b.shape[0]} b-values")
        if b.size < 1:
            raise ProtocolError("protocol has no acquisitions")
        if not (np.all(np.isfinite(g)) and np.all(np.isfinite(b))):
            raise ProtocolError("non-finite value in protocol")
        weighted = b > 0
        norms = np.linalg.norm(g[weighted], axis=1)
        if np.any(np.abs(norms - 1.0) > _UNIT_TOL):
            bad = np.flatnonzero(weighted)[np.abs(norms - 1.0) > _UNIT_TOL][0]
            raise ProtocolError(f"gradient {bad} has norm {np.linalg.norm(g[bad]):.6g} with b>0")
        g.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "gradients", g)
        object.__setattr__(self, "bvalues", b)

    @property
    def n(self) -> int:
        return self.bvalues.shape[0]

    @property
    def b0_mask(self) -> np.ndarray:
        return self.bvalues == 0

    def weighted(self) -> "AcquisitionProtocol":
        """Sub-protocol of the diffusion-weighted (b>0) acquisitions."""
        keep = ~self.b0_mask
        return AcquisitionProtocol(self.gradients[keep], self.bvalues[keep])

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.bvalues, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.gradients, dtype="<f8").tobytes())
        return h.hexdigest()


def load_protocol(bvals_path, bvecs_path) -> AcquisitionProtocol:
    """Read an FSL-style bvals/bvecs pair.

    bvecs may be stored as 3 rows of n values (FSL) or n rows of 3 values.
    Gradients with b>0 are renormalized to unit length.
    """
    try:
        bvals = np.loadtxt(bvals_path, dtype=np.float64, ndmin=1).ravel()
        bvecs = np.loadtxt(bvecs_path, dtype=np.float64, ndmin=2)
    except ValueError as exc:
        raise ProtocolError(f"cannot parse protocol files: {exc}") from exc
    if bvecs.shape[0] == 3 and bvecs.shape[1] == bvals.size:
        g = bvecs.T.copy()
    elif bvecs.shape[1] == 3 and bvecs.shape[0] == bvals.size:
        g = bvecs.copy()
    else:
        raise ProtocolError(
            f"bvecs shape {bvecs.shape} does not match {bvals.size} b-values"
        )
    if not (np.all(np.isfinite(bvals)) and np.all(np.isfinite(g))):
        raise ProtocolError("non-finite value in protocol files")
    norms = np.linalg.norm(g, axis=1)
    weighted = bvals > 0
    if np.any(weighted & (norms < 1e-12)):
        idx = int(np.flatnonzero(weighted & (norms < 1e-12))[0])
        raise ProtocolError(f"zero-norm gradient at index {idx} with b={bvals[idx]:g}")
    g[weighted] /= norms[weighted, None]
    return AcquisitionProtocol(g, bvals)


def save_protocol(proto: AcquisitionProtocol, bvals_path, bvecs_path) -> None:
    np.savetxt(bvals_path, proto.bvalues[None, :], fmt="%.17g")
    np.savetxt(bvecs_path, proto.gradients.T, fmt="%.17g")


def synthetic_protocol(n_directions: int, bvalue: float, n_b0: int = 1) -> AcquisitionProtocol:
    """Single-shell protocol with ``n_b0`` leading b=0 volumes.

    Directions form a Fibonacci lattice on the upper hemisphere.
    """
    k = np.arange(n_directions) + 0.5
    z = 1.0 - k / n_directions
    r = np.sqrt(1.0 - z**2)
    phi = np.pi * (3.0 - np.sqrt(5.0)) * np.arange(n_directions)
    dirs = np.column_stack([r * np.cos(phi), r * np.sin(phi), z])
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    g = np.vstack([np.zeros((n_b0, 3)), dirs])
    b = np.concatenate([np.zeros(n_b0), np.full(n_directions, float(bvalue))])
    return AcquisitionProtocol(g, b)


def normalize_signals(vol: Volume4D, proto: AcquisitionProtocol):
    """Divide the b>0 channels by the per-voxel mean b=0 signal.

    Returns
    -------
    normalized : Volume4D
        Only the b>0 channels, divided by S0 and clamped at 0.
    s0_map : Volume4D
        Mean of the b=0 channels, C=1.
    valid : ndarray of bool, (X, Y, Z)
        False where S0 <= EPSILON_S0; those voxels are zero-filled.
    """
    if vol.shape[3] != proto.n:
        raise ProtocolError(f"volume has {vol.shape[3]} channels, protocol has {proto.n}")
    b0 = proto.b0_mask
    if not b0.any():
        raise ProtocolError("protocol has no b=0 acquisition")
    data = vol.data.astype(np.float64, copy=False)
    s0 = data[..., b0].mean(axis=-1)
    valid = s0 > EPSILON_S0
    out = np.zeros(vol.shape[:3] + (int((~b0).sum()),), dtype=np.float64)
    out[valid] = data[valid][:, ~b0] / s0[valid, None]
    np.maximum(out, 0.0, out=out)
    return vol.like(out), vol.like(s0[..., None]), valid
