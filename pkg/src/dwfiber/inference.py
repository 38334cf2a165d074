"""Whole-volume prediction with voxel and neighborhood models."""

from __future__ import annotations

import itertools
import logging
import time
from dataclasses import dataclass

import numpy as np

from dwfiber.mlp import MlpModel, forward
from dwfiber.sphere import SphereDictionary, extract_peaks
from dwfiber.volume import Volume4D

log = logging.getLogger(__name__)

DEFAULT_BATCH_VOXELS = 32768


@dataclass
class PredictionReport:
    seconds: float
    voxels: int
    mode: str


def _predict_rows(model: MlpModel, rows: np.ndarray, batch_voxels: int, deterministic: bool) -> np.ndarray:
    out = np.empty((rows.shape[0], model.layer_dims[-1]), dtype=np.float32)
    for s in range(0, rows.shape[0], batch_voxels):
        out[s : s + batch_voxels] = forward(model, rows[s : s + batch_voxels], deterministic=deterministic)
    if model.output_activation == "tanh":
        np.maximum(out, 0.0, out=out)
    return out


def _mask_or_all(mask, spatial) -> np.ndarray:
    if mask is None:
        return np.ones(spatial, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != tuple(spatial):
        raise ValueError(f"mask shape {mask.shape} does not match volume {tuple(spatial)}")
    return mask


def predict_voxelwise(model: MlpModel, volume: Volume4D, mask=None, batch_voxels: int = DEFAULT_BATCH_VOXELS,
                      deterministic: bool = False):
    """Apply a voxel model to every in-mask voxel; other voxels stay zero.

    Returns (coefficient volume with C=m, PredictionReport).
    """
    if volume.channels != model.layer_dims[0]:
        raise ValueError(f"volume has {volume.channels} channels, model expects {model.layer_dims[0]}")
    mask = _mask_or_all(mask, volume.spatial_shape)
    t0 = time.perf_counter()
    out = np.zeros(volume.spatial_shape + (model.layer_dims[-1],), dtype=np.float32)
    out[mask] = _predict_rows(model, volume.data[mask], batch_voxels, deterministic)
    report = PredictionReport(time.perf_counter() - t0, int(mask.sum()), "voxel")
    return volume.like(out), report


def strided_partitions(dims):
    """The 27 sets of voxel centers with (i, j, k) = (a, b, c) mod 3.

    Returns a list of ((a, b, c), centers) with centers an (K, 3) index
    array; 3x3x3 patches around the centers of one set never overlap.
    """
    dims = tuple(int(d) for d in dims)
    parts = []
    for a, b, c in itertools.product(range(3), repeat=3):
        grids = np.meshgrid(np.arange(a, dims[0], 3), np.arange(b, dims[1], 3), np.arange(c, dims[2], 3),
                            indexing="ij")
        parts.append(((a, b, c), np.stack([g.ravel() for g in grids], axis=1)))
    return parts


def _partition_patches(padded: np.ndarray, offset, dims):
    """Flattened patches (channel, x, y, z order) for one partition, plus its grid shape."""
    counts = [len(range(o, d, 3)) for o, d in zip(offset, dims)]
    a, b, c = offset
    nx, ny, nz = counts
    block = padded[a : a + 3 * nx, b : b + 3 * ny, c : c + 3 * nz]
    ch = padded.shape[3]
    block = block.reshape(nx, 3, ny, 3, nz, 3, ch).transpose(0, 2, 4, 6, 1, 3, 5)
    return block.reshape(nx * ny * nz, ch * 27), (nx, ny, nz)


def predict_neighborhood(model: MlpModel, volume: Volume4D, mask=None,
                         batch_voxels: int = DEFAULT_BATCH_VOXELS, deterministic: bool = False):
    """Apply a neighborhood model over a zero-padded volume in 27 strided passes.

    Each pass takes the non-overlapping 3x3x3 patches centered on one mod-3
    class of voxels, so the whole volume needs 27 batched forward calls.
    """
    n = volume.channels
    if 27 * n != model.layer_dims[0]:
        raise ValueError(f"volume has {n} channels, model expects 27 x {model.layer_dims[0] / 27:g}")
    dims = volume.spatial_shape
    mask = _mask_or_all(mask, dims)
    t0 = time.perf_counter()
    padded = np.pad(volume.data.astype(model.dtype, copy=False), ((1, 1), (1, 1), (1, 1), (0, 0)))
    out = np.zeros(dims + (model.layer_dims[-1],), dtype=np.float32)
    for (a, b, c), _ in strided_partitions(dims):
        rows, grid = _partition_patches(padded, (a, b, c), dims)
        keep = mask[a::3, b::3, c::3].ravel()
        if not keep.any():
            continue
        pred = np.zeros((rows.shape[0], out.shape[-1]), dtype=np.float32)
        pred[keep] = _predict_rows(model, rows[keep], batch_voxels, deterministic)
        out[a::3, b::3, c::3] = pred.reshape(grid + (out.shape[-1],))
    report = PredictionReport(time.perf_counter() - t0, int(mask.sum()), "neighborhood")
    return volume.like(out), report


def predict(model: MlpModel, volume: Volume4D, mode: str, **kwargs):
    if mode == "voxel":
        return predict_voxelwise(model, volume, **kwargs)
    if mode == "neighborhood":
        return predict_neighborhood(model, volume, **kwargs)
    raise ValueError(f"unknown mode {mode!r}")


def write_peaks(path, dictionary: SphereDictionary, coeffs: Volume4D, mask=None, **peak_kwargs) -> int:
    """Text file with one line per in-mask voxel: ``i j k`` then (x y z weight) per peak."""
    mask = _mask_or_all(mask, coeffs.spatial_shape)
    lines = 0
    with open(path, "w") as fh:
        fh.write("# i j k then up to three groups of x y z weight\n")
        for i, j, k in np.argwhere(mask):
            c = coeffs.data[i, j, k]
            parts = [f"{i} {j} {k}"]
            if np.any(c > 0):
                pk = extract_peaks(dictionary, np.maximum(c, 0.0), **peak_kwargs)
                parts += [f"{d[0]:.6f} {d[1]:.6f} {d[2]:.6f} {w:.6f}" for d, w in zip(pk.directions, pk.weights)]
            fh.write("  ".join(parts) + "\n")
            lines += 1
    return lines
