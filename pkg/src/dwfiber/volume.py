from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Volume4D:
    """An X*Y*Z grid of length-C vectors (C-ordered ndarray)."""

    data: np.ndarray
    voxel_size: tuple = field(default=(1.0, 1.0, 1.0))
    affine: np.ndarray | None = None

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 3:
            data = data[..., None]
        if data.ndim != 4 or min(data.shape) < 1:
            raise ValueError(f"expected a non-empty 3D or 4D array, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("volume contains non-finite values")
        self.data = np.ascontiguousarray(data)
        self.voxel_size = tuple(float(v) for v in self.voxel_size)
        if self.affine is not None:
            self.affine = np.asarray(self.affine, dtype=np.float64).reshape(4, 4)

    def like(self, data) -> "Volume4D":
        """New volume on the same grid with different contents."""
        return Volume4D(data, self.voxel_size, self.affine)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def spatial_shape(self) -> tuple:
        return self.data.shape[:3]

    @property
    def channels(self) -> int:
        return self.data.shape[3]
