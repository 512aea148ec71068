"""Regular lattice geometry underlying every field container."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import GridMismatchError


@dataclass(frozen=True)
class Grid:
    """A regular lattice in 2 or 3 dimensions.

    Parameters
    ----------
    shape : tuple of int
        Voxel counts per axis, each >= 3.
    spacing : tuple of float
        Physical step per axis, each > 0.
    origin : tuple of float, optional
        Physical coordinate of voxel (0, ..., 0).  Defaults to zeros.
    """

    shape: tuple
    spacing: tuple
    origin: tuple = None

    def __post_init__(self):
        shape = tuple(int(s) for s in self.shape)
        spacing = tuple(float(h) for h in self.spacing)
        if len(shape) not in (2, 3):
            raise ValueError(f"grid dimension must be 2 or 3, got {len(shape)}")
        if len(spacing) != len(shape):
            raise ValueError("spacing and shape must have the same length")
        if any(s < 3 for s in shape):
            raise ValueError(f"every axis needs at least 3 voxels, got {shape}")
        if any(h <= 0 for h in spacing):
            raise ValueError(f"spacing must be positive, got {spacing}")
        origin = self.origin
        if origin is None:
            origin = (0.0,) * len(shape)
        origin = tuple(float(o) for o in origin)
        if len(origin) != len(shape):
            raise ValueError("origin and shape must have the same length")
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def dim(self) -> int:
        return len(self.shape)

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.shape))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    def axis_coords(self, axis: int) -> np.ndarray:
        """Physical coordinates of the nodes along one axis."""
        return self.origin[axis] + self.spacing[axis] * np.arange(self.shape[axis])

    def coords(self) -> np.ndarray:
        """Physical coordinates of every node, shape ``(*shape, dim)``."""
        axes = [self.axis_coords(a) for a in range(self.dim)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    @property
    def bounds(self):
        """(lower, upper) physical corners of the node bounding box."""
        lo = np.asarray(self.origin, dtype=float)
        hi = lo + (np.asarray(self.shape) - 1) * np.asarray(self.spacing)
        return lo, hi

    def voxel_of(self, points: np.ndarray) -> np.ndarray:
        """Nearest-node integer index of physical points, clamped to the grid."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        idx = np.rint((pts - np.asarray(self.origin)) / np.asarray(self.spacing))
        idx = np.clip(idx, 0, np.asarray(self.shape) - 1).astype(int)
        return idx

    def compatible(self, other: "Grid") -> bool:
        return (
            self.shape == other.shape
            and np.allclose(self.spacing, other.spacing)
            and np.allclose(self.origin, other.origin)
        )


def check_same_grid(*objs):
    """Raise GridMismatchError unless all objects share a compatible grid."""
    grids = [o.grid for o in objs]
    for g in grids[1:]:
        if not grids[0].compatible(g):
            raise GridMismatchError(f"incompatible grids: {grids[0]} vs {g}")
    return grids[0]
