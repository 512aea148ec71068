"""Grid-aligned field containers and pointwise SPD linear algebra.

Symmetric matrices are stored packed (upper triangle, row by row):
2D ``(g11, g12, g22)``, 3D ``(g11, g12, g13, g22, g23, g33)``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import NotPositiveDefiniteError
from .grid import Grid

#: minimum eigenvalue used when clamping near-degenerate tensors
EPS_PD = 1e-12

PACK_INDEX = {
    2: ((0, 0), (0, 1), (1, 1)),
    3: ((0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)),
}

COMPONENT_NAMES = {
    2: ("g11", "g12", "g22"),
    3: ("g11", "g12", "g13", "g22", "g23", "g33"),
}


def n_components(dim: int) -> int:
    return dim * (dim + 1) // 2


def pack_sym(mats: np.ndarray) -> np.ndarray:
    """Pack ``(..., n, n)`` symmetric matrices into ``(..., n(n+1)/2)``."""
    n = mats.shape[-1]
    idx = PACK_INDEX[n]
    return np.stack([mats[..., i, j] for i, j in idx], axis=-1)


def unpack_sym(packed: np.ndarray, dim: int) -> np.ndarray:
    """Expand packed components back to full ``(..., n, n)`` matrices."""
    out = np.empty(packed.shape[:-1] + (dim, dim), dtype=packed.dtype)
    for c, (i, j) in enumerate(PACK_INDEX[dim]):
        out[..., i, j] = packed[..., c]
        out[..., j, i] = packed[..., c]
    return out


@dataclass
class ScalarField:
    grid: Grid
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if self.data.shape != self.grid.shape:
            raise ValueError(
                f"scalar data shape {self.data.shape} != grid shape {self.grid.shape}"
            )

    @classmethod
    def zeros(cls, grid: Grid) -> "ScalarField":
        return cls(grid, np.zeros(grid.shape))

    def interpolate(self, points):
        return interpolate(self.grid, self.data[..., None], points, squeeze=True)


@dataclass
class VectorField:
    grid: Grid
    data: np.ndarray  # (*shape, dim), physical coordinates

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        want = self.grid.shape + (self.grid.dim,)
        if self.data.shape != want:
            raise ValueError(f"vector data shape {self.data.shape} != {want}")

    @classmethod
    def zeros(cls, grid: Grid) -> "VectorField":
        return cls(grid, np.zeros(grid.shape + (grid.dim,)))

    def interpolate(self, points):
        return interpolate(self.grid, self.data, points)


@dataclass
class MaskField:
    grid: Grid
    data: np.ndarray  # (*shape,), bool

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=bool)
        if self.data.shape != self.grid.shape:
            raise ValueError("mask shape does not match grid")

    @classmethod
    def full(cls, grid: Grid) -> "MaskField":
        return cls(grid, np.ones(grid.shape, dtype=bool))

    @property
    def n_active(self) -> int:
        return int(self.data.sum())

    def component_count(self) -> int:
        """Number of face-connected components of the active region."""
        from scipy import ndimage

        structure = ndimage.generate_binary_structure(self.grid.dim, 1)
        _, n = ndimage.label(self.data, structure=structure)
        return int(n)


@dataclass
class MetricField:
    """A field of symmetric matrices.

    Holds both Riemannian metrics (``spd_flag=True``) and tangent vectors,
    which are symmetric but not necessarily positive-definite.
    """

    grid: Grid
    data: np.ndarray  # (*shape, n(n+1)/2)
    spd_flag: bool = True

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        want = self.grid.shape + (n_components(self.grid.dim),)
        if self.data.shape != want:
            raise ValueError(f"metric data shape {self.data.shape} != {want}")

    @classmethod
    def from_matrices(cls, grid: Grid, mats: np.ndarray, spd_flag: bool = True):
        return cls(grid, pack_sym(np.asarray(mats, dtype=float)), spd_flag)

    @classmethod
    def identity(cls, grid: Grid) -> "MetricField":
        eye = np.broadcast_to(np.eye(grid.dim), grid.shape + (grid.dim,) * 2)
        return cls.from_matrices(grid, eye)

    def as_matrices(self) -> np.ndarray:
        return unpack_sym(self.data, self.grid.dim)

    def interpolate(self, points, project: bool = False):
        vals, oob = interpolate(self.grid, self.data, points)
        if project:
            mats = clamp_eigenvalues(unpack_sym(vals, self.grid.dim), EPS_PD)
            vals = pack_sym(mats)
        return vals, oob


@dataclass
class ChristoffelField:
    """Per-voxel connection coefficients ``Gamma^k_{ij}``, symmetric in (i, j)."""

    grid: Grid
    data: np.ndarray  # (*shape, n, n, n) indexed [k, i, j]

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        n = self.grid.dim
        if self.data.shape != self.grid.shape + (n, n, n):
            raise ValueError("christoffel data shape mismatch")

    def interpolate(self, points):
        n = self.grid.dim
        flat = self.data.reshape(self.grid.shape + (n**3,))
        vals, oob = interpolate(self.grid, flat, points)
        return vals.reshape(vals.shape[:-1] + (n, n, n)), oob


# ---------------------------------------------------------------------------
# multilinear interpolation


def interpolate(grid: Grid, data: np.ndarray, points, squeeze: bool = False):
    """Multilinear interpolation of per-voxel components at physical points.

    Points outside the node bounding box are clamped to the boundary and
    flagged in the returned out-of-domain indicator.

    Returns
    -------
    values : ndarray, shape (m, n_comp) or (n_comp,) for a single point
    out_of_domain : bool ndarray, shape (m,) or scalar
    """
    pts = np.asarray(points, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    n = grid.dim
    shape = np.asarray(grid.shape)
    s = (pts - np.asarray(grid.origin)) / np.asarray(grid.spacing)
    oob = np.any((s < 0) | (s > shape - 1), axis=1)
    s = np.clip(s, 0, shape - 1)
    i0 = np.minimum(np.floor(s).astype(int), shape - 2)
    f = s - i0

    values = np.zeros((pts.shape[0],) + data.shape[n:])
    for corner in itertools.product((0, 1), repeat=n):
        w = np.ones(pts.shape[0])
        for a, c in enumerate(corner):
            w = w * (f[:, a] if c else 1.0 - f[:, a])
        idx = tuple(i0[:, a] + corner[a] for a in range(n))
        values += w.reshape((-1,) + (1,) * (data.ndim - n)) * data[idx]
    if squeeze:
        values = values[..., 0]
    if single:
        return values[0], bool(oob[0])
    return values, oob


# ---------------------------------------------------------------------------
# pointwise matrix functions


def _masked_eigh(mats, mask=None):
    w, v = np.linalg.eigh(mats)
    return w, v


def _check_spd(w, mask, what):
    """Raise on the first masked voxel whose smallest eigenvalue is <= 0."""
    bad = w[..., 0] <= 0
    if mask is not None:
        bad = bad & mask
    if np.any(bad):
        voxel = np.argwhere(bad)[0]
        raise NotPositiveDefiniteError(voxel, f"required SPD for {what}")


def clamp_eigenvalues(mats: np.ndarray, floor: float) -> np.ndarray:
    """Symmetric eigenvalue clamp; voxels already above the floor pass through."""
    w, v = np.linalg.eigh(mats)
    needs = w[..., 0] < floor
    if not np.any(needs):
        return mats
    wc = np.maximum(w, floor)
    fixed = np.einsum("...ij,...j,...kj->...ik", v, wc, v)
    out = np.where(needs[..., None, None], fixed, mats)
    return out


_MATRIX_FNS = {
    "log": np.log,
    "exp": np.exp,
    "sqrt": np.sqrt,
    "inverse": lambda w: 1.0 / w,
}


def pointwise_matrix_map(field: MetricField, fn: str, mask: MaskField | None = None) -> MetricField:
    """Apply log/exp/sqrt/inverse per voxel via symmetric eigendecomposition.

    log, sqrt and inverse require SPD input on the mask; eigenvalues between
    0 and EPS_PD are clamped up for robustness near degenerate tensors.
    """
    if fn not in _MATRIX_FNS:
        raise ValueError(f"unknown matrix function {fn!r}")
    mats = field.as_matrices()
    w, v = np.linalg.eigh(mats)
    mdata = mask.data if mask is not None else None
    if fn in ("log", "sqrt", "inverse"):
        _check_spd(w, mdata, fn)
        w = np.maximum(w, EPS_PD)
    fw = _MATRIX_FNS[fn](w)
    out = np.einsum("...ij,...j,...kj->...ik", v, fw, v)
    spd = fn in ("exp", "sqrt", "inverse") and field.spd_flag
    return MetricField.from_matrices(field.grid, out, spd_flag=spd)


def spd_project(field: MetricField, eps_pd: float = EPS_PD) -> MetricField:
    """Clamp eigenvalues from below at ``eps_pd``.

    Idempotent, and the identity on fields already SPD with min eigenvalue
    at or above the floor.
    """
    mats = clamp_eigenvalues(field.as_matrices(), eps_pd)
    return MetricField.from_matrices(field.grid, mats, spd_flag=True)


def volume_density(g: MetricField, mask: MaskField | None = None) -> ScalarField:
    """Induced volume density sqrt(det g) per voxel."""
    mats = g.as_matrices()
    det = np.linalg.det(mats)
    bad = det <= 0
    if mask is not None:
        bad = bad & mask.data
    if np.any(bad):
        voxel = np.argwhere(bad)[0]
        raise NotPositiveDefiniteError(voxel, "volume density needs det > 0")
    return ScalarField(g.grid, np.sqrt(np.abs(det)))
