"""Synthetic cubic-curve vector fields and aligned anisotropic tensor fields.

A central cubic y = c3 x^3 + c2 x^2 + c1 x + c0 is thickened into a band by
the method of parallel curves (constant-normal offsets k).  Voxels take the
unit tangent of the nearest parallel curve; tensors are built so that their
principal eigenvector matches the field at a prescribed anisotropy.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .conformal import TensorImage
from .errors import MetricAtlasError
from .fields import MaskField, VectorField, pack_sym
from .grid import Grid


@dataclass
class CubicFamilySpec:
    """A family of parallel cubic curves filling a band of a 2D grid."""

    grid: Grid
    coefficients: tuple = (2.0, -3.0, 1.5, 0.25)  # (c3, c2, c1, c0)
    max_offset: float = 0.2
    anisotropy: float = 6.0
    ratio_mode: str = "axis"  # "axis": eigenvalues rho^2:1, "eigenvalue": rho:1
    n_offsets: int = 81
    samples_per_voxel: int = 8

    def __post_init__(self):
        if self.grid.dim != 2:
            raise ValueError("cubic families are 2D")
        if self.anisotropy < 1.0:
            raise ValueError("anisotropy ratio must be >= 1")
        if not 0 < self.max_offset <= 0.2:
            raise ValueError("offsets must stay within [-0.2, 0.2]")
        if self.ratio_mode not in ("axis", "eigenvalue"):
            raise ValueError(f"unknown ratio mode {self.ratio_mode!r}")

    def f(self, x):
        c3, c2, c1, c0 = self.coefficients
        return ((c3 * x + c2) * x + c1) * x + c0

    def df(self, x):
        c3, c2, c1, _ = self.coefficients
        return (3 * c3 * x + 2 * c2) * x + c1

    def ddf(self, x):
        c3, c2, _, _ = self.coefficients
        return 6 * c3 * x + 2 * c2


def _family_samples(spec: CubicFamilySpec):
    """Dense samples of all parallel curves with their unit tangents."""
    grid = spec.grid
    lo, hi = grid.bounds
    margin = spec.max_offset * 1.5
    nx = spec.samples_per_voxel * grid.shape[0]
    x = np.linspace(lo[0] - margin, hi[0] + margin, nx)
    fp = spec.df(x)
    fpp = spec.ddf(x)
    s = np.sqrt(1.0 + fp**2)
    sp = fp * fpp / s
    normal = np.stack([-fp / s, 1.0 / s], axis=-1)
    dnormal = np.stack(
        [(-fpp * s + fp * sp) / s**2, -sp / s**2], axis=-1
    )
    base = np.stack([x, spec.f(x)], axis=-1)
    dbase = np.stack([np.ones_like(x), fp], axis=-1)

    ks = np.linspace(-spec.max_offset, spec.max_offset, spec.n_offsets)
    pts, tans, offs = [], [], []
    for k in ks:
        p = base + k * normal
        t = dbase + k * dnormal
        t = t / np.linalg.norm(t, axis=-1, keepdims=True)
        pts.append(p)
        tans.append(t)
        offs.append(np.full(nx, k))
    return (
        np.concatenate(pts),
        np.concatenate(tans),
        np.concatenate(offs),
        base,
    )


def _prune_stencil_orphans(mask: np.ndarray) -> np.ndarray:
    """Drop masked voxels with no masked neighbor along some axis.

    Where the band is clipped by the domain boundary it can leave one-voxel
    slivers on which no finite-difference stencil exists; such voxels carry
    no usable signal for any derivative-based operator downstream.
    """
    m = mask.copy()
    while True:
        keep = np.ones_like(m)
        for ax in range(m.ndim):
            nb = np.zeros_like(m)
            lo = tuple(
                slice(None) if a != ax else slice(None, -1) for a in range(m.ndim)
            )
            hi = tuple(
                slice(None) if a != ax else slice(1, None) for a in range(m.ndim)
            )
            nb[lo] |= m[hi]
            nb[hi] |= m[lo]
            keep &= nb
        new = m & keep
        if np.array_equal(new, m):
            return new
        m = new


def cubic_vector_field(spec: CubicFamilySpec):
    """Unit tangents of the nearest parallel curve on the covered band.

    Returns (V, mask): the mask covers voxels within ``max_offset`` of the
    central curve, minus boundary-clipped slivers that cannot support a
    finite-difference stencil.
    """
    grid = spec.grid
    pts, tans, offs, central = _family_samples(spec)
    order = np.argsort(np.abs(offs), kind="stable")  # ties favor smaller |k|
    tree = cKDTree(pts[order])
    central_tree = cKDTree(central)

    coords = grid.coords().reshape(-1, 2)
    d_central, _ = central_tree.query(coords)
    mask = d_central <= spec.max_offset
    mask = _prune_stencil_orphans(mask.reshape(grid.shape)).reshape(-1)
    _, nearest = tree.query(coords)
    V = np.where(mask[:, None], tans[order][nearest], 0.0)
    return (
        VectorField(grid, V.reshape(grid.shape + (2,))),
        MaskField(grid, mask.reshape(grid.shape)),
    )


def tensors_from_field(
    V: VectorField, rho: float, mask: MaskField, ratio_mode: str = "axis"
) -> TensorImage:
    """Tensors whose principal eigenvector is V at anisotropy ratio rho.

    ``ratio_mode="axis"`` reads rho as the ellipsoid axis-length ratio
    (eigenvalues rho^2 : 1); ``"eigenvalue"`` reads it as the eigenvalue
    ratio directly.  Tensors are normalized to unit principal eigenvalue,
    D = VV^T + (1/ratio)(I - VV^T), so the principal eigenvector is unit
    in the inverse-tensor metric as well; the conformal-factor target
    2 nabla_V V then matches the pre-geodesic condition exactly.
    """
    grid = V.grid
    norms = np.linalg.norm(V.data, axis=-1)
    if np.any(mask.data & (norms < 1e-12)):
        bad = np.argwhere(mask.data & (norms < 1e-12))[0]
        raise MetricAtlasError(f"zero vector on mask at voxel {tuple(bad)}")
    lam = rho**2 if ratio_mode == "axis" else rho
    vv = np.einsum("...i,...j->...ij", V.data, V.data)
    eye = np.eye(grid.dim)
    D = vv + (1.0 / lam) * (eye - vv)
    D = np.where(mask.data[..., None, None], D, eye)
    return TensorImage(grid, pack_sym(D), mask)


def make_tensor_image(spec: CubicFamilySpec) -> TensorImage:
    """Full synthetic subject: tensors aligned with the cubic band field."""
    V, mask = cubic_vector_field(spec)
    return tensors_from_field(V, spec.anisotropy, mask, spec.ratio_mode)


def default_grid(size: int = 64) -> Grid:
    h = 1.0 / (size - 1)
    return Grid((size, size), (h, h))


def example_family(n_subjects: int = 4, size: int = 64, ratio_mode: str = "eigenvalue"):
    """Deterministic coefficient perturbations of the default central cubic.

    Uses the eigenvalue-ratio reading of 6:1 by default; at the axis-length
    reading (36:1) inverse-tensor geodesics already track the band at the
    discretization floor and the adaptive metric has nothing to correct.
    """
    grid = default_grid(size)
    base = np.array([2.0, -3.0, 1.5, 0.25])
    specs = []
    for i in range(n_subjects):
        t = (i / max(n_subjects - 1, 1)) * 2.0 - 1.0  # in [-1, 1]
        c3 = base[0] * (1.0 + 0.15 * t)
        c0 = base[3] + 0.02 * t
        c2, c1 = base[1] * (1.0 + 0.15 * t), base[2] * (1.0 + 0.15 * t)
        # uniform scaling leaves both f' and f'' at the center untouched, so
        # also tilt the slope there to make the subjects fan out visibly
        c1 += 0.15 * t
        # keep each curve passing near the domain center
        c0_centered = 0.5 - ((c3 * 0.5 + c2) * 0.5 + c1) * 0.5 + (c0 - base[3])
        specs.append(
            CubicFamilySpec(
                grid, coefficients=(c3, c2, c1, c0_centered), ratio_mode=ratio_mode
            )
        )
    return specs
