"""Curve tracing: metric geodesics and vector-field integral curves.

Both integrators are classical RK4 with multilinear interpolation of the
precomputed grid quantities (Christoffel symbols, vector field).  Curves
terminate on mask exit, on leaving the grid bounding box, or at a maximum
arc length.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import MetricAtlasError
from .fields import MaskField, MetricField, VectorField
from .grid import Grid
from .operators import christoffel_symbols


@dataclass
class SeedSpec:
    """Starting point and direction for a trace.

    ``direction`` is a unit n-vector, or the string ``"principal"`` to take
    the local field direction at the seed.
    """

    position: tuple
    direction: object = "principal"


@dataclass
class Curve:
    """Polyline trace with its integration step and termination reason."""

    points: np.ndarray  # (m, n)
    step: float
    terminated_reason: str  # left-mask | max-length | completed

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        if self.points.ndim != 2 or len(self.points) < 2:
            raise ValueError("a curve needs at least two points")

    @property
    def length(self) -> float:
        return float(np.linalg.norm(np.diff(self.points, axis=0), axis=1).sum())


def _seed_checks(grid: Grid, mask: MaskField, seed: SeedSpec):
    pos = np.asarray(seed.position, dtype=float)
    if pos.shape != (grid.dim,):
        raise ValueError(f"seed position must have {grid.dim} components")
    vox = tuple(grid.voxel_of(pos)[0])
    if not mask.data[vox]:
        raise MetricAtlasError(f"seed {tuple(pos)} lies outside the mask")
    return pos


def _in_mask(grid: Grid, mask: MaskField, pos: np.ndarray) -> bool:
    lo, hi = grid.bounds
    if np.any(pos < lo) or np.any(pos > hi):
        return False
    return bool(mask.data[tuple(grid.voxel_of(pos)[0])])


def _rk4(pos, state_extra, rhs, dt):
    k1 = rhs(pos, state_extra)
    k2 = rhs(pos + 0.5 * dt * k1[0], state_extra + 0.5 * dt * k1[1])
    k3 = rhs(pos + 0.5 * dt * k2[0], state_extra + 0.5 * dt * k2[1])
    k4 = rhs(pos + dt * k3[0], state_extra + dt * k3[1])
    dpos = dt / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
    dvel = dt / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
    return pos + dpos, state_extra + dvel


def shoot_geodesic(
    g: MetricField,
    seed: SeedSpec,
    max_len: float,
    dt: float,
    mask: MaskField | None = None,
    christoffel=None,
) -> Curve:
    """Trace a geodesic of the metric g from a seed by RK4 shooting.

    The initial velocity is normalized to unit g-norm so arc parameters are
    comparable across metrics; ``max_len`` bounds the Euclidean polyline
    length.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    grid = g.grid
    if mask is None:
        mask = MaskField.full(grid)
    pos = _seed_checks(grid, mask, seed)
    if christoffel is None:
        christoffel = christoffel_symbols(g, mask)

    if isinstance(seed.direction, str):
        raise ValueError("shoot_geodesic needs an explicit direction vector")
    vel = np.asarray(seed.direction, dtype=float)
    g_here, _ = g.interpolate(pos)
    from .fields import unpack_sym

    gm = unpack_sym(g_here, grid.dim)
    norm = float(np.sqrt(vel @ gm @ vel))
    if norm <= 0:
        raise ValueError("seed direction has zero g-norm")
    vel = vel / norm

    def rhs(x, v):
        gamma, oob = christoffel.interpolate(x)
        acc = -np.einsum("kij,i,j->k", gamma, v, v)
        return v, acc

    points = [pos.copy()]
    length = 0.0
    reason = "completed"
    max_steps = int(np.ceil(max_len / dt * 4)) + 10000
    for _ in range(max_steps):
        new_pos, new_vel = _rk4(pos, vel, rhs, dt)
        if not _in_mask(grid, mask, new_pos):
            reason = "left-mask"
            break
        length += float(np.linalg.norm(new_pos - pos))
        pos, vel = new_pos, new_vel
        points.append(pos.copy())
        if length >= max_len:
            reason = "max-length"
            break
    if len(points) < 2:
        points.append(pos + dt * vel * 1e-9)
    return Curve(np.asarray(points), dt, reason)


def integral_curve(
    V: VectorField,
    seed: SeedSpec,
    max_len: float,
    dt: float,
    mask: MaskField | None = None,
) -> Curve:
    """RK4 integration of dx/dt = V(x) with interpolated V."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    grid = V.grid
    if mask is None:
        mask = MaskField.full(grid)
    pos = _seed_checks(grid, mask, seed)

    def rhs(x):
        v, _ = V.interpolate(x)
        return v

    points = [pos.copy()]
    length = 0.0
    reason = "completed"
    max_steps = int(np.ceil(max_len / dt * 4)) + 10000
    for _ in range(max_steps):
        k1 = rhs(pos)
        if np.linalg.norm(k1) < 1e-12:
            reason = "left-mask"
            break
        k2 = rhs(pos + 0.5 * dt * k1)
        k3 = rhs(pos + 0.5 * dt * k2)
        k4 = rhs(pos + dt * k3)
        new_pos = pos + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not _in_mask(grid, mask, new_pos):
            reason = "left-mask"
            break
        length += float(np.linalg.norm(new_pos - pos))
        pos = new_pos
        points.append(pos.copy())
        if length >= max_len:
            reason = "max-length"
            break
    if len(points) < 2:
        points.append(pos)
    return Curve(np.asarray(points), dt, reason)


def curve_deviation(c1: Curve, c2: Curve) -> float:
    """Symmetric mean closest-point distance between two polylines."""
    t1 = cKDTree(c1.points)
    t2 = cKDTree(c2.points)
    d12, _ = t2.query(c1.points)
    d21, _ = t1.query(c2.points)
    return float(0.5 * (d12.mean() + d21.mean()))
