"""Inexact diffeomorphic matching of metric fields.

Minimizes  E(phi) = dist_Diff^2(id, phi) + lambda * dist_Met^2(g0, phi*g1)
by a gradient flow in which the L2 gradient of the discrete energy (obtained
by automatic differentiation through pullback, interpolation and the
closed-form Ebin distance) is smoothed by the inverse Dirichlet Laplacian
before each update  phi <- (id + eps v) o phi.
"""

from __future__ import annotations

import itertools
import os
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import sparse
from scipy.sparse.linalg import splu
from sklearn.base import BaseEstimator

from .ebin import ebin_distance
from .errors import MetricAtlasError, NotPositiveDefiniteError
from .fields import (
    EPS_PD,
    MaskField,
    MetricField,
    VectorField,
    interpolate,
    pack_sym,
    spd_project,
    unpack_sym,
)
from .grid import Grid, check_same_grid

torch.set_num_threads(int(os.environ.get("METRICATLAS_THREADS", "1")))

_DT = torch.float64


# ---------------------------------------------------------------------------
# diffeomorphisms


def _jacobian_fd(phi: np.ndarray, spacing) -> np.ndarray:
    """d phi by central differences, second-order one-sided at grid edges."""
    n = phi.shape[-1]
    cols = []
    for j in range(n):
        h = spacing[j]
        f = np.moveaxis(phi, j, 0)
        interior = (f[2:] - f[:-2]) / (2 * h)
        first = (-3 * f[:1] + 4 * f[1:2] - f[2:3]) / (2 * h)
        last = (3 * f[-1:] - 4 * f[-2:-1] + f[-3:-2]) / (2 * h)
        d = np.concatenate([first, interior, last], axis=0)
        cols.append(np.moveaxis(d, 0, j))
    return np.stack(cols, axis=-1)  # (..., i, j) = d phi_i / d x_j


@dataclass
class Diffeomorphism:
    """phi = id + u stored as a displacement field on the grid."""

    displacement: VectorField

    @property
    def grid(self) -> Grid:
        return self.displacement.grid

    @classmethod
    def identity(cls, grid: Grid) -> "Diffeomorphism":
        return cls(VectorField.zeros(grid))

    @classmethod
    def from_displacement(cls, grid: Grid, u: np.ndarray) -> "Diffeomorphism":
        return cls(VectorField(grid, u))

    def __call__(self, points):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        u, _ = self.displacement.interpolate(pts)
        out = pts + u
        return out[0] if np.asarray(points).ndim == 1 else out

    def mapped_coords(self) -> np.ndarray:
        """phi evaluated at every grid node, shape (*shape, dim)."""
        return self.grid.coords() + self.displacement.data

    def jacobian(self) -> np.ndarray:
        return _jacobian_fd(self.mapped_coords(), self.grid.spacing)

    def jacobian_determinant(self) -> np.ndarray:
        return np.linalg.det(self.jacobian())

    def compose(self, other: "Diffeomorphism") -> "Diffeomorphism":
        """self after other: (self o other)(x) = self(other(x))."""
        grid = check_same_grid(self.displacement, other.displacement)
        phi_pts = (grid.coords() + other.displacement.data).reshape(-1, grid.dim)
        u_self, _ = self.displacement.interpolate(phi_pts)
        new_u = other.displacement.data + u_self.reshape(other.displacement.data.shape)
        return Diffeomorphism(VectorField(grid, new_u))


@dataclass
class RegistrationConfig:
    lam: float = 100.0
    epsilon: float = 1.0
    max_iter: int = 400
    epsilon_policy: str = "energy-adaptive"  # or "fixed"

    def __post_init__(self):
        if self.lam <= 0 or self.epsilon <= 0 or self.max_iter <= 0:
            raise ValueError("registration parameters must be positive")
        if self.epsilon_policy not in ("fixed", "energy-adaptive"):
            raise ValueError(f"unknown epsilon policy {self.epsilon_policy!r}")


@dataclass
class EnergyReport:
    total: list = field(default_factory=list)
    deformation: list = field(default_factory=list)
    matching: list = field(default_factory=list)
    accepted: list = field(default_factory=list)

    def append(self, total, deformation, matching, accepted):
        self.total.append(float(total))
        self.deformation.append(float(deformation))
        self.matching.append(float(matching))
        self.accepted.append(bool(accepted))


# ---------------------------------------------------------------------------
# public field operations (numpy)


def pullback_metric(
    phi: Diffeomorphism, g: MetricField, mask: MaskField | None = None
) -> MetricField:
    """phi*g = (d phi)^T (g o phi) (d phi), projected back onto the SPD cone."""
    grid = check_same_grid(phi.displacement, g)
    dphi = phi.jacobian()
    det = np.linalg.det(dphi)
    region = mask.data if mask is not None else np.ones(grid.shape, bool)
    bad = (det <= 0) & region
    if np.any(bad):
        raise NotPositiveDefiniteError(
            np.argwhere(bad)[0], "pullback by a non orientation-preserving map"
        )
    pts = phi.mapped_coords().reshape(-1, grid.dim)
    comp, _ = interpolate(grid, g.data, pts)
    g_at = unpack_sym(comp.reshape(grid.shape + (comp.shape[-1],)), grid.dim)
    pb = np.einsum("...ji,...jk,...kl->...il", dphi, g_at, dphi)
    out = MetricField.from_matrices(grid, pb, spd_flag=g.spd_flag)
    if g.spd_flag:
        out = spd_project(out)
    return out


def dist_diff(phi: Diffeomorphism, mask: MaskField) -> float:
    """Deformation cost: Ebin distance between the Euclidean metric and its pullback."""
    grid = check_same_grid(phi.displacement, mask)
    eye = MetricField.identity(grid)
    return ebin_distance(eye, pullback_metric(phi, eye, mask), mask)


def matching_energy(
    phi: Diffeomorphism,
    g0: MetricField,
    g1: MetricField,
    lam: float,
    mask: MaskField,
) -> float:
    """E(phi) = dist_Diff^2(id, phi) + lam * dist_Met^2(g0, phi*g1)."""
    check_same_grid(phi.displacement, g0, g1, mask)
    d_def = dist_diff(phi, mask)
    d_met = ebin_distance(g0, pullback_metric(phi, g1, mask), mask)
    return d_def**2 + lam * d_met**2


# ---------------------------------------------------------------------------
# torch energy model


def _t_fd(f: torch.Tensor, axis: int, h: float) -> torch.Tensor:
    fm = f.movedim(axis, 0)
    interior = (fm[2:] - fm[:-2]) / (2 * h)
    first = (-3 * fm[:1] + 4 * fm[1:2] - fm[2:3]) / (2 * h)
    last = (3 * fm[-1:] - 4 * fm[-2:-1] + fm[-3:-2]) / (2 * h)
    return torch.cat([first, interior, last], dim=0).movedim(0, axis)


def _t_interp(data: torch.Tensor, pts: torch.Tensor, grid: Grid) -> torch.Tensor:
    """Differentiable multilinear interpolation, clamped at the boundary."""
    n = grid.dim
    origin = torch.tensor(grid.origin, dtype=_DT)
    spacing = torch.tensor(grid.spacing, dtype=_DT)
    smax = torch.tensor([s - 1 for s in grid.shape], dtype=_DT)
    s = (pts - origin) / spacing
    s = torch.minimum(torch.maximum(s, torch.zeros_like(smax)), smax)
    i0 = torch.minimum(
        s.detach().floor().long(),
        torch.tensor([sh - 2 for sh in grid.shape]),
    )
    i0 = torch.clamp(i0, min=0)
    f = s - i0.to(_DT)
    vals = torch.zeros(pts.shape[0], data.shape[-1], dtype=_DT)
    for corner in itertools.product((0, 1), repeat=n):
        w = torch.ones(pts.shape[0], dtype=_DT)
        for a, c in enumerate(corner):
            w = w * (f[:, a] if c else 1.0 - f[:, a])
        idx = tuple(i0[:, a] + corner[a] for a in range(n))
        vals = vals + w[:, None] * data[idx]
    return vals


def _t_dist2(ghat: torch.Tensor, a: torch.Tensor, trk_det: torch.Tensor, n: int,
             mask: torch.Tensor, cell_vol: float) -> torch.Tensor:
    """Squared Ebin distance from eigenvalues of g0^-1/2 pb g0^-1/2.

    ``trk_det`` is unused; kept for signature clarity."""
    lam = torch.clamp(torch.linalg.eigvalsh(ghat), min=EPS_PD)
    ell = torch.log(lam)
    trk = ell.sum(dim=-1)
    s2 = torch.clamp((ell**2).sum(dim=-1) - trk**2 / n, min=0.0)
    u = n * s2 / 16.0
    b = a * torch.exp(trk / 4.0)
    kappa = torch.sqrt(torch.clamp(u, min=1e-13))
    cos_big = torch.cos(torch.clamp(kappa, max=np.pi))
    cos_small = 1.0 - u / 2.0 + u * u / 24.0
    cos_theta = torch.where(u < 1e-12, cos_small, cos_big)
    integrand = a**2 - 2.0 * a * b * cos_theta + b**2
    return 16.0 / n * integrand[mask].sum() * cell_vol


class _EnergyModel:
    """Discrete matching energy with autograd-backed gradient."""

    def __init__(self, g0: MetricField, g1: MetricField, lam: float, mask: MaskField):
        grid = check_same_grid(g0, g1, mask)
        self.grid = grid
        self.lam = float(lam)
        n = grid.dim
        self.n = n
        self.mask_t = torch.from_numpy(mask.data.copy())
        self.coords = torch.from_numpy(grid.coords()).to(_DT)
        self.g1_packed = torch.from_numpy(g1.data.copy()).to(_DT)
        m0 = g0.as_matrices()
        w0, v0 = np.linalg.eigh(m0)
        bad = (w0[..., 0] <= 0) & mask.data
        if np.any(bad):
            raise NotPositiveDefiniteError(np.argwhere(bad)[0], "registration source")
        w0 = np.maximum(w0, EPS_PD)
        g0_ihalf = np.einsum("...ij,...j,...kj->...ik", v0, 1.0 / np.sqrt(w0), v0)
        self.g0_ihalf = torch.from_numpy(g0_ihalf).to(_DT)
        self.a0 = torch.from_numpy(np.prod(w0, axis=-1) ** 0.25).to(_DT)
        self.cell_vol = grid.cell_volume

    def _forward(self, u: torch.Tensor) -> torch.Tensor:
        grid = self.grid
        n = self.n
        phi = self.coords + u
        h = grid.spacing
        dphi = torch.stack([_t_fd(phi, j, h[j]) for j in range(n)], dim=-1)
        # metric term
        pts = phi.reshape(-1, n)
        comps = _t_interp(self.g1_packed, pts, grid)
        g1_at = _t_unpack(comps, n).reshape(grid.shape + (n, n))
        pb = dphi.transpose(-1, -2) @ g1_at @ dphi
        ghat = self.g0_ihalf @ pb @ self.g0_ihalf
        ghat = 0.5 * (ghat + ghat.transpose(-1, -2))
        d2_met = _t_dist2(ghat, self.a0, None, n, self.mask_t, self.cell_vol)
        # deformation term: pullback of the Euclidean metric
        pb_e = dphi.transpose(-1, -2) @ dphi
        ones = torch.ones(grid.shape, dtype=_DT)
        d2_def = _t_dist2(pb_e, ones, None, n, self.mask_t, self.cell_vol)
        return d2_def + self.lam * d2_met, d2_def, d2_met

    def energy(self, u: np.ndarray):
        with torch.no_grad():
            total, d_def, d_met = self._forward(torch.from_numpy(u).to(_DT))
        return float(total), float(d_def), float(d_met)

    def energy_and_gradient(self, u: np.ndarray):
        ut = torch.from_numpy(u).to(_DT).requires_grad_(True)
        total, d_def, d_met = self._forward(ut)
        total.backward()
        return (
            float(total.detach()),
            float(d_def.detach()),
            float(d_met.detach()),
            ut.grad.numpy().copy(),
        )


def _t_unpack(packed: torch.Tensor, n: int) -> torch.Tensor:
    from .fields import PACK_INDEX

    out = torch.zeros(packed.shape[:-1] + (n, n), dtype=packed.dtype)
    for c, (i, j) in enumerate(PACK_INDEX[n]):
        out[..., i, j] = packed[..., c]
        if i != j:
            out[..., j, i] = packed[..., c]
    return out


def energy_gradient(
    phi: Diffeomorphism,
    g0: MetricField,
    g1: MetricField,
    lam: float,
    mask: MaskField,
) -> VectorField:
    """Gradient of the discrete matching energy with respect to the displacement."""
    model = _EnergyModel(g0, g1, lam, mask)
    _, _, _, grad = model.energy_and_gradient(phi.displacement.data)
    return VectorField(phi.grid, grad)


# ---------------------------------------------------------------------------
# Sobolev (information-metric) smoothing


_LAPLACIAN_CACHE: dict = {}


def _dirichlet_solver(grid: Grid):
    key = (grid.shape, grid.spacing)
    if key in _LAPLACIAN_CACHE:
        return _LAPLACIAN_CACHE[key]
    shape = grid.shape
    n = grid.dim
    interior_shape = tuple(s - 2 for s in shape)
    nin = int(np.prod(interior_shape))
    idx = np.arange(nin).reshape(interior_shape)
    rows, cols, vals = [], [], []
    diag = np.zeros(interior_shape)
    for a in range(n):
        h2 = grid.spacing[a] ** 2
        diag += 2.0 / h2
        for off in (-1, 1):
            src = [slice(None)] * n
            dst = [slice(None)] * n
            if off == 1:
                src[a] = slice(1, None)
                dst[a] = slice(None, -1)
            else:
                src[a] = slice(None, -1)
                dst[a] = slice(1, None)
            rows.append(idx[tuple(dst)].ravel())
            cols.append(idx[tuple(src)].ravel())
            vals.append(np.full(rows[-1].size, -1.0 / h2))
    rows.append(idx.ravel())
    cols.append(idx.ravel())
    vals.append(diag.ravel())
    A = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(nin, nin),
    ).tocsc()
    solver = splu(A)
    _LAPLACIAN_CACHE[key] = (solver, interior_shape)
    return solver, interior_shape


def information_metric_smooth(grad: VectorField, mask: MaskField | None = None) -> VectorField:
    """Solve the componentwise Poisson problem  Laplacian v = -grad.

    Zero Dirichlet values on the grid boundary; the result is the smoothed
    (order-one Sobolev) representative of the L2 gradient.
    """
    grid = grad.grid
    solver, interior_shape = _dirichlet_solver(grid)
    out = np.zeros_like(grad.data)
    core = tuple(slice(1, -1) for _ in range(grid.dim))
    for c in range(grid.dim):
        rhs = grad.data[core + (c,)].ravel()
        v = solver.solve(rhs)
        out[core + (c,)] = v.reshape(interior_shape)
    return VectorField(grid, out)


# ---------------------------------------------------------------------------
# the matching loop (Algorithm: gradient flow with safeguarded steps)


def register(
    g0: MetricField,
    g1: MetricField,
    config: RegistrationConfig,
    mask: MaskField,
    initial: Diffeomorphism | None = None,
):
    """Inexact metric matching by safeguarded Sobolev gradient flow.

    Returns (phi, report).  Accepted steps never increase the energy and
    keep det(d phi) positive on the mask; a violating step is halved up to
    10 times and then skipped.
    """
    grid = check_same_grid(g0, g1, mask)
    model = _EnergyModel(g0, g1, config.lam, mask)
    u = (
        initial.displacement.data.copy()
        if initial is not None
        else np.zeros(grid.shape + (grid.dim,))
    )
    report = EnergyReport()
    energy, d_def, d_met = None, None, None
    for _ in range(config.max_iter):
        energy, d_def, d_met, grad = model.energy_and_gradient(u)
        v = -information_metric_smooth(VectorField(grid, grad), mask).data
        if config.epsilon_policy == "energy-adaptive":
            eps = config.epsilon / max(energy, 1e-12)
        else:
            eps = config.epsilon
        accepted = False
        for _halving in range(11):
            u_trial = _compose_step(grid, u, eps * v)
            det = np.linalg.det(
                _jacobian_fd(grid.coords() + u_trial, grid.spacing)
            )
            if np.any(det[mask.data] <= 0):
                eps *= 0.5
                continue
            e_trial, _, _ = model.energy(u_trial)
            if e_trial <= energy:
                u = u_trial
                accepted = True
                break
            eps *= 0.5
        report.append(energy, d_def, config.lam * d_met, accepted)
    phi = Diffeomorphism(VectorField(grid, u))
    return phi, report


def _compose_step(grid: Grid, u: np.ndarray, step: np.ndarray) -> np.ndarray:
    """Displacement of (id + step) o (id + u): u + step evaluated at id + u."""
    pts = (grid.coords() + u).reshape(-1, grid.dim)
    s_at, _ = interpolate(grid, step, pts)
    return u + s_at.reshape(u.shape)


class MetricRegistration(BaseEstimator):
    """sklearn-style wrapper: fit a diffeomorphism matching g1 onto g0.

    Attributes after ``fit``: ``diffeomorphism_``, ``report_`` and
    ``aligned_`` (the pulled-back moving metric).
    """

    def __init__(self, lam=100.0, epsilon=1.0, max_iter=400,
                 epsilon_policy="energy-adaptive"):
        self.lam = lam
        self.epsilon = epsilon
        self.max_iter = max_iter
        self.epsilon_policy = epsilon_policy

    def _config(self) -> RegistrationConfig:
        return RegistrationConfig(
            lam=self.lam,
            epsilon=self.epsilon,
            max_iter=self.max_iter,
            epsilon_policy=self.epsilon_policy,
        )

    def fit(self, g0: MetricField, g1: MetricField, mask: MaskField | None = None):
        if mask is None:
            mask = MaskField.full(g0.grid)
        phi, report = register(g0, g1, self._config(), mask)
        self.diffeomorphism_ = phi
        self.report_ = report
        self.aligned_ = pullback_metric(phi, g1, mask)
        return self

    def transform(self, g: MetricField) -> MetricField:
        if not hasattr(self, "diffeomorphism_"):
            raise MetricAtlasError("MetricRegistration is not fitted")
        return pullback_metric(self.diffeomorphism_, g)
