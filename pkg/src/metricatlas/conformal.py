"""Conformal factor estimation for tensor-derived metrics.

Estimates the scalar field ``alpha`` making the geodesics of
``g_alpha = exp(alpha) * D^-1`` follow the principal-eigenvector field of a
tensor image ``D``.  The pure-Neumann Poisson problem is solved in the
least-squares sense: ``alpha`` minimizes the discrete alignment functional

    F(alpha) = sum_mask w(x) || grad alpha - 2 nabla_V V ||^2_gtilde

with ``w = sqrt(det gtilde) * cell_volume``, and the gauge is fixed by
``mean(alpha) = 0`` over the mask.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import cg
from sklearn.base import BaseEstimator

from .errors import NotPositiveDefiniteError, SolverError
from .fields import (
    EPS_PD,
    MaskField,
    MetricField,
    ScalarField,
    VectorField,
    n_components,
    pack_sym,
    unpack_sym,
)
from .grid import Grid, check_same_grid
from .operators import covariant_derivative_vv

#: eigenvalue-gap tolerance below which a principal direction is unreliable
TIE_TOL = 1e-9


@dataclass
class TensorImage:
    """A masked field of SPD diffusion-like tensors (packed storage)."""

    grid: Grid
    data: np.ndarray  # (*shape, n(n+1)/2)
    mask: MaskField

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        want = self.grid.shape + (n_components(self.grid.dim),)
        if self.data.shape != want:
            raise ValueError(f"tensor data shape {self.data.shape} != {want}")
        check_same_grid(self, self.mask)

    @classmethod
    def from_matrices(cls, grid, mats, mask):
        return cls(grid, pack_sym(np.asarray(mats, dtype=float)), mask)

    def as_matrices(self) -> np.ndarray:
        return unpack_sym(self.data, self.grid.dim)


@dataclass
class ConnectomeMetric:
    """Bundle of inverse-tensor metric, conformal factor and adapted metric."""

    g_tilde: MetricField
    alpha: ScalarField
    g_alpha: MetricField
    mask: MaskField

    @property
    def grid(self):
        return self.g_tilde.grid


def inverse_tensor_metric(D: TensorImage) -> MetricField:
    """gtilde = D(x)^-1 per voxel, identity outside the mask."""
    mats = D.as_matrices()
    n = D.grid.dim
    w = np.linalg.eigvalsh(mats)
    bad = (w[..., 0] <= 0) & D.mask.data
    if np.any(bad):
        raise NotPositiveDefiniteError(np.argwhere(bad)[0], "tensor inverse")
    safe = np.where(D.mask.data[..., None, None], mats, np.eye(n))
    inv = np.linalg.inv(safe)
    inv = 0.5 * (inv + np.swapaxes(inv, -1, -2))
    return MetricField.from_matrices(D.grid, inv)


def principal_eigenvector_field(D: TensorImage):
    """Unit principal eigenvectors of D with flood-fill sign consistency.

    Returns
    -------
    V : VectorField
        Unit vectors on reliable voxels, zero elsewhere.
    reliable : MaskField
        Masked voxels whose top eigenvalue gap exceeds TIE_TOL.
    """
    grid = D.grid
    n = grid.dim
    w, v = np.linalg.eigh(D.as_matrices())
    vec = v[..., -1]  # eigenvector of the largest eigenvalue
    gap = w[..., -1] - w[..., -2]
    reliable = D.mask.data & (gap > TIE_TOL)
    vec = np.where(reliable[..., None], vec, 0.0)

    # greedy flood fill: flip signs to agree with the neighbor that found us
    data = vec.copy()
    visited = np.zeros(grid.shape, dtype=bool)
    offsets = []
    for a in range(n):
        for d in (-1, 1):
            off = [0] * n
            off[a] = d
            offsets.append(tuple(off))
    todo = np.argwhere(reliable)
    order = np.argsort(-gap[reliable], kind="stable")
    for start in todo[order]:
        start = tuple(start)
        if visited[start]:
            continue
        # seed each connected component at its most anisotropic voxel
        queue = deque([start])
        visited[start] = True
        while queue:
            cur = queue.popleft()
            for off in offsets:
                nb = tuple(c + o for c, o in zip(cur, off))
                if any(i < 0 or i >= s for i, s in zip(nb, grid.shape)):
                    continue
                if visited[nb] or not reliable[nb]:
                    continue
                if np.dot(data[cur], data[nb]) < 0:
                    data[nb] = -data[nb]
                visited[nb] = True
                queue.append(nb)
    return VectorField(grid, data), MaskField(grid, reliable)


# ---------------------------------------------------------------------------
# least-squares Poisson solve


def _masked_gradient_operator(grid: Grid, mask: MaskField):
    """Sparse per-axis first-derivative operators over masked voxels.

    Same stencil selection as :func:`metricatlas.operators.masked_partial`:
    central where both neighbors are masked, second-order one-sided with two
    same-side neighbors, two-point first-order with one, zero row with none.
    """
    n = grid.dim
    mdata = mask.data
    nmask = int(mdata.sum())
    vid = -np.ones(grid.shape, dtype=int)
    vid[mdata] = np.arange(nmask)

    def shifted_vid(axis, off):
        out = -np.ones(grid.shape, dtype=int)
        src = [slice(None)] * n
        dst = [slice(None)] * n
        if off > 0:
            src[axis] = slice(off, None)
            dst[axis] = slice(None, -off)
        elif off < 0:
            src[axis] = slice(None, off)
            dst[axis] = slice(-off, None)
        out[tuple(dst)] = vid[tuple(src)]
        return out[mdata]

    ops = []
    rows_base = np.arange(nmask)
    for a in range(n):
        h = grid.spacing[a]
        vp1 = shifted_vid(a, 1)
        vp2 = shifted_vid(a, 2)
        vm1 = shifted_vid(a, -1)
        vm2 = shifted_vid(a, -2)
        v0 = vid[mdata]
        central = (vp1 >= 0) & (vm1 >= 0)
        fwd2 = ~central & (vp1 >= 0) & (vp2 >= 0)
        bwd2 = ~central & ~fwd2 & (vm1 >= 0) & (vm2 >= 0)
        fwd1 = ~central & ~fwd2 & ~bwd2 & (vp1 >= 0)
        bwd1 = ~central & ~fwd2 & ~bwd2 & ~fwd1 & (vm1 >= 0)

        rows, cols, vals = [], [], []

        def add(sel, col_ids, coef):
            rows.append(rows_base[sel])
            cols.append(col_ids[sel])
            vals.append(np.full(sel.sum(), coef))

        add(central, vp1, 1.0 / (2 * h))
        add(central, vm1, -1.0 / (2 * h))
        add(fwd2, v0, -3.0 / (2 * h))
        add(fwd2, vp1, 4.0 / (2 * h))
        add(fwd2, vp2, -1.0 / (2 * h))
        add(bwd2, v0, 3.0 / (2 * h))
        add(bwd2, vm1, -4.0 / (2 * h))
        add(bwd2, vm2, 1.0 / (2 * h))
        add(fwd1, vp1, 1.0 / h)
        add(fwd1, v0, -1.0 / h)
        add(bwd1, v0, 1.0 / h)
        add(bwd1, vm1, -1.0 / h)

        G = sparse.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(nmask, nmask),
        ).tocsr()
        ops.append(G)
    return ops, vid


def assemble_alpha_system(D: TensorImage):
    """Assemble the normal equations of the discrete alignment functional.

    Returns (A, rhs, weights, extras) with A = G^T M G symmetric PSD over
    masked voxels, rhs = G^T M c, ``weights`` the vol(gtilde)-weighted voxel
    measures and ``extras`` a dict of intermediate fields for diagnostics.
    """
    grid = D.grid
    n = grid.dim
    mask = D.mask
    gt = inverse_tensor_metric(D)
    V, reliable = principal_eigenvector_field(D)
    ndvv = covariant_derivative_vv(V, gt, mask)
    bvec = 2.0 * np.where(reliable.data[..., None], ndvv.data, 0.0)

    gmat = gt.as_matrices()
    det = np.linalg.det(np.where(mask.data[..., None, None], gmat, np.eye(n)))
    w = np.where(mask.data, np.sqrt(np.abs(det)), 0.0) * grid.cell_volume

    # covector target c = gtilde b and block weight M = w * gtilde^-1
    c = np.einsum("...ij,...j->...i", gmat, bvec)
    ginv = np.linalg.inv(np.where(mask.data[..., None, None], gmat, np.eye(n)))

    ops, vid = _masked_gradient_operator(grid, mask)
    nmask = ops[0].shape[0]
    G = sparse.vstack(ops, format="csr")

    w_m = w[mask.data]
    blocks_r, blocks_c, blocks_v = [], [], []
    base = np.arange(nmask)
    for a in range(n):
        for b_ in range(n):
            blocks_r.append(a * nmask + base)
            blocks_c.append(b_ * nmask + base)
            blocks_v.append(w_m * ginv[mask.data][:, a, b_])
    M = sparse.coo_matrix(
        (np.concatenate(blocks_v), (np.concatenate(blocks_r), np.concatenate(blocks_c))),
        shape=(n * nmask, n * nmask),
    ).tocsr()

    c_stack = np.concatenate([c[mask.data][:, a] for a in range(n)])
    A = (G.T @ M @ G).tocsr()
    rhs = G.T @ (M @ c_stack)
    extras = {
        "g_tilde": gt,
        "V": V,
        "reliable": reliable,
        "nabla_vv": ndvv,
        "G": G,
        "M": M,
        "c_stack": c_stack,
        "vid": vid,
    }
    return A, rhs, w_m, extras


def solve_alpha(
    D: TensorImage,
    tol: float = 1e-8,
    max_iter: int | None = None,
) -> ScalarField:
    """Solve the gauge-fixed least-squares Poisson problem for alpha.

    The normal-equation residual satisfies ``|A alpha - rhs| <= tol * |rhs|``
    and ``mean(alpha) = 0`` over the mask.
    """
    A, rhs, _, extras = assemble_alpha_system(D)
    nmask = A.shape[0]
    rhs_norm = float(np.linalg.norm(rhs))
    if rhs_norm == 0.0:
        alpha = np.zeros(D.grid.shape)
        return ScalarField(D.grid, alpha)
    if max_iter is None:
        max_iter = max(200, int(100 * np.sqrt(nmask)))
    diag = A.diagonal()
    diag = np.where(diag > 0, diag, 1.0)
    precond = sparse.diags(1.0 / diag)
    x, info = cg(A, rhs, rtol=tol, atol=0.0, maxiter=max_iter, M=precond)
    res = float(np.linalg.norm(A @ x - rhs))
    if info != 0 and res > tol * rhs_norm:
        raise SolverError(
            f"alpha solve did not converge: residual {res:.3e} vs "
            f"tolerance {tol * rhs_norm:.3e} after {max_iter} iterations"
        )
    x = x - x.mean()
    alpha = np.zeros(D.grid.shape)
    alpha[D.mask.data] = x
    return ScalarField(D.grid, alpha)


def alignment_functional(alpha: ScalarField, D: TensorImage) -> float:
    """Direct evaluation of F(alpha) = sum w ||grad alpha - 2 nabla_V V||^2_gtilde."""
    _, _, _, extras = assemble_alpha_system(D)
    G, M, c_stack = extras["G"], extras["M"], extras["c_stack"]
    a = alpha.data[D.mask.data]
    r = G @ a - c_stack
    return float(r @ (M @ r))


def build_connectome_metric(
    D: TensorImage, tol: float = 1e-8, max_iter: int | None = None
) -> ConnectomeMetric:
    """Estimate alpha and assemble g_alpha = exp(alpha) * gtilde."""
    gt = inverse_tensor_metric(D)
    alpha = solve_alpha(D, tol=tol, max_iter=max_iter)
    g_alpha = MetricField(
        D.grid, np.exp(alpha.data)[..., None] * gt.data, spd_flag=True
    )
    return ConnectomeMetric(gt, alpha, g_alpha, D.mask)


class ConformalMetricEstimator(BaseEstimator):
    """Estimator wrapper around connectome-metric construction.

    After ``fit(D)`` the adapted metric is available as ``metric_`` (a
    :class:`ConnectomeMetric`) together with ``alpha_`` and ``g_tilde_``.
    """

    def __init__(self, tol=1e-8, max_iter=None):
        self.tol = tol
        self.max_iter = max_iter

    def fit(self, D: TensorImage, y=None):
        result = build_connectome_metric(D, tol=self.tol, max_iter=self.max_iter)
        self.metric_ = result
        self.alpha_ = result.alpha
        self.g_tilde_ = result.g_tilde
        self.g_alpha_ = result.g_alpha
        return self
