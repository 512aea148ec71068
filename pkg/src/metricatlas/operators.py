"""Masked finite-difference operators on fields.

Second-order central differences in the interior; second-order one-sided
stencils where the mask truncates a neighborhood (falling back to first-order
two-point stencils when only a single masked neighbor exists).
"""

from __future__ import annotations

import numpy as np

from .errors import NotPositiveDefiniteError, StencilError
from .fields import ChristoffelField, MaskField, MetricField, ScalarField, VectorField, volume_density
from .grid import check_same_grid


def _shift(padded: np.ndarray, axis: int, offset: int, core: tuple) -> np.ndarray:
    """View of a 2-padded array shifted by ``offset`` along ``axis``."""
    sl = list(core)
    start, stop = 2 + offset, padded.shape[axis] - 2 + offset
    sl[axis] = slice(start, stop)
    return padded[tuple(sl)]


def masked_partial(
    data: np.ndarray,
    mask: np.ndarray,
    axis: int,
    h: float,
    on_missing: str = "error",
) -> np.ndarray:
    """Partial derivative along ``axis`` using only masked neighbors.

    ``data`` may carry trailing component axes.  The result is zero outside
    the mask.  A masked voxel with no masked neighbor along the axis raises
    StencilError (or yields zero with ``on_missing='zero'``).
    """
    ndim_sp = mask.ndim
    pad_sp = [(2, 2) if a == axis else (0, 0) for a in range(ndim_sp)]
    mp = np.pad(mask, pad_sp, constant_values=False)
    dp = np.pad(data, pad_sp + [(0, 0)] * (data.ndim - ndim_sp))
    core = [slice(None)] * mp.ndim

    m_p1 = _shift(mp, axis, 1, core)
    m_p2 = _shift(mp, axis, 2, core)
    m_m1 = _shift(mp, axis, -1, core)
    m_m2 = _shift(mp, axis, -2, core)

    central = m_p1 & m_m1
    fwd2 = ~central & m_p1 & m_p2
    bwd2 = ~central & ~fwd2 & m_m1 & m_m2
    fwd1 = ~central & ~fwd2 & ~bwd2 & m_p1
    bwd1 = ~central & ~fwd2 & ~bwd2 & ~fwd1 & m_m1
    missing = mask & ~(central | fwd2 | bwd2 | fwd1 | bwd1)
    if np.any(missing):
        if on_missing == "error":
            voxel = tuple(int(i) for i in np.argwhere(missing)[0])
            raise StencilError(
                f"voxel {voxel} has no masked neighbor along axis {axis}"
            )
    core_d = [slice(None)] * dp.ndim
    f0 = _shift(dp, axis, 0, core_d)
    fp1 = _shift(dp, axis, 1, core_d)
    fp2 = _shift(dp, axis, 2, core_d)
    fm1 = _shift(dp, axis, -1, core_d)
    fm2 = _shift(dp, axis, -2, core_d)

    trail = (None,) * (data.ndim - ndim_sp)

    out = np.zeros(data.shape, dtype=float)
    out = np.where((central & mask)[(...,) + trail], (fp1 - fm1) / (2 * h), out)
    out = np.where((fwd2 & mask)[(...,) + trail], (-3 * f0 + 4 * fp1 - fp2) / (2 * h), out)
    out = np.where((bwd2 & mask)[(...,) + trail], (3 * f0 - 4 * fm1 + fm2) / (2 * h), out)
    out = np.where((fwd1 & mask)[(...,) + trail], (fp1 - f0) / h, out)
    out = np.where((bwd1 & mask)[(...,) + trail], (f0 - fm1) / h, out)
    return out


def _metric_inverse(g: MetricField, mask: MaskField) -> np.ndarray:
    mats = g.as_matrices()
    det = np.linalg.det(mats)
    bad = (det <= 0) & mask.data
    if np.any(bad):
        raise NotPositiveDefiniteError(np.argwhere(bad)[0], "metric inverse")
    # identity filler off-mask keeps the inverse defined everywhere
    safe = np.where(mask.data[..., None, None], mats, np.eye(g.grid.dim))
    return np.linalg.inv(safe)


def christoffel_symbols(g: MetricField, mask: MaskField) -> ChristoffelField:
    """Connection coefficients of a metric field.

    Gamma^k_ij = 1/2 g^{kl} (d_i g_jl + d_j g_il - d_l g_ij), with masked
    finite differences.  Zero for constant metrics.
    """
    grid = check_same_grid(g, mask)
    n = grid.dim
    mats = g.as_matrices()
    # D[..., a, i, j] = d_a g_ij
    D = np.stack(
        [masked_partial(mats, mask.data, a, grid.spacing[a]) for a in range(n)],
        axis=-3,
    )
    # T[..., l, i, j] = d_i g_jl + d_j g_il - d_l g_ij
    T = (
        np.einsum("...ijl->...lij", D)
        + np.einsum("...jil->...lij", D)
        - D
    )
    ginv = _metric_inverse(g, mask)
    gamma = 0.5 * np.einsum("...kl,...lij->...kij", ginv, T)
    gamma[~mask.data] = 0.0
    return ChristoffelField(grid, gamma)


def covariant_derivative_vv(
    V: VectorField,
    g: MetricField,
    mask: MaskField,
    christoffel: ChristoffelField | None = None,
) -> VectorField:
    """(nabla_V V)^k = V^i d_i V^k + Gamma^k_ij V^i V^j."""
    grid = check_same_grid(V, g, mask)
    n = grid.dim
    if christoffel is None:
        christoffel = christoffel_symbols(g, mask)
    dV = np.stack(
        [masked_partial(V.data, mask.data, a, grid.spacing[a]) for a in range(n)],
        axis=-2,
    )  # (..., a, k) = d_a V^k
    adv = np.einsum("...i,...ik->...k", V.data, dV)
    curv = np.einsum("...kij,...i,...j->...k", christoffel.data, V.data, V.data)
    out = adv + curv
    out[~mask.data] = 0.0
    return VectorField(grid, out)


def riemannian_divergence(X: VectorField, g: MetricField, mask: MaskField) -> ScalarField:
    """div X = (1/sqrt(det g)) d_i (sqrt(det g) X^i)."""
    grid = check_same_grid(X, g, mask)
    sqrtdet = volume_density(g, mask).data
    flux = sqrtdet[..., None] * X.data
    acc = np.zeros(grid.shape)
    for a in range(grid.dim):
        acc += masked_partial(
            flux[..., a : a + 1], mask.data, a, grid.spacing[a], on_missing="zero"
        )[..., 0]
    out = np.where(mask.data, acc / sqrtdet, 0.0)
    return ScalarField(grid, out)


def riemannian_gradient(alpha: ScalarField, g: MetricField, mask: MaskField) -> VectorField:
    """grad alpha = g^{-1} (d alpha / d x^1, ..., d alpha / d x^n)."""
    grid = check_same_grid(alpha, g, mask)
    d = np.stack(
        [
            masked_partial(
                alpha.data[..., None], mask.data, a, grid.spacing[a], on_missing="zero"
            )[..., 0]
            for a in range(grid.dim)
        ],
        axis=-1,
    )
    ginv = _metric_inverse(g, mask)
    out = np.einsum("...kl,...l->...k", ginv, d)
    out[~mask.data] = 0.0
    return VectorField(grid, out)
