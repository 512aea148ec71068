"""Closed-form Ebin (DeWitt) geometry on fields of SPD matrices.

The pointwise nature of the Ebin metric reduces geodesics and distances
between metric fields to per-voxel computations on SPD matrices; integrals
over the domain are masked Riemann sums with weight equal to the cell volume.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NotPositiveDefiniteError
from .fields import EPS_PD, MaskField, MetricField, volume_density
from .grid import check_same_grid

#: per-voxel angle below which the conformal (kappa = 0) branch is taken
KAPPA_ZERO = 1e-12


@dataclass
class GeodesicCoefficients:
    """Per-voxel quantities defining the minimal Ebin path between two metrics.

    ``k`` is log(g0^-1 g1) computed through the symmetric similarity
    g0^-1/2 log(g0^-1/2 g1 g0^-1/2) g0^1/2; ``k0`` its traceless part;
    ``a``, ``b`` the quartic roots of the endpoint determinants and ``kappa``
    the per-voxel angle sqrt(n Tr(k0^2)) / 4.
    """

    grid: object
    k: np.ndarray       # (*shape, n, n), not symmetric in general
    k0: np.ndarray      # traceless part of k
    a: np.ndarray       # (*shape,)
    b: np.ndarray
    kappa: np.ndarray
    # internals reused by the geodesic formula
    _g0_half: np.ndarray = None
    _eigvecs: np.ndarray = None   # eigenvectors of g0^-1/2 g1 g0^-1/2
    _logw: np.ndarray = None      # log-eigenvalues of the same
    _trk: np.ndarray = None
    _g0_mats: np.ndarray = None
    _g1_mats: np.ndarray = None

    @property
    def theta(self) -> np.ndarray:
        """min(pi, kappa), the angle entering the distance integrand."""
        return np.minimum(self.kappa, np.pi)


def _spd_eigh(mats, mask, what):
    w, v = np.linalg.eigh(mats)
    bad = (w[..., 0] <= 0) & mask
    if np.any(bad):
        raise NotPositiveDefiniteError(np.argwhere(bad)[0], what)
    return np.maximum(w, EPS_PD), v


def compute_coefficients(
    g0: MetricField, g1: MetricField, mask: MaskField
) -> GeodesicCoefficients:
    grid = check_same_grid(g0, g1, mask)
    n = grid.dim
    m0 = g0.as_matrices()
    m1 = g1.as_matrices()
    w0, v0 = _spd_eigh(m0, mask.data, "geodesic source metric")
    w1, _ = _spd_eigh(m1, mask.data, "geodesic target metric")

    g0_half = np.einsum("...ij,...j,...kj->...ik", v0, np.sqrt(w0), v0)
    g0_ihalf = np.einsum("...ij,...j,...kj->...ik", v0, 1.0 / np.sqrt(w0), v0)
    ghat = g0_ihalf @ m1 @ g0_ihalf
    ghat = 0.5 * (ghat + np.swapaxes(ghat, -1, -2))
    w, u = np.linalg.eigh(ghat)
    w = np.maximum(w, EPS_PD)
    logw = np.log(w)
    trk = logw.sum(axis=-1)

    logA = np.einsum("...ij,...j,...kj->...ik", u, logw, u)
    k = g0_ihalf @ logA @ g0_half
    k0 = k - (trk / n)[..., None, None] * np.eye(n)

    a = np.prod(w0, axis=-1) ** 0.25
    b = np.prod(w1, axis=-1) ** 0.25
    tr_k0sq = np.maximum((logw**2).sum(axis=-1) - trk**2 / n, 0.0)
    kappa = np.sqrt(n * tr_k0sq) / 4.0
    return GeodesicCoefficients(
        grid, k, k0, a, b, kappa,
        _g0_half=g0_half, _eigvecs=u, _logw=logw, _trk=trk,
        _g0_mats=m0, _g1_mats=m1,
    )


def ebin_geodesic(
    g0: MetricField,
    g1: MetricField,
    t: float,
    mask: MaskField,
    coeffs: GeodesicCoefficients | None = None,
) -> MetricField:
    """Evaluate the minimal Ebin path between two SPD fields at time t.

    Voxels with kappa >= pi pass through degenerate matrices at interior
    times; when that happens the result carries ``spd_flag=False``.
    """
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    grid = check_same_grid(g0, g1, mask)
    if t == 0.0:
        return MetricField(grid, g0.data.copy(), spd_flag=True)
    n = grid.dim
    c = coeffs if coeffs is not None else compute_coefficients(g0, g1, mask)
    a, b, kappa = c.a, c.b, c.kappa

    q = 1.0 + t * (b * np.cos(kappa) - a) / a
    r = t * b * np.sin(kappa) / a

    small = kappa < KAPPA_ZERO
    big = kappa >= np.pi
    mid = ~small & ~big

    out = np.empty_like(c._g0_mats)

    # conformal branch: g = q^(4/n) g0
    s_small = np.abs(q) ** (4.0 / n)
    out = s_small[..., None, None] * c._g0_mats

    # generic branch: g = (q^2+r^2)^(2/n) g0 exp(arctan2(r,q)/kappa * k0)
    if np.any(mid):
        kap = np.where(mid, kappa, 1.0)
        angle = np.arctan2(r, q) / kap
        scale = (q**2 + r**2) ** (2.0 / n) * np.exp(-angle * c._trk / n)
        powed = np.exp(angle[..., None] * c._logw)
        expm = np.einsum("...ij,...j,...kj->...ik", c._eigvecs, powed, c._eigvecs)
        g_mid = scale[..., None, None] * (c._g0_half @ expm @ c._g0_half)
        out = np.where(mid[..., None, None], g_mid, out)

    # degenerate branch: two cone segments through the zero metric
    if np.any(big):
        tstar = a / (a + b)
        base0 = np.maximum(1.0 - (a + b) / a * t, 0.0) ** (4.0 / n)
        base1 = np.maximum((a + b) / b * t - a / b, 0.0) ** (4.0 / n)
        g_big = np.where(
            (t <= tstar)[..., None, None],
            base0[..., None, None] * c._g0_mats,
            base1[..., None, None] * c._g1_mats,
        )
        out = np.where(big[..., None, None], g_big, out)

    # any masked voxel on the degenerate branch passes through the cone at
    # an interior time, so the whole field is flagged for re-projection
    spd = not (0.0 < t < 1.0 and bool(np.any(big & mask.data)))
    return MetricField.from_matrices(grid, out, spd_flag=spd)


def ebin_distance(
    g0: MetricField,
    g1: MetricField,
    mask: MaskField,
    coeffs: GeodesicCoefficients | None = None,
) -> float:
    """Geodesic distance of the Ebin metric between two SPD fields.

    dist^2 = (16/n) * integral of a^2 - 2ab cos(min(pi, kappa)) + b^2.
    """
    grid = check_same_grid(g0, g1, mask)
    c = coeffs if coeffs is not None else compute_coefficients(g0, g1, mask)
    integrand = c.a**2 - 2.0 * c.a * c.b * np.cos(c.theta) + c.b**2
    total = integrand[mask.data].sum() * grid.cell_volume
    return float(np.sqrt(np.maximum(16.0 / grid.dim * total, 0.0)))


def ebin_inner_product(
    g: MetricField, h: MetricField, k: MetricField, mask: MaskField
) -> float:
    """G_g(h, k) = integral of Tr(g^-1 h g^-1 k) vol(g) over the mask."""
    grid = check_same_grid(g, h, k, mask)
    gm = g.as_matrices()
    det = np.linalg.det(gm)
    bad = (det <= 0) & mask.data
    if np.any(bad):
        raise NotPositiveDefiniteError(np.argwhere(bad)[0], "Ebin inner product")
    safe = np.where(mask.data[..., None, None], gm, np.eye(grid.dim))
    ginv = np.linalg.inv(safe)
    tr = np.einsum("...ij,...jk,...kl,...li->...", ginv, h.as_matrices(), ginv, k.as_matrices())
    vals = tr * np.sqrt(np.abs(det))
    return float(vals[mask.data].sum() * grid.cell_volume)


def frechet_mean(metrics, mask: MaskField) -> MetricField:
    """Fréchet mean of SPD fields by iterative geodesic marching.

    Seeds with the first metric and steps a fraction 1/(i+1) along the
    geodesic to each remaining input; deterministic given the input order.
    """
    metrics = list(metrics)
    if not metrics:
        raise ValueError("frechet_mean needs at least one metric")
    check_same_grid(*metrics, mask)
    acc = metrics[0]
    for i, g in enumerate(metrics[1:], start=1):
        acc = ebin_geodesic(acc, g, 1.0 / (i + 1), mask)
    return acc
