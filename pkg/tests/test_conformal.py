"""Conformal-factor estimation: eigenvector fields and the Poisson solve."""

import numpy as np
import pytest
from scipy.ndimage import gaussian_filter

from metricatlas import (
    Grid,
    MaskField,
    ScalarField,
    TensorImage,
    VectorField,
    alignment_functional,
    build_connectome_metric,
    inverse_tensor_metric,
    principal_eigenvector_field,
    solve_alpha,
)
from metricatlas.conformal import ConformalMetricEstimator, assemble_alpha_system
from metricatlas.fields import pack_sym

from conftest import unit_grid


def constant_tensor_image(grid, mat, mask=None):
    mask = mask or MaskField.full(grid)
    data = np.tile(pack_sym(mat[None])[0], grid.shape + (1,))
    return TensorImage(grid, data, mask)


def circular_image(n=64, iso=True):
    """Tangential field of concentric circles around an off-domain center."""
    grid = unit_grid(n)
    c = grid.coords()
    cx, cy = 1.3, -0.4
    x = c[..., 0] - cx
    y = c[..., 1] - cy
    r = np.hypot(x, y)
    mask = MaskField(grid, (r > 0.7) & (r < 1.3))
    V = np.stack([-y / r, x / r], axis=-1)
    vv = np.einsum("...i,...j->...ij", V, V)
    eye = np.eye(2)
    lam_inv = 1.0 if iso else 1.0 / 6.0
    D = vv + lam_inv * (eye - vv) if not iso else np.tile(eye, grid.shape + (1, 1))
    D = np.where(mask.data[..., None, None], D, eye)
    return TensorImage(grid, pack_sym(D), mask), VectorField(grid, V), r


class TestInverseMetric:
    def test_product_is_identity(self, rng):
        grid = unit_grid(6)
        A = rng.standard_normal(grid.shape + (2, 2))
        mats = A @ np.swapaxes(A, -1, -2) + np.eye(2)
        D = TensorImage(grid, pack_sym(mats), MaskField.full(grid))
        gt = inverse_tensor_metric(D)
        prod = gt.as_matrices() @ mats
        assert np.allclose(prod, np.eye(2), atol=1e-12)


class TestPrincipalEigenvectors:
    def test_constant_tensor_sign_consistent(self):
        grid = unit_grid(8)
        D = constant_tensor_image(grid, np.diag([6.0, 1.0]))
        V, reliable = principal_eigenvector_field(D)
        assert reliable.data.all()
        assert np.allclose(V.data, [1.0, 0.0])

    def test_unit_norm_on_mask(self):
        D, _, _ = circular_image(32, iso=False)
        V, reliable = principal_eigenvector_field(D)
        norms = np.linalg.norm(V.data, axis=-1)
        assert np.allclose(norms[reliable.data], 1.0, atol=1e-12)

    def test_tie_marked_unreliable(self):
        grid = unit_grid(8)
        D = constant_tensor_image(grid, np.eye(2))
        _, reliable = principal_eigenvector_field(D)
        assert not reliable.data.any()

    def test_flood_fill_no_sign_flips(self):
        D, V_true, _ = circular_image(48, iso=False)
        V, reliable = principal_eigenvector_field(D)
        dots = np.einsum("...i,...i->...", V.data, V_true.data)
        sel = reliable.data
        # one global sign, no flips inside the connected band
        assert (np.all(dots[sel] > 0.99)) or (np.all(dots[sel] < -0.99))


class TestAlphaSolve:
    def test_zero_rhs_gives_zero_alpha(self):
        grid = unit_grid(16)
        D = constant_tensor_image(grid, np.diag([6.0, 1.0]))
        alpha = solve_alpha(D)
        assert np.abs(alpha.data).max() < 1e-10

    def test_normal_equation_residual(self):
        D, _, _ = circular_image(48, iso=False)
        A, rhs, _, _ = assemble_alpha_system(D)
        alpha = solve_alpha(D)
        x = alpha.data[D.mask.data]
        res = np.linalg.norm(A @ x - rhs)
        assert res <= 1e-7 * np.linalg.norm(rhs)

    def test_system_self_adjoint(self):
        D, _, _ = circular_image(32, iso=False)
        A, _, _, _ = assemble_alpha_system(D)
        asym = abs(A - A.T).max()
        assert asym < 1e-10

    def test_circular_field_matches_log_solution(self):
        # tangential circular V: grad alpha = 2 nabla_V V is solved exactly
        # by alpha = -2 log r + const, for any anisotropy of the tensors
        D, _, r = circular_image(96, iso=False)
        alpha = solve_alpha(D)
        sel = D.mask.data
        exact = -2.0 * np.log(r[sel])
        exact -= exact.mean()
        got = alpha.data[sel] - alpha.data[sel].mean()
        assert np.abs(got - exact).max() < 5e-3 * np.abs(exact).max() + 5e-3

    def test_functional_decreases_on_cubic(self):
        import metricatlas as ma

        spec = ma.CubicFamilySpec(ma.synthetic.default_grid(48), ratio_mode="eigenvalue")
        D = ma.make_tensor_image(spec)
        alpha = solve_alpha(D)
        f0 = alignment_functional(ScalarField.zeros(D.grid), D)
        f1 = alignment_functional(alpha, D)
        assert f1 < f0

    def test_first_order_optimality(self, rng):
        D, _, _ = circular_image(32, iso=False)
        alpha = solve_alpha(D)
        f_star = alignment_functional(alpha, D)
        for _ in range(20):
            delta = rng.standard_normal(D.grid.shape)
            delta = gaussian_filter(delta, 2)
            delta -= delta[D.mask.data].mean()
            delta *= 1e-3 / np.abs(delta).max()
            pert = ScalarField(D.grid, alpha.data + delta)
            assert f_star <= alignment_functional(pert, D) + 1e-12


class TestConnectomeMetric:
    def test_zero_alpha_reduces_to_inverse_metric(self):
        grid = unit_grid(16)
        D = constant_tensor_image(grid, np.diag([4.0, 1.0]))
        cm = build_connectome_metric(D)
        assert np.abs(cm.alpha.data).max() < 1e-10
        assert np.allclose(cm.g_alpha.data, cm.g_tilde.data, atol=1e-10)

    def test_determinant_identity(self):
        D, _, _ = circular_image(32, iso=False)
        cm = build_connectome_metric(D)
        det_t = np.linalg.det(cm.g_tilde.as_matrices())
        det_a = np.linalg.det(cm.g_alpha.as_matrices())
        n = D.grid.dim
        want = np.exp(n * cm.alpha.data) * det_t
        assert np.allclose(det_a, want, rtol=1e-10)

    def test_estimator_wrapper(self):
        D, _, _ = circular_image(24, iso=False)
        est = ConformalMetricEstimator().fit(D)
        assert est.metric_.g_alpha is est.g_alpha_
        assert est.get_params()["tol"] == 1e-8
