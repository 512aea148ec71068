import numpy as np
import pytest

from metricatlas import (
    Grid,
    MaskField,
    MetricField,
    ScalarField,
    StencilError,
    VectorField,
    christoffel_symbols,
    covariant_derivative_vv,
    riemannian_divergence,
    riemannian_gradient,
)
from metricatlas.operators import masked_partial

from conftest import unit_grid


def quadratic_on(grid):
    c = grid.coords()
    return c[..., 0] ** 2 + 0.5 * c[..., 1] ** 2


class TestMaskedPartial:
    def test_interior_central_exact_on_quadratic(self):
        grid = unit_grid(16)
        f = quadratic_on(grid)
        mask = np.ones(grid.shape, bool)
        d = masked_partial(f, mask, 0, grid.spacing[0])
        want = 2 * grid.coords()[..., 0]
        # central and 3-point one-sided stencils are exact on quadratics
        assert np.allclose(d, want, atol=1e-10)

    def test_one_sided_at_mask_edge(self):
        grid = unit_grid(16)
        f = quadratic_on(grid)
        mask = np.ones(grid.shape, bool)
        mask[:5] = False  # truncate in x: one-sided stencils at row 5
        d = masked_partial(f, mask, 0, grid.spacing[0])
        want = 2 * grid.coords()[..., 0]
        assert np.allclose(d[mask], want[mask], atol=1e-10)

    def test_two_point_fallback_first_order(self):
        grid = unit_grid(16)
        f = quadratic_on(grid)
        mask = np.zeros(grid.shape, bool)
        mask[7:9] = True  # only two rows: 2-point stencils in x
        d = masked_partial(f, mask, 0, grid.spacing[0])
        h = grid.spacing[0]
        want = (f[8] - f[7]) / h
        assert np.allclose(d[7], want)
        assert np.allclose(d[8], want)

    def test_isolated_voxel_policies(self):
        grid = unit_grid(8)
        f = quadratic_on(grid)
        mask = np.zeros(grid.shape, bool)
        mask[4, 4] = True
        with pytest.raises(StencilError):
            masked_partial(f, mask, 0, grid.spacing[0], on_missing="error")
        d = masked_partial(f, mask, 0, grid.spacing[0], on_missing="zero")
        assert d[4, 4] == 0.0


class TestChristoffel:
    def test_flat_metric_vanishes(self, grid16, full16):
        g = MetricField.identity(grid16)
        ch = christoffel_symbols(g, full16)
        assert np.allclose(ch.data, 0.0, atol=1e-12)

    def test_conformal_hand_values(self):
        # g = e^{2f} I with f = 0.1 x: Gamma^1_11 = 0.1, Gamma^1_22 = -0.1,
        # Gamma^2_12 = 0.1
        grid = unit_grid(32)
        f = 0.1 * grid.coords()[..., 0]
        mats = np.exp(2 * f)[..., None, None] * np.eye(2)
        g = MetricField.from_matrices(grid, mats)
        ch = christoffel_symbols(g, MaskField.full(grid)).data
        interior = (slice(2, -2), slice(2, -2))
        h = grid.spacing[0]
        tol = 5 * h**2
        assert np.allclose(ch[interior][..., 0, 0, 0], 0.1, atol=tol)
        assert np.allclose(ch[interior][..., 0, 1, 1], -0.1, atol=tol)
        assert np.allclose(ch[interior][..., 1, 0, 1], 0.1, atol=tol)

    def test_symmetry_in_lower_indices(self, rng, grid16, full16):
        from conftest import random_spd_field

        g = random_spd_field(grid16, rng, smooth=2)
        ch = christoffel_symbols(g, full16).data
        assert np.allclose(ch, np.swapaxes(ch, -1, -2), atol=1e-12)


class TestCovariantDerivative:
    def test_constant_field_flat_metric(self, grid16, full16):
        V = VectorField(grid16, np.broadcast_to([0.3, -0.4], grid16.shape + (2,)).copy())
        out = covariant_derivative_vv(V, MetricField.identity(grid16), full16)
        assert np.allclose(out.data, 0.0, atol=1e-12)

    def test_rotational_centripetal(self):
        # V = (-y, x)/r around a center outside the domain, so r stays
        # bounded away from zero: nabla_V V = -(x, y)/r^2
        grid = unit_grid(48)
        center = (-0.6, -0.55)
        c = grid.coords()
        x = c[..., 0] - center[0]
        y = c[..., 1] - center[1]
        r = np.hypot(x, y)
        V = VectorField(grid, np.stack([-y / r, x / r], axis=-1))
        out = covariant_derivative_vv(V, MetricField.identity(grid), MaskField.full(grid))
        want = -np.stack([x, y], axis=-1) / (r**2)[..., None]
        assert np.abs(out.data - want).max() < 5e-3

    def test_second_order_convergence(self):
        center = (-0.6, -0.55)

        def max_err(n):
            grid = unit_grid(n)
            c = grid.coords()
            x = c[..., 0] - center[0]
            y = c[..., 1] - center[1]
            r = np.hypot(x, y)
            V = VectorField(grid, np.stack([-y / r, x / r], axis=-1))
            out = covariant_derivative_vv(
                V, MetricField.identity(grid), MaskField.full(grid)
            )
            want = -np.stack([x, y], axis=-1) / (r**2)[..., None]
            return np.abs(out.data - want).max()

        assert max_err(48) / max_err(96) > 3.0


class TestDivergenceGradient:
    def test_euclidean_divergence_linear_field(self, grid16, full16):
        c = grid16.coords()
        X = VectorField(grid16, np.stack([c[..., 0], c[..., 1]], axis=-1))
        div = riemannian_divergence(X, MetricField.identity(grid16), full16)
        assert np.allclose(div.data, 2.0, atol=1e-10)

    def test_gradient_inverts_metric(self, grid16, full16):
        c = grid16.coords()
        alpha = ScalarField(grid16, 2 * c[..., 0] + 3 * c[..., 1])
        mats = np.tile(np.diag([4.0, 1.0]), grid16.shape + (1, 1))
        g = MetricField.from_matrices(grid16, mats)
        grad = riemannian_gradient(alpha, g, full16)
        assert np.allclose(grad.data[..., 0], 0.5, atol=1e-10)
        assert np.allclose(grad.data[..., 1], 3.0, atol=1e-10)

    def test_divergence_of_gradient_matches_laplacian(self):
        # Euclidean sanity: div grad (x^2 + y^2) = 4
        grid = unit_grid(24)
        c = grid.coords()
        alpha = ScalarField(grid, c[..., 0] ** 2 + c[..., 1] ** 2)
        g = MetricField.identity(grid)
        mask = MaskField.full(grid)
        lap = riemannian_divergence(riemannian_gradient(alpha, g, mask), g, mask)
        assert np.allclose(lap.data, 4.0, atol=1e-8)
