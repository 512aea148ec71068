import numpy as np
import pytest

from metricatlas import Grid, MaskField, MetricField


def unit_grid(n: int, dim: int = 2) -> Grid:
    """Grid whose full-mask Riemann sum of 1 equals exactly 1."""
    return Grid((n,) * dim, (1.0 / n,) * dim)


def random_spd_field(grid, rng, scale=1.0, smooth=0) -> MetricField:
    """Random SPD metric field A A^T + I, optionally smoothed per component."""
    n = grid.dim
    A = rng.standard_normal(grid.shape + (n, n)) * scale
    if smooth:
        from scipy.ndimage import gaussian_filter

        for i in range(n):
            for j in range(n):
                A[..., i, j] = gaussian_filter(A[..., i, j], smooth)
    mats = A @ np.swapaxes(A, -1, -2) + np.eye(n)
    return MetricField.from_matrices(grid, mats)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def grid16():
    return unit_grid(16)


@pytest.fixture
def full16(grid16):
    return MaskField.full(grid16)
