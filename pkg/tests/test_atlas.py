"""Groupwise atlas construction: objective monotonicity and fixed points."""

import numpy as np
import pytest

from metricatlas import (
    AtlasConfig,
    ConnectomeMetric,
    Diffeomorphism,
    MaskField,
    MetricAtlasError,
    MetricField,
    RegistrationConfig,
    ScalarField,
    atlas_build,
    finalize_atlas_alpha,
    frechet_mean,
    warp_mask,
)
from metricatlas.atlas import EbinAtlas

from conftest import random_spd_field, unit_grid


def as_subject(g, mask):
    """Wrap a metric field as a single-subject estimation result."""
    zero = ScalarField.zeros(g.grid)
    return ConnectomeMetric(g_tilde=g, alpha=zero, g_alpha=g, mask=mask)


def small_config(outer=3, inner=1):
    return AtlasConfig(
        outer_iterations=outer,
        inner_matching_iterations=inner,
        registration=RegistrationConfig(
            lam=100.0, epsilon=1.0, max_iter=1, epsilon_policy="energy-adaptive"
        ),
    )


class TestWarpMask:
    def test_identity_preserves_mask(self, grid16):
        data = np.zeros(grid16.shape, bool)
        data[4:12, 4:12] = True
        mask = MaskField(grid16, data)
        out = warp_mask(mask, Diffeomorphism.identity(grid16))
        assert np.array_equal(out.data, mask.data)

    def test_translation_shifts_mask(self, grid16):
        data = np.zeros(grid16.shape, bool)
        data[4:12, 4:12] = True
        mask = MaskField(grid16, data)
        h = grid16.spacing[0]
        # phi(x) = x + 2h e_x; warped(x) = mask(phi(x)), so the block moves -x
        u = np.broadcast_to([2 * h, 0.0], grid16.shape + (2,)).copy()
        out = warp_mask(mask, Diffeomorphism.from_displacement(grid16, u))
        assert np.array_equal(out.data[2:10, 4:12], np.ones((8, 8), bool))
        assert not out.data[11:, :].any()


class TestAtlasBuild:
    def test_needs_two_subjects(self, rng, grid16, full16):
        g = random_spd_field(grid16, rng)
        with pytest.raises(MetricAtlasError):
            atlas_build([as_subject(g, full16)], small_config())

    def test_identical_subjects_fixed_point(self, rng, grid16, full16):
        g = random_spd_field(grid16, rng, scale=0.2, smooth=2)
        subs = [as_subject(MetricField(grid16, g.data.copy(), spd_flag=True), full16)
                for _ in range(3)]
        res = atlas_build(subs, small_config(outer=3, inner=1))
        assert np.allclose(res.atlas.data, g.data, atol=1e-10)
        for phi in res.diffeomorphisms:
            assert np.abs(phi.displacement.data).max() < 1e-8
        assert res.objective_trace[-1] == pytest.approx(0.0, abs=1e-8)

    def test_zero_inner_iterations_is_frechet_mean(self, rng, grid16, full16):
        gs = [random_spd_field(grid16, rng, scale=0.3) for _ in range(4)]
        subs = [as_subject(g, full16) for g in gs]
        res = atlas_build(subs, small_config(outer=2, inner=0))
        ref = frechet_mean(gs, full16)
        assert np.array_equal(res.atlas.data, ref.data)
        assert np.array_equal(res.union_mask.data, full16.data)

    def test_objective_non_increasing(self, rng):
        grid = unit_grid(24)
        mask = MaskField.full(grid)
        gs = [random_spd_field(grid, rng, scale=0.2, smooth=3) for _ in range(3)]
        subs = [as_subject(g, mask) for g in gs]
        res = atlas_build(subs, small_config(outer=6, inner=1))
        tr = res.objective_trace
        assert len(tr) == 6
        for i in range(1, len(tr)):
            assert tr[i] <= tr[i - 1] * (1 + 1e-9)

    def test_estimator_wrapper(self, rng, grid16, full16):
        g = random_spd_field(grid16, rng, scale=0.2, smooth=2)
        subs = [as_subject(g, full16) for _ in range(2)]
        est = EbinAtlas(outer_iterations=2, inner_matching_iterations=0).fit(subs)
        assert np.allclose(est.atlas_.data, g.data, atol=1e-10)
        assert len(est.diffeomorphisms_) == 2


class TestFinalize:
    def test_identity_metric_gives_zero_alpha(self, grid16, full16):
        # isotropic atlas: eigenvector field unreliable everywhere, rhs = 0
        atlas = MetricField.identity(grid16)
        cm = finalize_atlas_alpha(atlas, full16)
        assert np.abs(cm.alpha.data).max() < 1e-10
        assert np.allclose(cm.g_tilde.data, atlas.data, atol=1e-12)

    def test_tensors_are_inverse_of_atlas(self, rng, grid16, full16):
        atlas = random_spd_field(grid16, rng, scale=0.2, smooth=2)
        cm = finalize_atlas_alpha(atlas, full16)
        prod = cm.g_tilde.as_matrices() @ np.linalg.inv(atlas.as_matrices())
        # g_tilde is the inverse of the tensors, i.e. the atlas metric itself
        assert np.allclose(prod, np.eye(2), atol=1e-8)
