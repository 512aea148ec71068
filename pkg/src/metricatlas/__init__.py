"""Riemannian-metric fields: Ebin geometry, registration, atlas construction."""

from .atlas import AtlasConfig, AtlasResult, EbinAtlas, atlas_build, finalize_atlas_alpha, warp_mask
from .conformal import (
    ConformalMetricEstimator,
    ConnectomeMetric,
    TensorImage,
    alignment_functional,
    build_connectome_metric,
    inverse_tensor_metric,
    principal_eigenvector_field,
    solve_alpha,
)
from .ebin import (
    GeodesicCoefficients,
    compute_coefficients,
    ebin_distance,
    ebin_geodesic,
    ebin_inner_product,
    frechet_mean,
)
from .errors import (
    FileFormatError,
    GridMismatchError,
    MetricAtlasError,
    NotPositiveDefiniteError,
    SolverError,
    StencilError,
)
from .fields import (
    EPS_PD,
    MaskField,
    MetricField,
    ScalarField,
    VectorField,
    ChristoffelField,
    interpolate,
    pointwise_matrix_map,
    spd_project,
    volume_density,
)
from .geodesics import Curve, SeedSpec, curve_deviation, integral_curve, shoot_geodesic
from .grid import Grid
from .mtf import read_header, read_mtf, write_mtf
from .operators import (
    christoffel_symbols,
    covariant_derivative_vv,
    riemannian_divergence,
    riemannian_gradient,
)
from .render import render_figure
from .registration import (
    Diffeomorphism,
    EnergyReport,
    MetricRegistration,
    RegistrationConfig,
    dist_diff,
    energy_gradient,
    information_metric_smooth,
    matching_energy,
    pullback_metric,
    register,
)
from .synthetic import (
    CubicFamilySpec,
    cubic_vector_field,
    example_family,
    make_tensor_image,
    tensors_from_field,
)

__version__ = "0.1.0"
