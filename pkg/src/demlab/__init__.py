"""Numerical continuation and verification lab for the Demailly system
restricted to direct sums of line bundles on a flat torus."""

from .geometry import (
    Grid,
    GreenKernel,
    ScalarField,
    green_reconstruct,
    greens_kernel,
    make_grid,
    random_band_limited,
    spectral_resample,
)
from .model import (
    BundleSpec,
    ConeViolationError,
    CosineMode,
    CurvatureData,
    DemaillyParams,
    Perturbation,
    State,
    apply_linearization,
    build_curvature,
    cone_factors,
    cone_margin,
    l_inverse,
    residual,
    residual_sup,
    state_distance,
)
from .solvers import (
    HelmholtzError,
    MaxIterationsError,
    NewtonReport,
    NoDescentError,
    PathStallError,
    newton_at_t,
    picard_step,
    solve_helmholtz,
    solve_t0,
    u_step,
    v_step,
)
from .homotopy import MarchReport, MarchStep, closed_form_state, march
from .diagnostics import (
    DiagnosticsRecord,
    MultistartResult,
    check_bounds,
    check_integral_identity,
    check_uy_inequality,
    multistart_uniqueness,
    run_diagnostics,
)

__all__ = [
    "BundleSpec",
    "ConeViolationError",
    "CosineMode",
    "CurvatureData",
    "DemaillyParams",
    "DiagnosticsRecord",
    "GreenKernel",
    "Grid",
    "HelmholtzError",
    "MarchReport",
    "MarchStep",
    "MaxIterationsError",
    "MultistartResult",
    "NewtonReport",
    "NoDescentError",
    "PathStallError",
    "Perturbation",
    "ScalarField",
    "State",
    "apply_linearization",
    "build_curvature",
    "check_bounds",
    "check_integral_identity",
    "check_uy_inequality",
    "closed_form_state",
    "cone_factors",
    "cone_margin",
    "green_reconstruct",
    "greens_kernel",
    "l_inverse",
    "make_grid",
    "march",
    "multistart_uniqueness",
    "newton_at_t",
    "picard_step",
    "random_band_limited",
    "residual",
    "residual_sup",
    "run_diagnostics",
    "solve_helmholtz",
    "solve_t0",
    "spectral_resample",
    "state_distance",
    "u_step",
    "v_step",
]

__version__ = "0.1.0"
