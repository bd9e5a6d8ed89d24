"""Structural checks asserted on computed states.

Every accepted continuation state is pushed through the same battery:

* integral identity: the integral of e^f u_i against omega0 equals
  deg(E)/r - d_i (the trace-free equation integrated against the area form);
* pointwise curvature inequality: e^f |u|^2 - lap(|u|^2)/2 <= |u| |s|,
  with |u|^2 = sum u_i^2 and |s| the pointwise Euclidean norm of the
  trace-free densities;
* trace constraint sum_i u_i = 0;
* cone margin at or above its floor;
* maximum-point witnesses: the Laplacian of f is nonpositive (up to
  discretization slack) at the argmax of f, and the product bound
  e^(lambda max f) a0 <= prod_i (1/r - e^(max f) u_i + (1-t) alpha0) holds
  there.

Inequalities are asserted on converged solution states only; on arbitrary
iterates the records are informational.  All checks are pure functions of
the state, so recomputing a record from a persisted state reproduces it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import random_band_limited
from .model import (
    ConeViolationError,
    CurvatureData,
    DemaillyParams,
    State,
    cone_margin,
    state_distance,
)
from .solvers import (
    HelmholtzError,
    MaxIterationsError,
    NewtonReport,
    NoDescentError,
    newton_at_t,
    solve_t0,
)

IDENTITY_TOL = 1e-6
TRACE_TOL = 1e-10
UY_BASE_TOL = 1e-8
ARGMAX_SLACK_TOL = 1e-6
AMGM_REL_TOL = 1e-8


def check_integral_identity(
    state: State, curv: CurvatureData, mu: float = 1.0
) -> np.ndarray:
    """Per-summand error |integral(e^(mu f) u_i omega0) - (deg(E)/r - d_i)|."""
    grid = state.grid
    r = state.rank
    d = float(sum(curv.degrees))
    weight = np.exp(mu * state.f)
    errors = np.empty(r)
    for i in range(r):
        target = d / r - float(curv.degrees[i])
        errors[i] = abs(grid.integrate(weight * state.u[i]) - target)
    return errors


def check_uy_inequality(state: State, curv: CurvatureData, mu: float = 1.0) -> float:
    """Max over the grid of e^(mu f)|u|^2 - lap(|u|^2)/2 - |u| |s|.

    Nonpositive (up to discretization) on solution states; equality holds on
    the constant branch.  The value is reported regardless of sign.
    """
    grid = state.grid
    u_sq = np.sum(state.u**2, axis=0)
    lhs = np.exp(mu * state.f) * u_sq - 0.5 * grid.laplacian(u_sq)
    rhs = np.sqrt(u_sq) * curv.s_pointwise_norm
    return float(np.max(lhs - rhs))


def check_bounds(state: State, params: DemaillyParams) -> dict:
    """Extremal-point records for a converged solution state.

    Returns max e^(lambda f), min/max of f, the Laplacian slack at the
    argmax of f together with its scale, and the relative excess of the
    product bound at that point (negative excess means the bound holds
    strictly).
    """
    grid = state.grid
    r = state.rank
    lam, alpha0 = params.lam, params.alpha0
    lap_f = grid.laplacian(state.f)
    idx = np.unravel_index(np.argmax(state.f), state.f.shape)
    f_max = float(state.f[idx])
    slack = float(lap_f[idx])
    slack_scale = 1.0 + grid.sup(lap_f)
    lhs = float(np.exp(lam * f_max) * params.require_a0()[idx])
    factors = 1.0 / r - np.exp(f_max) * state.u[(slice(None),) + idx] + (
        1.0 - state.t
    ) * alpha0
    rhs = float(np.prod(factors))
    return {
        "max_exp_lambda_f": float(np.exp(lam * np.max(state.f))),
        "min_f": float(np.min(state.f)),
        "max_f": f_max,
        "argmax_slack": slack,
        "argmax_slack_scale": slack_scale,
        "amgm_excess": (lhs - rhs) / abs(rhs),
    }


@dataclass(frozen=True)
class DiagnosticsRecord:
    """One state's measured quantities, thresholds, and verdicts.

    Pass/fail is a pure function of the recorded values and thresholds;
    ``failed`` lists the names of the checks that missed their bound.
    """

    t: float
    identity_errors: tuple[float, ...]
    uy_violation: float
    trace_sup: float
    cone_margin: float
    min_f: float
    max_f: float
    max_exp_lambda_f: float
    argmax_slack: float
    amgm_excess: float
    identity_tol: float
    uy_tol: float
    trace_tol: float
    cone_floor: float
    argmax_slack_tol: float
    amgm_tol: float
    failed: tuple[str, ...]

    @property
    def passed(self) -> bool:
        return not self.failed

    def to_dict(self) -> dict:
        return {
            "t": self.t,
            "identity_errors": list(self.identity_errors),
            "uy_violation": self.uy_violation,
            "trace_sup": self.trace_sup,
            "cone_margin": self.cone_margin,
            "min_f": self.min_f,
            "max_f": self.max_f,
            "max_exp_lambda_f": self.max_exp_lambda_f,
            "argmax_slack": self.argmax_slack,
            "amgm_excess": self.amgm_excess,
            "thresholds": {
                "identity": self.identity_tol,
                "uy": self.uy_tol,
                "trace": self.trace_tol,
                "cone_floor": self.cone_floor,
                "argmax_slack": self.argmax_slack_tol,
                "amgm": self.amgm_tol,
            },
            "failed": list(self.failed),
            "passed": self.passed,
        }


def run_diagnostics(
    state: State, curv: CurvatureData, params: DemaillyParams
) -> DiagnosticsRecord:
    """Full battery on one state, with the standard thresholds."""
    identity = check_integral_identity(state, curv, params.mu)
    uy = check_uy_inequality(state, curv, params.mu)
    s_sup = float(np.max(curv.s_pointwise_norm))
    uy_tol = UY_BASE_TOL * (1.0 + s_sup**2)
    trace = state.trace_sup()
    margin = cone_margin(state, params)
    bounds = check_bounds(state, params)
    slack_tol = ARGMAX_SLACK_TOL * bounds["argmax_slack_scale"]
    floor = params.cone_floor_value
    failed = []
    if float(np.max(identity)) > IDENTITY_TOL:
        failed.append("integral_identity")
    if uy > uy_tol:
        failed.append("uy_inequality")
    if trace > TRACE_TOL:
        failed.append("trace_constraint")
    if margin < floor:
        failed.append("cone_margin")
    if bounds["argmax_slack"] > slack_tol:
        failed.append("argmax_slack")
    if bounds["amgm_excess"] > AMGM_REL_TOL:
        failed.append("amgm_bound")
    return DiagnosticsRecord(
        t=state.t,
        identity_errors=tuple(float(e) for e in identity),
        uy_violation=uy,
        trace_sup=trace,
        cone_margin=margin,
        min_f=bounds["min_f"],
        max_f=bounds["max_f"],
        max_exp_lambda_f=bounds["max_exp_lambda_f"],
        argmax_slack=bounds["argmax_slack"],
        amgm_excess=bounds["amgm_excess"],
        identity_tol=IDENTITY_TOL,
        uy_tol=uy_tol,
        trace_tol=TRACE_TOL,
        cone_floor=floor,
        argmax_slack_tol=slack_tol,
        amgm_tol=AMGM_REL_TOL,
        failed=tuple(failed),
    )


@dataclass
class MultistartResult:
    """Outcome of the repeated-initialization uniqueness experiment."""

    max_gap: float
    n_converged: int
    n_failed: int
    reports: list[NewtonReport]


def multistart_uniqueness(
    curv: CurvatureData,
    params: DemaillyParams,
    k: int,
    seed: int = 0,
    amplitude: float = 0.1,
) -> MultistartResult:
    """Solve at t=0 from k admissible starts and measure the spread.

    The first start is the constructed t=0 state; the rest add band-limited
    perturbations of sup amplitude up to ``amplitude`` to f and to each twist
    log (trace-projected), resampling any draw that leaves the cone.  Returns
    the max pairwise sup distance between converged solutions; starts that
    fail to converge are counted separately, since non-convergence is not a
    uniqueness violation.
    """
    if k < 2:
        raise ValueError("at least two starts are required")
    base, params = solve_t0(curv, params)
    grid = curv.grid
    r = curv.rank
    rng = np.random.default_rng(seed)
    floor = params.cone_floor_value
    starts = [base]
    attempts = 0
    while len(starts) < k:
        attempts += 1
        if attempts > 200 * k:
            raise RuntimeError("could not draw enough admissible starts")
        amp = rng.uniform(0.2 * amplitude, amplitude)
        df = random_band_limited(grid, rng, kmax=3, amplitude=amp)
        du = np.stack(
            [random_band_limited(grid, rng, kmax=3, amplitude=amp) for _ in range(r)]
        )
        du -= np.mean(du, axis=0)
        cand = State(grid, base.f + df, base.u + du, 0.0)
        if cone_margin(cand, params) >= floor:
            starts.append(cand)
    solutions = []
    reports = []
    n_failed = 0
    for start in starts:
        try:
            sol, rep = newton_at_t(start, 0.0, curv, params)
        except (ConeViolationError, NoDescentError, MaxIterationsError, HelmholtzError):
            n_failed += 1
            continue
        solutions.append(sol)
        reports.append(rep)
    max_gap = 0.0
    for i in range(len(solutions)):
        for j in range(i + 1, len(solutions)):
            max_gap = max(max_gap, state_distance(solutions[i], solutions[j]))
    return MultistartResult(max_gap, len(solutions), n_failed, reports)
