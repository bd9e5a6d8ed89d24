"""March the solution from t=0 to t=1, and the constant-data oracle.

The continuation is a plain predictor-corrector loop: the predictor is the
previous accepted state, the corrector is the damped Newton solve at the new
t.  Failed steps halve the t-increment down to a floor; hitting the floor is
a recorded breakdown, not an error, because losing the cone before t=1 is a
meaningful outcome (it is the expected behaviour for non-ample data).

For wiggle-free specs the whole t-family is known in closed form, which is
the workhorse oracle of the test suite: with d = deg(E) and constant
densities rho_i = d_i/d,

    f(t) = log( prod_i (rho_i + (1-t) alpha0) / prod_i (rho_i + alpha0) ) / lambda,
    u_i(t) = -(rho_i - 1/r) e^(-f(t)),

whose cone factors rho_i + (1-t) alpha0 stay positive on all of [0,1]
exactly when every degree is positive.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np

from .geometry import Grid
from .model import (
    BundleSpec,
    ConeViolationError,
    DemaillyParams,
    State,
    build_curvature,
)
from .diagnostics import DiagnosticsRecord, run_diagnostics
from .solvers import (
    HelmholtzError,
    MaxIterationsError,
    NewtonReport,
    NoDescentError,
    newton_at_t,
    solve_t0,
)

logger = logging.getLogger(__name__)


@dataclass
class MarchStep:
    """One accepted continuation state with its records."""

    t: float
    state: State
    newton: NewtonReport
    diagnostics: DiagnosticsRecord
    wall_seconds: float


@dataclass
class MarchReport:
    """Everything the march produced, breakdown time included."""

    steps: list[MarchStep]
    breakdown_t: float | None
    params: DemaillyParams

    @property
    def accepted_ts(self) -> list[float]:
        return [s.t for s in self.steps]

    @property
    def reached_t1(self) -> bool:
        return self.breakdown_t is None and bool(self.steps) and self.steps[-1].t == 1.0

    @property
    def final_state(self) -> State:
        return self.steps[-1].state

    @property
    def min_f(self) -> float:
        """Smallest value of f over every accepted state."""
        return min(s.diagnostics.min_f for s in self.steps)


def closed_form_state(
    spec: BundleSpec, params: DemaillyParams, grid: Grid, t: float
) -> State:
    """Constant-field solution for wiggle-free data at parameter t.

    Requires every wiggle to vanish and mu = 1; raises when the constant
    branch leaves the cone (some rho_i + (1-t) alpha0 <= 0, which happens
    before t=1 only for non-ample degrees).  Substituting the result into
    the residuals gives zero identically.
    """
    if not spec.is_constant:
        raise ValueError("closed form requires wiggle-free curvature data")
    if params.mu != 1.0:
        raise ValueError("closed form requires mu = 1")
    if params.alpha0 is None:
        raise ValueError("alpha0 not set")
    r = spec.rank
    d = float(spec.degree_sum)
    rho = np.array(spec.degrees, dtype=float) / d
    factors_t = rho + (1.0 - t) * params.alpha0
    factors_0 = rho + params.alpha0
    if np.min(factors_t) <= 0.0:
        raise ConeViolationError(
            f"constant branch leaves the cone at t={t}: min factor {np.min(factors_t):.3e}"
        )
    f_val = float(np.sum(np.log(factors_t)) - np.sum(np.log(factors_0))) / params.lam
    s_const = rho - 1.0 / r
    n = grid.n
    f = np.full((n, n), f_val)
    u = np.repeat(
        (-s_const * np.exp(-f_val))[:, None, None], n, axis=1
    ).repeat(n, axis=2)
    return State(grid, f, u, t)


def march(spec: BundleSpec, params: DemaillyParams, grid: Grid) -> MarchReport:
    """Predictor-corrector continuation from t=0 toward t=1.

    Starts from the exact t=0 construction, advances t by params.dt0,
    correcting with Newton from the previous state; on failure the increment
    halves down to params.dt_floor, and when a step at the floor fails the
    march stops, recording the last accepted t as the breakdown time.  Every
    accepted state passed Newton at tolerance and the full diagnostics
    battery.
    """
    curv = build_curvature(spec, grid)
    t0_state, params = solve_t0(curv, params)
    steps: list[MarchStep] = []

    begin = time.perf_counter()
    state, report = newton_at_t(t0_state, 0.0, curv, params)
    diag = run_diagnostics(state, curv, params)
    if not diag.passed:
        raise RuntimeError(f"t=0 state failed diagnostics: {diag.failed}")
    steps.append(MarchStep(0.0, state, report, diag, time.perf_counter() - begin))

    t = 0.0
    dt = params.dt0
    breakdown = None
    clock = time.perf_counter()
    while t < 1.0:
        t_try = min(t + dt, 1.0)
        outcome = None
        try:
            cand, report = newton_at_t(state, t_try, curv, params)
            diag = run_diagnostics(cand, curv, params)
            if report.converged and diag.passed:
                outcome = (cand, report, diag)
        except (ConeViolationError, NoDescentError, MaxIterationsError, HelmholtzError) as exc:
            logger.debug("step to t=%.6f rejected: %s", t_try, exc)
        if outcome is not None:
            cand, report, diag = outcome
            now = time.perf_counter()
            steps.append(MarchStep(t_try, cand, report, diag, now - clock))
            clock = now
            state, t = cand, t_try
            logger.info(
                "accepted t=%.6f residual=%.2e margin=%.3e iters=%d",
                t, report.final_residual, diag.cone_margin, report.iterations,
            )
        else:
            if dt <= params.dt_floor:
                breakdown = t
                logger.info("breakdown recorded at t*=%.6f", t)
                break
            dt = max(0.5 * dt, params.dt_floor)
    return MarchReport(steps, breakdown, params)
