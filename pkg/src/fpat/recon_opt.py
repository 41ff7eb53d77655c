"""Log-misfit objective, adjoint-state gradient and the Barzilai-Borwein driver.

Objective over ``S`` illuminations, with cell-area weighted L2 norms:

    F(mu) = 1/2 sum_s || log H_s(mu) - log h*_s ||^2

With ``rho = (log h - log h*) / h`` the gradient needs two adjoint solves per
illumination (reversed ordinates, zero data on Gamma_+):

    emission:    L_m^T psi_m = mu_a_m rho
    excitation:  L_x^T psi_x = rho (mu_a_xi + (1 - eta) mu) + eta mu A~psi_m

    grad_mu  = rho (1 - eta) A phi_x + eta (A psi_m)(A~phi_x) - A(psi_x phi_x)
    grad_eta = -rho mu A phi_x + mu (A psi_m)(A~phi_x)

Both are L2(Omega) representatives, i.e. ``dF = <grad, dmu>`` with cell-area
weights.  The excitation adjoint uses the same total absorption as the
forward problem, ``mu_a_xi + mu``.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .forward import (
    TWO_PI,
    CoefficientSet,
    MeasurementSet,
    SolverOptions,
    _solve,
    _vals,
    emission_problem,
    excitation_problem,
    heat,
    relative_error,
    solve_coupled,
)
from .geometry import ScalarField
from .recon_sim import ReconResult
from .transport import SolverError
from .trace import ReconTrace, TraceRow

log = logging.getLogger(__name__)

H_FLOOR = 1e-14


class StepSearchError(RuntimeError):
    """No decreasing first step was found by halving.

    ``partial`` holds the result up to the failure (the last accepted iterate).
    """

    def __init__(self, message: str, partial=None):
        super().__init__(message)
        self.partial = partial


@dataclass
class ObjectiveEval:
    value: float
    residuals: list  # log h_s - log h*_s per measurement
    model: list  # floored model h_s
    fluxes: list  # (phi_x, phi_m) per measurement
    clamped: int = 0  # cells floored before taking logs
    mu: np.ndarray | None = field(default=None, repr=False)


@dataclass
class GradientEval:
    grad_mu: ScalarField
    grad_eta: ScalarField
    adjoints: list = field(default_factory=list, repr=False)


def _floor(h: np.ndarray) -> tuple[np.ndarray, int]:
    lim = H_FLOOR * max(h.max(), 0.0)
    low = h < lim
    if lim == 0.0:
        lim = np.finfo(float).tiny
        low = h < lim
    return np.where(low, lim, h), int(np.count_nonzero(low))


def objective(
    mu,
    coeffs: CoefficientSet,
    data: MeasurementSet,
    options: SolverOptions = SolverOptions(),
    guesses: list | None = None,
) -> ObjectiveEval:
    mu = _vals(mu)
    area = coeffs.grid.cell_area
    total, residuals, model, fluxes, clamped = 0.0, [], [], [], 0
    for s, (q_b, h_star) in enumerate(zip(data.sources, data.data)):
        phi_x, phi_m = solve_coupled(
            mu, coeffs, q_b, options, None if guesses is None else guesses[s]
        )
        h, n_model = _floor(heat(mu, coeffs, phi_x, phi_m).values)
        hs, n_data = _floor(_vals(h_star))
        r = np.log(h) - np.log(hs)
        total += 0.5 * area * float(np.dot(r, r))
        residuals.append(r)
        model.append(h)
        fluxes.append((phi_x, phi_m))
        clamped += n_model + n_data
    if clamped:
        log.warning("clamped %d non-positive h values before taking logs", clamped)
    return ObjectiveEval(total, residuals, model, fluxes, clamped, mu)


def gradient(
    mu,
    coeffs: CoefficientSet,
    data: MeasurementSet,
    ev: ObjectiveEval,
    options: SolverOptions = SolverOptions(),
    guesses: list | None = None,
) -> GradientEval:
    """Adjoint-state gradient of ``F`` with respect to ``mu_a_xf`` and ``eta``."""
    mu = _vals(mu)
    if ev.mu is not None and not np.array_equal(ev.mu, mu):
        raise ValueError("objective evaluation was computed for a different mu")
    w = coeffs.angles.weights
    eta = coeffs.eta.values
    mu_xi, mu_am = coeffs.mu_a_xi.values, coeffs.mu_a_m.values
    g_mu = np.zeros_like(mu)
    g_eta = np.zeros_like(mu)
    adjoints = []
    for s, (r, h, (phi_x, phi_m)) in enumerate(zip(ev.residuals, ev.model, ev.fluxes)):
        rho = r / h
        gm, gx = (None, None) if guesses is None else guesses[s]
        psi_m = _solve(emission_problem(coeffs, rho * mu_am), options, gm, adjoint=True)
        A_psi_m = psi_m.values @ w
        src_x = rho * (mu_xi + (1.0 - eta) * mu) + eta * mu * A_psi_m / TWO_PI
        psi_x = _solve(excitation_problem(mu, coeffs, None, src_x), options, gx, adjoint=True)
        A_phi_x = phi_x.values @ w
        mean_phi_x = A_phi_x / TWO_PI
        g_mu += (
            rho * (1.0 - eta) * A_phi_x
            + eta * A_psi_m * mean_phi_x
            - (psi_x.values * phi_x.values) @ w
        )
        g_eta += -rho * mu * A_phi_x + mu * A_psi_m * mean_phi_x
        adjoints.append((psi_m, psi_x))
    grid = coeffs.grid
    return GradientEval(ScalarField(g_mu, grid), ScalarField(g_eta, grid), adjoints)


def bb_step(mu_k, mu_km1, grad_k, grad_km1, variant: str = "BB1") -> float | None:
    """Barzilai-Borwein steplength; ``None`` when the curvature test fails."""
    s = _vals(mu_k) - _vals(mu_km1)
    y = _vals(grad_k) - _vals(grad_km1)
    sy = float(np.dot(s, y))
    if sy <= 0.0:
        return None
    if variant == "BB1":
        yy = float(np.dot(y, y))
        return sy / yy if yy > 0 else None
    if variant == "BB2":
        return float(np.dot(s, s)) / sy
    raise ValueError(f"unknown BB variant {variant!r}")


def _norm(v: np.ndarray, area: float) -> float:
    return float(np.sqrt(area * np.dot(v, v)))


def run_opt(
    mu0,
    coeffs: CoefficientSet,
    data: MeasurementSet,
    eps1: float = 1e-12,
    eps2: float = 1e-12,
    max_iter: int = 50,
    mu_true=None,
    options: SolverOptions = SolverOptions(),
    variant: str = "BB1",
    step0_scale: float = 1.0,
    max_halvings: int = 30,
    phase: str | None = None,
    warm_start: bool = True,
) -> ReconResult:
    """Projected gradient descent with BB steplengths.

    Stops when ``F < eps1``, ``||grad F|| < eps2`` or after ``max_iter``
    steps.  The first step starts at ``step0_scale * max|mu| / max|grad|``
    and is halved until ``F`` decreases.  ``variant`` is ``"BB1"``, ``"BB2"``
    or ``"alternate"``.  Iterates are projected onto ``[c1, c2]``.
    """
    mu = np.clip(_vals(mu0).copy(), coeffs.c1, coeffs.c2)
    if not np.array_equal(mu, _vals(mu0)):
        raise ValueError("initial guess lies outside [c1, c2]")
    grid = coeffs.grid
    area = grid.cell_area
    S = len(data)
    trace = ReconTrace()
    start = time.perf_counter()
    solves = 0

    def project(v):
        return np.clip(v, coeffs.c1, coeffs.c2)

    def eps_f(v):
        return None if mu_true is None else relative_error(v, mu_true)

    def fwd_guess(e):
        return e.fluxes if warm_start and e is not None else None

    ev = objective(mu, coeffs, data, options)  # a failure here has no iterate to fall back on
    solves += 2 * S
    adj_guess = None
    prev = None  # (mu, grad, step)
    status = "max_iter"
    converged = False
    k = 0
    while True:
        row = TraceRow(iter=k, objective=ev.value, eps_f=eps_f(mu), phase=phase)
        trace.append(row)
        if ev.value < eps1:
            status, converged = "objective", True
            break
        if k >= max_iter:
            break
        try:
            grad = gradient(mu, coeffs, data, ev, options, adj_guess)
        except SolverError as exc:
            log.warning("adjoint solve failed at k=%d: %s", k, exc)
            status = "solver_error"
            break
        solves += 2 * S
        if warm_start:
            adj_guess = [(pm, px) for pm, px in grad.adjoints]
        g = grad.grad_mu.values
        gnorm = _norm(g, area)
        row.grad_norm = gnorm
        if gnorm < eps2:
            status, converged = "gradient", True
            row.solves, row.wall_ms = solves, 1e3 * (time.perf_counter() - start)
            break

        if prev is None:
            step = step0_scale * np.abs(mu).max() / np.abs(g).max()
            for _ in range(max_halvings):
                trial = project(mu - step * g)
                try:
                    ev_new = objective(trial, coeffs, data, options, fwd_guess(ev))
                except SolverError as exc:
                    log.warning("forward solve failed in step search: %s", exc)
                    ev_new = None
                    break
                solves += 2 * S
                if ev_new.value < ev.value:
                    break
                step *= 0.5
            else:
                row.solves, row.wall_ms = solves, 1e3 * (time.perf_counter() - start)
                partial = ReconResult(ScalarField(mu, grid), trace, False, "step_search", solves=solves)
                raise StepSearchError(
                    f"no decrease after {max_halvings} halvings of the first step", partial
                )
        else:
            use = variant
            if variant == "alternate":
                use = "BB1" if k % 2 else "BB2"
            bb = bb_step(mu, prev[0], g, prev[1], use)
            step = bb if bb is not None else 0.5 * prev[2]
            trial = project(mu - step * g)
            try:
                ev_new = objective(trial, coeffs, data, options, fwd_guess(ev))
                solves += 2 * S
            except SolverError as exc:
                log.warning("forward solve failed at k=%d: %s", k, exc)
                ev_new = None
        if ev_new is None:
            status = "solver_error"
            break
        row.solves, row.wall_ms = solves, 1e3 * (time.perf_counter() - start)
        prev = (mu, g, step)
        mu, ev = trial, ev_new
        k += 1

    last = trace.rows[-1]
    if last.solves == 0 or status == "solver_error":
        last.solves, last.wall_ms = solves, 1e3 * (time.perf_counter() - start)
    log.debug("optimization stopped at k=%d (%s), F=%.3e", k, status, ev.value)
    return ReconResult(
        mu=ScalarField(mu, grid),
        trace=trace,
        converged=converged,
        status=status,
        solves=solves,
    )
