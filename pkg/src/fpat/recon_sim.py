"""Squeeze iterative method (SIM).

Two envelopes bracket ``mu_a_xf``.  Each step solves the excitation RTE at
both envelopes, cross-couples the emission sources (upper coefficient with
lower-envelope excitation flux and vice versa), and applies the fixed-point
map

    F(mu) = ((h* - mu_a_m A phi_m) / (A phi_x) - mu_a_xi) / (1 - eta)

so the lower envelope can only rise and the upper can only fall.  With
several illuminations the ratio becomes the per-cell least-squares fit over
the stacked measurements.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .forward import (
    CoefficientSet,
    MeasurementSet,
    SolverOptions,
    _vals,
    emission_source,
    relative_error,
    solve_emission,
    solve_excitation,
)
from .geometry import ScalarField
from .trace import ReconTrace, TraceRow
from .transport import SolverError

log = logging.getLogger(__name__)

DENOM_FLOOR = 1e-12


@dataclass(frozen=True, eq=False)
class SimState:
    lower: ScalarField
    upper: ScalarField
    iteration: int = 0
    last_rel_change_lower: float = np.inf
    last_rel_change_upper: float = np.inf
    # excitation / emission fluxes from the previous step, reused as solver guesses
    warm: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def midpoint(self) -> ScalarField:
        return ScalarField(0.5 * (self.lower.values + self.upper.values), self.lower.grid)


def initial_state(coeffs: CoefficientSet) -> SimState:
    grid = coeffs.grid
    return SimState(ScalarField.constant(grid, coeffs.c1), ScalarField.constant(grid, coeffs.c2))


def _floored(avg: np.ndarray) -> np.ndarray:
    return np.maximum(avg, DENOM_FLOOR * avg.max())


def _envelope_fluxes(state: SimState, coeffs, data, options, warm_start):
    """Angular averages ``A phi`` for both envelopes, per measurement.

    Returns lists ``(Ax_lo, Ax_hi, Am_lo, Am_hi)`` where ``Am_hi`` is the
    emission driven by ``eta * upper * A~phi_x(lower)`` and ``Am_lo`` the
    emission driven by ``eta * lower * A~phi_x(upper)``.
    """
    w = coeffs.angles.weights
    lo, hi = state.lower.values, state.upper.values
    warm = state.warm if warm_start else {}
    new_warm = {}
    out = ([], [], [], [])
    for s, q_b in enumerate(data.sources):
        px_lo = solve_excitation(lo, coeffs, q_b, options, warm.get(("x_lo", s)))
        px_hi = solve_excitation(hi, coeffs, q_b, options, warm.get(("x_hi", s)))
        pm_hi = solve_emission(emission_source(hi, coeffs, px_lo), coeffs, options, warm.get(("m_hi", s)))
        pm_lo = solve_emission(emission_source(lo, coeffs, px_hi), coeffs, options, warm.get(("m_lo", s)))
        new_warm.update({("x_lo", s): px_lo, ("x_hi", s): px_hi, ("m_hi", s): pm_hi, ("m_lo", s): pm_lo})
        for lst, phi in zip(out, (px_lo, px_hi, pm_lo, pm_hi)):
            lst.append(phi.values @ w)
    return out, new_warm


def _project(old: SimState, raw_lo, raw_hi, coeffs, envelope: bool):
    if envelope:
        lo = np.maximum(old.lower.values, raw_lo)
        hi = np.minimum(old.upper.values, raw_hi)
    else:
        lo, hi = raw_lo, raw_hi
    lo = np.clip(lo, coeffs.c1, coeffs.c2)
    hi = np.clip(hi, coeffs.c1, coeffs.c2)
    crossed = lo > hi
    if np.any(crossed):
        # collapse crossed cells to one value that keeps both envelopes monotone
        mid = 0.5 * (lo + hi)
        if envelope:
            mid = np.clip(mid, old.lower.values, old.upper.values)
        lo = np.where(crossed, mid, lo)
        hi = np.where(crossed, mid, hi)
    return lo, hi


def _advance(state, coeffs, lo, hi, warm) -> SimState:
    grid = coeffs.grid
    rel_lo = np.linalg.norm(lo - state.lower.values) / np.linalg.norm(state.lower.values)
    rel_hi = np.linalg.norm(hi - state.upper.values) / np.linalg.norm(state.upper.values)
    return SimState(
        ScalarField(lo, grid),
        ScalarField(hi, grid),
        state.iteration + 1,
        float(rel_lo),
        float(rel_hi),
        warm,
    )


def sim_step(
    state: SimState,
    coeffs: CoefficientSet,
    data: MeasurementSet,
    options: SolverOptions = SolverOptions(),
    envelope: bool = True,
    warm_start: bool = True,
) -> SimState:
    """One SIM update from a single measurement."""
    if len(data) != 1:
        raise ValueError("sim_step takes exactly one measurement; use sim_step_multi")
    (ax_lo, ax_hi, am_lo, am_hi), warm = _envelope_fluxes(state, coeffs, data, options, warm_start)
    h = _vals(data.data[0])
    eta, mu_xi, mu_am = coeffs.eta.values, coeffs.mu_a_xi.values, coeffs.mu_a_m.values
    raw_lo = ((h - mu_am * am_hi[0]) / _floored(ax_lo[0]) - mu_xi) / (1.0 - eta)
    raw_hi = ((h - mu_am * am_lo[0]) / _floored(ax_hi[0]) - mu_xi) / (1.0 - eta)
    lo, hi = _project(state, raw_lo, raw_hi, coeffs, envelope)
    return _advance(state, coeffs, lo, hi, warm)


def stacked_update(h_list, am_list, ax_list, coeffs: CoefficientSet) -> np.ndarray:
    """Per-cell least-squares fixed-point map over stacked measurements."""
    num = np.zeros(coeffs.grid.n_cells)
    den = np.zeros(coeffs.grid.n_cells)
    mu_am = coeffs.mu_a_m.values
    for h, am, ax in zip(h_list, am_list, ax_list):
        ax = _floored(ax)
        num += ax * (h - mu_am * am)
        den += ax * ax
    return (num / den - coeffs.mu_a_xi.values) / (1.0 - coeffs.eta.values)


def sim_step_multi(
    state: SimState,
    coeffs: CoefficientSet,
    data: MeasurementSet,
    options: SolverOptions = SolverOptions(),
    envelope: bool = True,
    warm_start: bool = True,
) -> SimState:
    """SIM update using all measurements through the stacked normal equations."""
    (ax_lo, ax_hi, am_lo, am_hi), warm = _envelope_fluxes(state, coeffs, data, options, warm_start)
    h = [_vals(d) for d in data.data]
    raw_lo = stacked_update(h, am_hi, ax_lo, coeffs)
    raw_hi = stacked_update(h, am_lo, ax_hi, coeffs)
    lo, hi = _project(state, raw_lo, raw_hi, coeffs, envelope)
    return _advance(state, coeffs, lo, hi, warm)


@dataclass
class ReconResult:
    mu: ScalarField
    trace: ReconTrace
    converged: bool
    status: str = ""
    upper: ScalarField | None = None
    midpoint: ScalarField | None = None
    solves: int = 0


def envelope_gap(state: SimState) -> float:
    grid = state.lower.grid
    diff = state.upper.values - state.lower.values
    return float(np.sqrt(grid.cell_area * np.dot(diff, diff)))


def run_sim(
    coeffs: CoefficientSet,
    data: MeasurementSet,
    eps1: float = 1e-3,
    max_iter: int = 50,
    mu_true=None,
    options: SolverOptions = SolverOptions(),
    envelope: bool = True,
    phase: str | None = None,
    state: SimState | None = None,
    on_step=None,
) -> ReconResult:
    """Iterate SIM until both envelopes change by less than ``eps1`` (relative).

    Returns the lower envelope; ``upper`` and ``midpoint`` are attached to the
    result.  Reaching ``max_iter`` first is reported via ``converged=False``;
    a transport failure ends the run with status ``"solver_error"`` and the
    last completed envelopes.
    """
    if not eps1 > 0:
        raise ValueError("eps1 must be positive")
    step = sim_step if len(data) == 1 else sim_step_multi
    state = state or initial_state(coeffs)
    trace = ReconTrace()
    start = time.perf_counter()
    solves = 0
    converged = False
    failed = False
    for _ in range(max_iter):
        try:
            state = step(state, coeffs, data, options, envelope)
        except SolverError as exc:
            # keep the last completed envelopes
            log.warning("SIM step %d failed: %s", state.iteration + 1, exc)
            failed = True
            break
        solves += 4 * len(data)
        trace.append(
            TraceRow(
                iter=state.iteration,
                eps_f=None if mu_true is None else relative_error(state.lower, mu_true),
                envelope_gap=envelope_gap(state),
                wall_ms=1e3 * (time.perf_counter() - start),
                phase=phase,
                solves=solves,
            )
        )
        if on_step is not None:
            on_step(state)
        if state.last_rel_change_lower < eps1 and state.last_rel_change_upper < eps1:
            converged = True
            break
    status = "solver_error" if failed else ("converged" if converged else "max_iter")
    log.debug("SIM stopped after %d iterations (%s)", state.iteration, status)
    return ReconResult(
        mu=state.lower,
        trace=trace,
        converged=converged,
        status=status,
        upper=state.upper,
        midpoint=state.midpoint,
        solves=solves,
    )
