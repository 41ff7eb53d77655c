"""Hybrid reconstruction: a loose SIM phase followed by BB optimization."""

from __future__ import annotations

from dataclasses import dataclass

from .forward import CoefficientSet, MeasurementSet, SolverOptions
from .recon_opt import StepSearchError, run_opt
from .recon_sim import ReconResult, run_sim
from .trace import ReconTrace


@dataclass(frozen=True)
class HybridConfig:
    eps1: float = 1e-2  # SIM relative-change tolerance
    eps2: float = 1e-12  # objective tolerance
    eps3: float = 1e-12  # gradient-norm tolerance
    sim_max_iter: int = 50
    opt_max_iter: int = 50
    total_budget: int = 50
    variant: str = "BB1"
    envelope: bool = True

    def __post_init__(self):
        if min(self.eps1, self.eps2, self.eps3) <= 0:
            raise ValueError("tolerances must be positive")
        if min(self.sim_max_iter, self.opt_max_iter, self.total_budget) < 0:
            raise ValueError("iteration caps must be non-negative")
        if self.sim_max_iter + self.opt_max_iter < self.total_budget:
            raise ValueError(
                "sim_max_iter + opt_max_iter cannot reach total_budget "
                f"({self.sim_max_iter} + {self.opt_max_iter} < {self.total_budget})"
            )


def run_hybrid(
    coeffs: CoefficientSet,
    data: MeasurementSet,
    config: HybridConfig = HybridConfig(),
    mu_true=None,
    options: SolverOptions = SolverOptions(),
) -> ReconResult:
    """SIM until both envelopes settle to ``eps1`` (or its cap), then optimize.

    The optimization phase starts from the SIM lower envelope and gets the
    remainder of ``total_budget``.  The merged trace numbers iterations
    cumulatively and tags each row with its phase.
    """
    sim = run_sim(
        coeffs,
        data,
        eps1=config.eps1,
        max_iter=min(config.sim_max_iter, config.total_budget),
        mu_true=mu_true,
        options=options,
        envelope=config.envelope,
        phase="sim",
    )
    n_sim = len(sim.trace)
    remaining = min(config.opt_max_iter, config.total_budget - n_sim)
    mu0 = sim.mu
    flags = [] if sim.status in ("converged", "max_iter") else [f"sim:{sim.status}"]

    try:
        opt = run_opt(
            mu0,
            coeffs,
            data,
            eps1=config.eps2,
            eps2=config.eps3,
            max_iter=remaining,
            mu_true=mu_true,
            options=options,
            variant=config.variant,
            phase="opt",
        )
    except StepSearchError as exc:
        opt = exc.partial
        flags.append("opt:step_search")

    trace = ReconTrace(list(sim.trace.rows))
    offset_ms = sim.trace.rows[-1].wall_ms if n_sim else 0.0
    for row in opt.trace:
        row.iter += n_sim
        row.solves += sim.solves
        row.wall_ms += offset_ms
        trace.append(row)
    status = ";".join(flags) if flags else opt.status
    return ReconResult(
        mu=opt.mu,
        trace=trace,
        converged=opt.converged and not flags,
        status=status,
        upper=sim.upper,
        midpoint=sim.midpoint,
        solves=sim.solves + opt.solves,
    )
