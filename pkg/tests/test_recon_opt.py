import numpy as np
import pytest

from fpat.forward import MeasurementSet, SolverOptions, forward_map
from fpat.geometry import ScalarField
from fpat.recon_opt import StepSearchError, bb_step, gradient, objective, run_opt

from conftest import exact_data, make_case

TIGHT = SolverOptions(tol=1e-12)


@pytest.fixture(scope="module")
def case():
    grid, angles, coeffs, ph, sources = make_case(n=16, n_dir=8, n_src=2)
    data = exact_data(ph.mu_a_xf_true, coeffs, sources, TIGHT)
    return coeffs, ph, data


def test_objective_zero_at_truth(case):
    coeffs, ph, data = case
    ev = objective(ph.mu_a_xf_true, coeffs, data, TIGHT)
    assert ev.value < 1e-16
    assert ev.clamped == 0


def test_objective_matches_direct_sum(case, rng):
    coeffs, ph, data = case
    mu = rng.uniform(coeffs.c1, coeffs.c2, coeffs.grid.n_cells)
    ev = objective(mu, coeffs, data, TIGHT)
    model = forward_map(mu, coeffs, data.sources, TIGHT)
    direct = 0.0
    for h, hs in zip(model, data.data):
        direct += 0.5 * coeffs.grid.cell_area * sum(
            (np.log(a) - np.log(b)) ** 2 for a, b in zip(h.values, hs.values)
        )
    assert ev.value == pytest.approx(direct, rel=1e-10)
    stored = 0.5 * coeffs.grid.cell_area * sum(float(r @ r) for r in ev.residuals)
    assert abs(ev.value - stored) <= 1e-12 * max(1.0, ev.value)


def test_objective_scale_invariant(case, rng):
    coeffs, ph, data = case
    mu = rng.uniform(coeffs.c1, coeffs.c2, coeffs.grid.n_cells)
    base = objective(mu, coeffs, data, TIGHT).value
    # scaling the illumination scales every model h; scale the data alike
    scaled = MeasurementSet([q.scaled(3.0) for q in data.sources],
                            [ScalarField(3.0 * h.values, h.grid) for h in data.data])
    assert objective(mu, coeffs, scaled, TIGHT).value == pytest.approx(base, rel=1e-7)


def test_gradient_vanishes_at_exact_fit(case):
    coeffs, ph, data = case
    ev = objective(ph.mu_a_xf_true, coeffs, data, TIGHT)
    g = gradient(ph.mu_a_xf_true, coeffs, data, ev, TIGHT)
    assert np.max(np.abs(g.grad_mu.values)) < 1e-8
    assert np.all(np.isfinite(g.grad_eta.values))


def test_gradient_rejects_stale_eval(case, rng):
    coeffs, ph, data = case
    ev = objective(ph.mu_a_xf_true, coeffs, data, TIGHT)
    with pytest.raises(ValueError):
        gradient(ph.mu_a_xf_true.values * 1.01, coeffs, data, ev, TIGHT)


def test_gradient_finite_differences_small(rng):
    grid, angles, coeffs, ph, sources = make_case(n=16, n_dir=8, n_src=1)
    opts = SolverOptions(tol=1e-11)
    data = exact_data(ph.mu_a_xf_true, coeffs, sources, opts)
    mu = rng.uniform(0.015, 0.035, grid.n_cells)
    ev = objective(mu, coeffs, data, opts)
    g = gradient(mu, coeffs, data, ev, opts)
    delta = 1e-5
    for c in rng.choice(grid.n_cells, 4, replace=False):
        e = np.zeros(grid.n_cells)
        e[c] = delta
        fd = (objective(mu + e, coeffs, data, opts).value
              - objective(mu - e, coeffs, data, opts).value) / (2 * delta)
        assert fd / grid.cell_area == pytest.approx(g.grad_mu.values[c], rel=1e-3)
        eta = coeffs.eta.values
        fp = objective(mu, coeffs.with_eta(eta + e), data, opts).value
        fm = objective(mu, coeffs.with_eta(eta - e), data, opts).value
        assert (fp - fm) / (2 * delta) / grid.cell_area == pytest.approx(
            g.grad_eta.values[c], rel=1e-3)


def test_bb_examples():
    assert bb_step(np.array([1.0, 0]), np.zeros(2), np.array([2.0, 0]), np.zeros(2), "BB1") == 0.5
    assert bb_step(np.array([1.0, 0]), np.zeros(2), np.array([2.0, 0]), np.zeros(2), "BB2") == 0.5
    s = np.array([0.3, -1.2, 2.0])
    for v in ("BB1", "BB2"):
        assert bb_step(s, 0 * s, 4.0 * s, 0 * s, v) == pytest.approx(0.25)
    assert bb_step(np.array([1.0, 0]), np.zeros(2), np.array([0, 1.0]), np.zeros(2), "BB2") is None
    with pytest.raises(ValueError):
        bb_step(s, 0 * s, s, 0 * s, "BB3")


def test_start_at_truth_terminates_immediately(case):
    coeffs, ph, data = case
    res = run_opt(ph.mu_a_xf_true, coeffs, data, eps1=1e-14, options=TIGHT)
    assert len(res.trace) == 1 and res.status == "objective" and res.converged


def test_initial_guess_must_be_feasible(case):
    coeffs, ph, data = case
    with pytest.raises(ValueError):
        run_opt(ScalarField.constant(coeffs.grid, 0.1), coeffs, data)


@pytest.mark.parametrize("variant", ["BB1", "BB2", "alternate"])
def test_descent_and_accounting(variant):
    grid, angles, coeffs, ph, sources = make_case(n=16, n_dir=8, n_src=1)
    data = exact_data(ph.mu_a_xf_true, coeffs, sources)
    mu0 = ScalarField.constant(grid, coeffs.c1)
    res = run_opt(mu0, coeffs, data, max_iter=12, variant=variant, mu_true=ph.mu_a_xf_true)
    F = res.trace.column("objective")
    assert len(res.trace) <= 13
    assert all(b < a for a, b in zip(F[:5], F[1:5]))
    assert np.all(res.mu.values >= coeffs.c1) and np.all(res.mu.values <= coeffs.c2)
    K = res.trace.rows[-1].iter
    # forward pair at every iterate, adjoint pair per step, plus rejected halvings
    extra = res.solves - (4 * K + 2)
    assert extra >= 0 and extra % 2 == 0
    assert res.trace.rows[-1].eps_f < res.trace.rows[0].eps_f


def test_step_search_failure_carries_partial(case):
    coeffs, ph, data = case
    mu0 = ScalarField.constant(coeffs.grid, coeffs.c1)
    with pytest.raises(StepSearchError) as err:
        run_opt(mu0, coeffs, data, max_halvings=0)
    part = err.value.partial
    assert part.status == "step_search" and np.array_equal(part.mu.values, mu0.values)


def test_solver_failure_returns_best_iterate(case, monkeypatch):
    import fpat.recon_opt as ro
    from fpat.transport import SolverError

    coeffs, ph, data = case
    real = ro.objective
    calls = []

    def flaky(*args, **kwargs):
        calls.append(1)
        if len(calls) == 3:
            raise SolverError("injected", 1, 1.0)
        return real(*args, **kwargs)

    monkeypatch.setattr(ro, "objective", flaky)
    mu0 = ScalarField.constant(coeffs.grid, coeffs.c1)
    res = ro.run_opt(mu0, coeffs, data, max_iter=5)
    assert res.status == "solver_error" and not res.converged
    assert res.trace.rows[-1].iter == 1  # one accepted step before the failure
