import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fpat.geometry import AngularFlux, build_angular_grid, build_grid
from fpat.transport import (
    RteProblem,
    SolverError,
    SolveStats,
    apply_A,
    apply_A_tilde,
    apply_K,
    hg_kernel,
    hg_raw,
    inner_x,
    solve_adjoint_rte,
    solve_rte,
)


def test_isotropic_kernel_is_uniform():
    k = hg_kernel(0.0, build_angular_grid(16))
    assert np.allclose(k.entries, 1 / (2 * np.pi), atol=1e-15)


def test_raw_hg_value_at_right_angle():
    assert hg_raw(0.9, 0.0) == pytest.approx(0.19 / (2 * np.pi * 1.81), abs=1e-15)
    assert hg_raw(0.9, 0.0) == pytest.approx(0.016707, abs=1e-6)


@pytest.mark.parametrize("g", [0.0, 0.5, 0.9])
@pytest.mark.parametrize("n", [16, 32, 64])
def test_kernel_rows_normalized(g, n):
    k = hg_kernel(g, build_angular_grid(n))
    assert np.max(np.abs(k.entries @ k.angles.weights - 1.0)) < 1e-12


def test_kernel_rejects_bad_g():
    with pytest.raises(ValueError):
        hg_kernel(1.0, build_angular_grid(8))


def test_K_preserves_isotropic_and_zero(rng):
    grid = build_grid(20.0, 8, 8)
    ang = build_angular_grid(16)
    k = hg_kernel(0.9, ang)
    c = rng.uniform(0, 1, grid.n_cells)
    iso = AngularFlux(np.repeat(c[:, None], 16, axis=1), grid, ang)
    assert np.allclose(apply_K(iso, k).values, iso.values, atol=1e-14)
    assert np.all(apply_K(np.zeros((grid.n_cells, 16)), k) == 0)


def test_K_isotropic_kernel_gives_angular_mean(rng):
    ang = build_angular_grid(16)
    phi = rng.standard_normal((5, 16))
    out = apply_K(phi, hg_kernel(0.0, ang))
    mean = np.array([sum(row) / 16 for row in phi.tolist()])
    assert np.allclose(out, mean[:, None], atol=1e-14)


def test_angular_operators(rng):
    grid = build_grid(20.0, 8, 8)
    ang = build_angular_grid(16)
    phi = AngularFlux(rng.standard_normal((grid.n_cells, 16)), grid, ang)
    direct = np.array([sum(v * 2 * np.pi / 16 for v in row) for row in phi.values.tolist()])
    assert np.allclose(apply_A(phi).values, direct, atol=1e-13)
    assert np.allclose(apply_A_tilde(phi).values, apply_A(phi).values / (2 * np.pi), atol=1e-15)
    const = AngularFlux(np.full((grid.n_cells, 16), 0.7), grid, ang)
    assert np.allclose(apply_A_tilde(const).values, 0.7)


def _problem(n=16, nd=8, g=0.9, rng=None, q=None, q_b=None, mu_a=None, mu_s=None):
    grid = build_grid(20.0, n, n)
    ang = build_angular_grid(nd)
    rng = rng or np.random.default_rng(0)
    mu_a = rng.uniform(0.02, 0.1, grid.n_cells) if mu_a is None else mu_a
    mu_s = rng.uniform(0.5, 2.0, grid.n_cells) if mu_s is None else mu_s
    return RteProblem(grid, ang, mu_a, mu_s, hg_kernel(g, ang), q, q_b)


def test_zero_sources_give_zero():
    p = _problem()
    assert np.all(solve_rte(p).values == 0)
    assert np.all(solve_adjoint_rte(p).values == 0)


def test_problem_validation():
    p = _problem()
    n, nb = p.grid.n_cells, p.grid.boundary.size
    with pytest.raises(ValueError):
        RteProblem(p.grid, p.angles, -p.mu_a, p.mu_s, p.kernel)
    with pytest.raises(ValueError):
        RteProblem(p.grid, p.angles, p.mu_a, p.mu_s, p.kernel, q=np.ones((n, 3)))
    with pytest.raises(ValueError):
        RteProblem(p.grid, p.angles, p.mu_a, p.mu_s, p.kernel, q_b=np.ones((nb + 1, 8)))


def _solutions_agree(p):
    ref = solve_rte(p, tol=1e-12, method="source_iteration", max_sweeps=5000).values
    for method in ("bicgstab", "gmres"):
        sol = solve_rte(p, tol=1e-11, method=method).values
        assert np.linalg.norm(sol - ref) <= 1e-8 * np.linalg.norm(ref)


def test_solver_methods_agree(rng):
    grid = build_grid(20.0, 16, 16)
    q = rng.uniform(0, 1, (grid.n_cells, 8))
    q_b = rng.uniform(0, 1, (grid.boundary.size, 8))
    _solutions_agree(_problem(rng=rng, q=q, q_b=q_b))


def test_solution_satisfies_discrete_equation(rng):
    # the converged flux is a fixed point of one sweep against its own scattering
    from fpat.transport import transport_sweep

    p = _problem(rng=rng)
    grid = p.grid
    q = rng.uniform(0, 1, (grid.n_cells, 8))
    q_b = rng.uniform(0, 1, (grid.boundary.size, 8))
    p = RteProblem(grid, p.angles, p.mu_a, p.mu_s, p.kernel, q, q_b)
    phi = solve_rte(p, tol=1e-12).values
    src = (p.mu_s[:, None] * apply_K(phi, p.kernel) + q).T
    again = transport_sweep(grid, p.angles, p.mu_a + p.mu_s, src, q_b.T).T
    assert np.linalg.norm(again - phi) <= 1e-10 * np.linalg.norm(phi)


def test_nonconvergence_raises():
    grid = build_grid(20.0, 16, 16)
    p = _problem(q=np.ones((grid.n_cells, 8)), mu_a=np.full(grid.n_cells, 0.01),
                 mu_s=np.full(grid.n_cells, 5.0))
    with pytest.raises(SolverError) as err:
        solve_rte(p, tol=1e-12, max_sweeps=3, method="source_iteration")
    assert err.value.iterations == 3


def test_stats_record_sweeps(rng):
    grid = build_grid(20.0, 16, 16)
    stats = SolveStats()
    solve_rte(_problem(rng=rng, q=np.ones((grid.n_cells, 8))), stats=stats)
    assert stats.sweeps > 0 and stats.residuals[-1] < 1e-9


def test_warm_start_reduces_work(rng):
    grid = build_grid(20.0, 24, 24)
    p = _problem(n=24, rng=rng, q=np.ones((grid.n_cells, 8)))
    phi = solve_rte(p, tol=1e-10)
    cold, warm = SolveStats(), SolveStats()
    solve_rte(p, tol=1e-10, stats=cold)
    solve_rte(p, tol=1e-10, stats=warm, initial_guess=phi)
    assert warm.sweeps < cold.sweeps


def beer_lambert_error(n, mu_a=0.04):
    """Max relative error along a collimated beam travelling in +x."""
    grid = build_grid(20.0, n, n)
    ang = build_angular_grid(16)
    q_b = np.zeros((grid.boundary.size, 16))
    iy, ix = grid.ij[grid.boundary].T
    left_open = (ix == 0) | (grid.index[iy, np.maximum(ix - 1, 0)] < 0)
    q_b[left_open, 0] = 1.0  # direction 0 is exactly (1, 0)
    p = RteProblem(grid, ang, np.full(grid.n_cells, mu_a), np.zeros(grid.n_cells),
                   hg_kernel(0.0, ang), q_b=q_b)
    phi = solve_rte(p, tol=1e-13).values[:, 0]
    row = np.flatnonzero(grid.ij[:, 0] == n // 2)
    x = grid.x[row]
    entry = x.min() - grid.hx / 2  # distance from the entry face
    exact = np.exp(-mu_a * (x - entry))
    return float(np.max(np.abs(phi[row] - exact) / exact))


def test_beer_lambert_first_order():
    e32, e64 = beer_lambert_error(32), beer_lambert_error(64)
    assert e64 < e32
    assert 1.6 <= e32 / e64 <= 2.4


def test_monotone_in_absorption(rng):
    grid = build_grid(20.0, 16, 16)
    q_b = rng.uniform(0, 1, (grid.boundary.size, 8))
    mu1 = rng.uniform(0.01, 0.05, grid.n_cells)
    mu2 = mu1 + rng.uniform(0, 0.05, grid.n_cells)
    mu_s = rng.uniform(0.5, 2, grid.n_cells)
    p1 = _problem(q_b=q_b, mu_a=mu1, mu_s=mu_s)
    p2 = _problem(q_b=q_b, mu_a=mu2, mu_s=mu_s)
    phi1, phi2 = solve_rte(p1, tol=1e-12).values, solve_rte(p2, tol=1e-12).values
    assert np.all(phi1 >= phi2 - 1e-10)
    assert np.all(phi2 >= -1e-12)


@given(seed=st.integers(0, 2**31 - 1), g=st.sampled_from([0.0, 0.5, 0.9]))
@settings(max_examples=10, deadline=None)
def test_adjoint_identity(seed, g):
    rng = np.random.default_rng(seed)
    p = _problem(n=12, g=g, rng=rng)
    u = rng.standard_normal((p.grid.n_cells, 8))
    v = rng.standard_normal((p.grid.n_cells, 8))
    pu = RteProblem(p.grid, p.angles, p.mu_a, p.mu_s, p.kernel, q=u)
    pv = RteProblem(p.grid, p.angles, p.mu_a, p.mu_s, p.kernel, q=v)
    lhs = inner_x(solve_adjoint_rte(pu, tol=1e-12).values, v, p.grid, p.angles)
    rhs = inner_x(u, solve_rte(pv, tol=1e-12).values, p.grid, p.angles)
    assert lhs == pytest.approx(rhs, rel=1e-6, abs=1e-10)


def test_adjoint_inherits_reflection_symmetry():
    grid = build_grid(20.0, 16, 16)
    ang = build_angular_grid(8)
    iy, ix = grid.ij.T
    mirror = grid.index[grid.ny - 1 - iy, ix]  # y -> -y
    mu_a = 0.02 + 0.01 * grid.x**2 / 400 + 0.01 * grid.y**2 / 400
    q = np.exp(-((grid.x - 5) ** 2 + grid.y**2) / 20)
    p = RteProblem(grid, ang, mu_a, np.full(grid.n_cells, 1.5), hg_kernel(0.9, ang), q=q)
    psi = solve_adjoint_rte(p, tol=1e-12).values
    flip = (-np.arange(8)) % 8  # theta_j -> reflected about the x axis
    assert np.allclose(psi[mirror][:, flip], psi, rtol=1e-8, atol=1e-12)
