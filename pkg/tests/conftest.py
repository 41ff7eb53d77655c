import numpy as np
import pytest

from fpat.forward import CoefficientSet, MeasurementSet, boundary_patch_source, forward_map
from fpat.geometry import ScalarField, build_angular_grid, build_grid
from fpat.phantom import C1, C2, SOURCE_POSITIONS, build_phantom
from fpat.transport import hg_kernel


def make_case(n=16, n_dir=8, template=1, n_src=1, g=0.9):
    """Small same-grid problem: grid, angles, phantom coefficients, sources."""
    grid = build_grid(20.0, n, n)
    angles = build_angular_grid(n_dir)
    kernel = hg_kernel(g, angles)
    ph = build_phantom(template, grid)
    coeffs = ph.coefficients(kernel)
    sources = [boundary_patch_source(grid, angles, p) for p in SOURCE_POSITIONS[:n_src]]
    return grid, angles, coeffs, ph, sources


def exact_data(mu, coeffs, sources, options=None):
    kw = {} if options is None else {"options": options}
    return MeasurementSet(sources, forward_map(mu, coeffs, sources, **kw))


def random_coeffs(grid, kernel, rng, c1=C1, c2=C2):
    n = grid.n_cells
    return CoefficientSet(
        ScalarField(rng.uniform(0.01, 0.03, n), grid),
        ScalarField(rng.uniform(0.01, 0.03, n), grid),
        ScalarField(rng.uniform(1.0, 3.0, n), grid),
        ScalarField(rng.uniform(1.0, 3.0, n), grid),
        ScalarField(rng.uniform(0.1, 0.7, n), grid),
        kernel,
        c1,
        c2,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_case():
    return make_case()


# one PASS/FAIL line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def record(criterion, ok, detail, soft=False):
    label = "PASS" if ok else ("INFO" if soft else "FAIL")
    line = f"criterion {criterion}: {label} — {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
