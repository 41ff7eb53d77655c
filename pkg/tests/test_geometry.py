import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fpat.geometry import (
    AngularFlux,
    ScalarField,
    build_angular_grid,
    build_grid,
    read_field_csv,
    write_field_csv,
)
from fpat.transport import apply_A


def test_too_coarse_grid_rejected():
    with pytest.raises(ValueError):
        build_grid(20.0, 2, 2)


def test_nonpositive_radius_rejected():
    with pytest.raises(ValueError):
        build_grid(0.0, 16, 16)


def test_cell_count_close_to_disc_area():
    grid = build_grid(20.0, 64, 64)
    # direct enumeration of centers inside the disc
    h = 40.0 / 64
    c = -20.0 + h * (np.arange(64) + 0.5)
    X, Y = np.meshgrid(c, c)
    enumerated = int(np.count_nonzero(X**2 + Y**2 < 400.0))
    assert grid.n_cells == enumerated
    assert abs(grid.n_cells - np.pi * 32**2) <= 0.05 * np.pi * 32**2


@given(n=st.integers(4, 60), m=st.integers(4, 60))
@settings(max_examples=25, deadline=None)
def test_boundary_structure(n, m):
    grid = build_grid(20.0, n, m)
    assert np.allclose(np.linalg.norm(grid.normals, axis=1), 1.0)
    assert np.all(grid.x**2 + grid.y**2 < 400.0)
    # every boundary cell touches an inactive cell (or the box edge)
    pad = np.pad(grid.index, 1, constant_values=-1)
    for c in grid.boundary:
        iy, ix = grid.ij[c] + 1
        neigh = [pad[iy - 1, ix], pad[iy + 1, ix], pad[iy, ix - 1], pad[iy, ix + 1]]
        assert min(neigh) < 0
    assert np.array_equal(grid.index[grid.ij[:, 0], grid.ij[:, 1]], np.arange(grid.n_cells))


def test_angular_grid_weights_and_reverse():
    ang = build_angular_grid(16)
    assert ang.weights.sum() == pytest.approx(2 * np.pi, abs=1e-14)
    for j in range(16):
        assert np.allclose(ang.directions[ang.reverse[j]], -ang.directions[j], atol=1e-15)


@pytest.mark.parametrize("n", [7, 6, 0])
def test_angular_grid_rejects_bad_counts(n):
    with pytest.raises(ValueError):
        build_angular_grid(n)


def test_quadrature_exact_for_constants():
    grid = build_grid(20.0, 8, 8)
    ang = build_angular_grid(32)
    phi = AngularFlux(np.full((grid.n_cells, 32), 3.5), grid, ang)
    assert np.allclose(apply_A(phi).values, 2 * np.pi * 3.5, atol=1e-12)


def test_field_shape_checked():
    grid = build_grid(20.0, 8, 8)
    with pytest.raises(ValueError):
        ScalarField(np.zeros(grid.n_cells + 1), grid)


def test_csv_round_trip(tmp_path, rng):
    grid = build_grid(20.0, 12, 10)
    f = ScalarField(rng.standard_normal(grid.n_cells), grid)
    write_field_csv(tmp_path / "f.csv", f)
    g = read_field_csv(tmp_path / "f.csv", grid)
    assert np.array_equal(f.values, g.values)
    assert (tmp_path / "f.csv").read_text().splitlines()[0] == "x,y,value"


def test_csv_grid_mismatch(tmp_path):
    write_field_csv(tmp_path / "f.csv", ScalarField.constant(build_grid(20.0, 12, 12), 1.0))
    with pytest.raises(ValueError):
        read_field_csv(tmp_path / "f.csv", build_grid(20.0, 16, 16))


def test_nearest_cells_hits_own_center():
    grid = build_grid(20.0, 24, 24)
    assert np.array_equal(grid.nearest_cells(grid.centers), np.arange(grid.n_cells))
    # a point outside the active mask still maps to an active cell
    assert grid.nearest_cells([[19.99, 19.99]])[0] >= 0


def test_norm_is_area_weighted():
    grid = build_grid(20.0, 16, 16)
    f = ScalarField.constant(grid, 2.0)
    assert f.norm() == pytest.approx(2.0 * np.sqrt(grid.cell_area * grid.n_cells))
