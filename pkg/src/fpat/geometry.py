"""Phase-space discretization: a Cartesian grid masked to a disc, and an
equally spaced ordinate set on the unit circle.

Field containers (``ScalarField``, ``AngularFlux``) are thin wrappers that
pair a NumPy array with the grid it lives on.  Solvers work on the raw
arrays; the wrappers exist so shapes are checked at module boundaries.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np


@dataclass(frozen=True, eq=False)
class Grid:
    """Cartesian cells of ``[-radius, radius]^2`` whose centers lie in the disc.

    Cells are numbered row by row (``y`` slowest, ``x`` fastest) over the
    active set only; ``index[iy, ix]`` maps back, ``-1`` marking inactive cells.
    """

    radius: float
    nx: int
    ny: int
    hx: float
    hy: float
    index: np.ndarray  # (ny, nx) int64
    centers: np.ndarray  # (n_cells, 2)
    ij: np.ndarray  # (n_cells, 2) as (iy, ix)
    boundary: np.ndarray  # indices of boundary cells
    normals: np.ndarray  # (n_boundary, 2) outward unit normals
    boundary_slot: np.ndarray  # (n_cells,) position in ``boundary`` or -1

    @property
    def n_cells(self) -> int:
        return self.centers.shape[0]

    @property
    def cell_area(self) -> float:
        return self.hx * self.hy

    @property
    def x(self) -> np.ndarray:
        return self.centers[:, 0]

    @property
    def y(self) -> np.ndarray:
        return self.centers[:, 1]

    @cached_property
    def sweep_tables(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Cell orderings and upwind neighbours for the four travel quadrants.

        Quadrant ``q = (cx > 0) + 2 * (cy > 0)``; each returned array has shape
        ``(4, n_cells)``.  ``up_x[q, c]`` is the active cell one step against
        the x-component of travel, or ``-1``.
        """
        iy, ix = self.ij[:, 0], self.ij[:, 1]
        order = np.empty((4, self.n_cells), dtype=np.int64)
        up_x = np.empty_like(order)
        up_y = np.empty_like(order)
        for q in range(4):
            sx = 1 if q & 1 else -1
            sy = 1 if q & 2 else -1
            ux, uy = ix - sx, iy - sy
            ok_x = (ux >= 0) & (ux < self.nx)
            ok_y = (uy >= 0) & (uy < self.ny)
            up_x[q] = np.where(ok_x, self.index[iy, np.clip(ux, 0, self.nx - 1)], -1)
            up_y[q] = np.where(ok_y, self.index[np.clip(uy, 0, self.ny - 1), ix], -1)
            order[q] = np.lexsort((sx * ix, sy * iy))
        return order, up_x, up_y

    def same_as(self, other: "Grid") -> bool:
        return (
            self is other
            or (self.radius, self.nx, self.ny) == (other.radius, other.nx, other.ny)
        )

    def nearest_cells(self, points: np.ndarray) -> np.ndarray:
        """Active cell index nearest to each ``(x, y)`` point."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        ix = np.clip(np.floor((points[:, 0] + self.radius) / self.hx), 0, self.nx - 1)
        iy = np.clip(np.floor((points[:, 1] + self.radius) / self.hy), 0, self.ny - 1)
        out = self.index[iy.astype(int), ix.astype(int)].copy()
        missing = np.flatnonzero(out < 0)
        for k in missing:
            d2 = np.sum((self.centers - points[k]) ** 2, axis=1)
            out[k] = int(np.argmin(d2))
        return out


def build_grid(radius: float, nx: int, ny: int) -> Grid:
    if not radius > 0:
        raise ValueError(f"radius must be positive, got {radius}")
    if nx < 4 or ny < 4:
        raise ValueError(f"grid too coarse: nx={nx}, ny={ny} (need >= 4)")
    hx = 2.0 * radius / nx
    hy = 2.0 * radius / ny
    xc = -radius + hx * (np.arange(nx) + 0.5)
    yc = -radius + hy * (np.arange(ny) + 0.5)
    X, Y = np.meshgrid(xc, yc)  # (ny, nx)
    mask = X**2 + Y**2 < radius**2

    index = np.full((ny, nx), -1, dtype=np.int64)
    iy, ix = np.nonzero(mask)  # row-major order
    index[iy, ix] = np.arange(iy.size)
    centers = np.column_stack([X[iy, ix], Y[iy, ix]])

    padded = np.pad(mask, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    on_edge = mask & ~interior
    boundary = index[on_edge]
    boundary.sort()
    normals = centers[boundary] / np.linalg.norm(centers[boundary], axis=1)[:, None]
    slot = np.full(iy.size, -1, dtype=np.int64)
    slot[boundary] = np.arange(boundary.size)

    for arr in (index, centers, boundary, normals, slot):
        arr.setflags(write=False)
    ij = np.column_stack([iy, ix])
    ij.setflags(write=False)
    return Grid(
        radius=float(radius),
        nx=int(nx),
        ny=int(ny),
        hx=hx,
        hy=hy,
        index=index,
        centers=centers,
        ij=ij,
        boundary=boundary,
        normals=normals,
        boundary_slot=slot,
    )


@dataclass(frozen=True, eq=False)
class AngularGrid:
    n_dir: int
    directions: np.ndarray  # (n_dir, 2)
    weights: np.ndarray  # (n_dir,)
    reverse: np.ndarray  # reverse[j] is the index of -theta_j

    @property
    def angles(self) -> np.ndarray:
        return 2.0 * np.pi * np.arange(self.n_dir) / self.n_dir


def build_angular_grid(n_dir: int) -> AngularGrid:
    if n_dir < 8 or n_dir % 2:
        raise ValueError(f"n_dir must be even and >= 8, got {n_dir}")
    t = 2.0 * np.pi * np.arange(n_dir) / n_dir
    directions = np.column_stack([np.cos(t), np.sin(t)])
    weights = np.full(n_dir, 2.0 * np.pi / n_dir)
    reverse = (np.arange(n_dir) + n_dir // 2) % n_dir
    for arr in (directions, weights, reverse):
        arr.setflags(write=False)
    return AngularGrid(n_dir=n_dir, directions=directions, weights=weights, reverse=reverse)


@dataclass(frozen=True, eq=False)
class ScalarField:
    values: np.ndarray
    grid: Grid = field(repr=False)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.shape != (self.grid.n_cells,):
            raise ValueError(
                f"field has shape {values.shape}, grid has {self.grid.n_cells} cells"
            )
        object.__setattr__(self, "values", values)

    @classmethod
    def constant(cls, grid: Grid, value: float) -> "ScalarField":
        return cls(np.full(grid.n_cells, float(value)), grid)

    @classmethod
    def from_function(cls, grid: Grid, fn) -> "ScalarField":
        return cls(np.asarray(fn(grid.x, grid.y), dtype=float) * np.ones(grid.n_cells), grid)

    def norm(self) -> float:
        """Discrete L2(Omega) norm with cell-area weights."""
        return float(np.sqrt(self.grid.cell_area * np.dot(self.values, self.values)))

    def to_csv(self, path) -> None:
        write_field_csv(path, self)


@dataclass(frozen=True, eq=False)
class AngularFlux:
    values: np.ndarray  # (n_cells, n_dir)
    grid: Grid = field(repr=False)
    angles: AngularGrid = field(repr=False)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        expected = (self.grid.n_cells, self.angles.n_dir)
        if values.shape != expected:
            raise ValueError(f"flux has shape {values.shape}, expected {expected}")
        object.__setattr__(self, "values", values)


def write_field_csv(path, fld: ScalarField) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["x", "y", "value"])
        for (x, y), v in zip(fld.grid.centers, fld.values):
            writer.writerow([repr(float(x)), repr(float(y)), repr(float(v))])


def read_field_csv(path, grid: Grid) -> ScalarField:
    """Read a field written by :func:`write_field_csv` onto ``grid``.

    Rows must match the grid's cell centers in index order.
    """
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if [h.strip() for h in header] != ["x", "y", "value"]:
            raise ValueError(f"{path}: unexpected header {header}")
        rows = np.array([[float(c) for c in row] for row in reader if row])
    if rows.shape != (grid.n_cells, 3):
        raise ValueError(f"{path}: {rows.shape[0]} rows for a {grid.n_cells}-cell grid")
    if not np.allclose(rows[:, :2], grid.centers, atol=1e-9 * grid.radius):
        raise ValueError(f"{path}: cell centers do not match the grid")
    return ScalarField(rows[:, 2], grid)
