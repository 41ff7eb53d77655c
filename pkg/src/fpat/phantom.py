"""The two piecewise-constant test templates on the radius-20 disc."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .forward import CoefficientSet
from .geometry import Grid, ScalarField
from .transport import ScatteringMatrix

RADIUS = 20.0
ANISOTROPY = 0.9
SOURCE_POSITIONS = ((20.0, 0.0), (0.0, 20.0), (-20.0, 0.0), (0.0, -20.0))
MU_XF_VALUES = (0.01, 0.02, 0.03, 0.04)
ETA_VALUES = (0.1, 0.5, 0.6, 0.7)

# tight bracket of the true fluorescence absorption range
C1 = 0.01 * (1 - 1e-6)
C2 = 0.04 * (1 + 1e-6)


def _disc(x, y, cx, cy, r):
    return (x - cx) ** 2 + (y - cy) ** 2 <= r * r


def _box(x, y, x0, x1, y0, y1):
    return (x >= x0) & (x <= x1) & (y >= y0) & (y <= y1)


def template_values(template_id: int, x, y, t1_eta_third: str = "omega4"):
    """``(mu_a_xf, eta)`` of a template at points ``(x, y)``.

    ``t1_eta_third`` picks the region carrying ``eta = 0.7`` in template 1:
    ``"omega4"`` (the circle at (0, -6)) or ``"omega5"`` (the ellipse).
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    mu = np.full(np.broadcast(x, y).shape, 0.01)
    eta = np.full_like(mu, 0.1)
    if template_id == 1:
        o1 = _disc(x, y, -10, 8, 4)
        o2 = _disc(x, y, 0, 8, 4)
        o3 = _disc(x, y, -10, -6, 4)
        o4 = _disc(x, y, 0, -6, 4)
        o5 = (x - 10) ** 2 / 16 + (y - 2) ** 2 / 100 <= 1
        mu[o1] = 0.02
        mu[o5] = 0.03
        mu[o4] = 0.04
        eta[o2] = 0.5
        eta[o3] = 0.6
        if t1_eta_third == "omega4":
            eta[o4] = 0.7
        elif t1_eta_third == "omega5":
            eta[o5] = 0.7
        else:
            raise ValueError(f"t1_eta_third must be 'omega4' or 'omega5', got {t1_eta_third!r}")
    elif template_id == 2:
        o1 = _disc(x, y, -10, 4, 5)
        o2 = _box(x, y, 5, 12, 0, 12)
        o3 = _box(x, y, -8, 10, -12, -4)
        mu[o2], mu[o3], mu[o1] = 0.02, 0.03, 0.04
        eta[o2], eta[o3], eta[o1] = 0.5, 0.6, 0.7
    else:
        raise ValueError(f"unknown template id {template_id!r} (expected 1 or 2)")
    return mu, eta


def background_absorption(x, y):
    return 0.02 + 0.01 * np.sin(np.pi * np.asarray(x) / 8)


def background_scattering(x, y):
    return 2.0 + np.sin(np.pi * np.asarray(y) / 8)


@dataclass(frozen=True, eq=False)
class Phantom:
    template_id: int
    mu_a_xf_true: ScalarField
    eta_true: ScalarField
    mu_a_xi: ScalarField
    mu_a_m: ScalarField
    mu_s_x: ScalarField
    mu_s_m: ScalarField

    def coefficients(self, kernel: ScatteringMatrix, c1: float = C1, c2: float = C2) -> CoefficientSet:
        return CoefficientSet(
            self.mu_a_xi, self.mu_a_m, self.mu_s_x, self.mu_s_m, self.eta_true, kernel, c1, c2
        )


def build_phantom(template_id: int, grid: Grid, t1_eta_third: str = "omega4") -> Phantom:
    mu, eta = template_values(template_id, grid.x, grid.y, t1_eta_third)
    absorb = ScalarField(background_absorption(grid.x, grid.y), grid)
    scatter = ScalarField(background_scattering(grid.x, grid.y), grid)
    return Phantom(
        template_id=template_id,
        mu_a_xf_true=ScalarField(mu, grid),
        eta_true=ScalarField(eta, grid),
        mu_a_xi=absorb,
        mu_a_m=absorb,
        mu_s_x=scatter,
        mu_s_m=scatter,
    )
