"""Discrete error norms on the mapped domain and convergence rates."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .ale_forms import pull_back_gradient


@dataclass
class ErrorReport:
    h: float
    dofs: int
    l2: Optional[float] = None
    h1: Optional[float] = None
    l1_sol: Optional[float] = None
    l1_mesh: Optional[float] = None
    runtime: float = 0.0
    steps: int = 0
    dt: Optional[float] = None

    def __post_init__(self):
        for name in ERROR_COLUMNS:
            v = getattr(self, name)
            if v is not None and not v >= 0.0:
                raise ValueError(f"error value {name}={v} must be non-negative")

    def columns(self):
        return [c for c in ERROR_COLUMNS if getattr(self, c) is not None]


ERROR_COLUMNS = ("l2", "h1", "l1_sol", "l1_mesh")


@dataclass
class EocTable:
    rows: List[ErrorReport]
    rates: dict = field(default_factory=dict)
    fitted: dict = field(default_factory=dict)

    def __post_init__(self):
        hs = [r.h for r in self.rows]
        if any(b >= a for a, b in zip(hs, hs[1:])):
            raise ValueError("mesh sizes must strictly decrease down the table")

    @property
    def columns(self):
        return self.rows[0].columns() if self.rows else []

    def headline(self, column):
        """The final pairwise rate of ``column`` (None when undefined)."""
        r = self.rates.get(column) or [None]
        return r[-1]


def _difference(rho_h, exact, ale):
    return np.asarray(rho_h, dtype=float) - ale.interpolate_physical(exact)


def l2_error(rho_h, exact, ale, space=None):
    """j-weighted L2 norm of Pi0 (rho_h - I(exact o A_h)) on the reference mesh."""
    space = ale.space if space is None else space
    diff = _difference(rho_h, exact, ale)
    vals = space.pi_zero_at_quadrature(diff)
    total = sum(float(np.sum(g.qw * geo.det * v ** 2)) for g, geo, v in zip(space.groups, ale.geometry, vals))
    return math.sqrt(max(total, 0.0))


def h1_error(rho_h, exact, ale, space=None):
    """j-weighted L2 norm of the pulled-back gradient J^-T Pi1 of the difference."""
    space = ale.space if space is None else space
    diff = _difference(rho_h, exact, ale)
    grads = space.pi_one_at_quadrature(diff)
    total = 0.0
    for g, geo, gr in zip(space.groups, ale.geometry, grads):
        phys = pull_back_gradient(geo.jinv, gr)
        total += float(np.sum(g.qw * geo.det * np.sum(phys ** 2, axis=-1)))
    return math.sqrt(max(total, 0.0))


def l1_solution_error(rho_h, exact, ale):
    """Mean absolute difference between the DoFs of rho_h and of the exact interpolant."""
    return float(np.mean(np.abs(_difference(rho_h, exact, ale))))


def boundary_radii(ale):
    bd = ale.space.boundary_dofs
    return np.linalg.norm(ale.map_dofs[bd], axis=1)


def l1_mesh_error(ale, radius):
    """Mean absolute deviation of boundary node radii from ``radius``.

    All boundary point DoFs of the map (vertices and edge nodes) count.
    """
    return float(np.mean(np.abs(boundary_radii(ale) - radius)))


def pairwise_rates(h, e):
    out = []
    for i in range(len(h) - 1):
        if e[i] is None or e[i + 1] is None or e[i] <= 0.0 or e[i + 1] <= 0.0:
            out.append(None)
        else:
            out.append(math.log(e[i] / e[i + 1]) / math.log(h[i] / h[i + 1]))
    return out


def fitted_rate(h, e):
    """Least-squares slope of log e against log h (None if undefined)."""
    pts = [(math.log(a), math.log(b)) for a, b in zip(h, e) if b is not None and b > 0.0]
    if len(pts) < 2:
        return None
    x, y = np.array(pts).T
    return float(np.polyfit(x, y, 1)[0])


def eoc(table):
    """Fill ``table.rates`` (pairwise) and ``table.fitted`` for every error column."""
    h = [r.h for r in table.rows]
    for c in table.columns:
        e = [getattr(r, c) for r in table.rows]
        table.rates[c] = pairwise_rates(h, e)
        table.fitted[c] = fitted_rate(h, e)
    return table.rates
