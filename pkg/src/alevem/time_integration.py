"""Theta-scheme time stepping for the ALE convection-diffusion system.

One step solves

    (M_{n+1} + dt theta K_{n+1}) rho_{n+1}
        = (M_n - dt (1 - theta) K_n) rho_n + dt theta l_{n+1} + dt (1 - theta) l_n

with K = mu A + B, after eliminating the Dirichlet boundary DoFs.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .ale_forms import (
    AleMap,
    AssembledForms,
    assemble_forms,
    interpolate_ale_map,
    local_convection,
    local_load,
    local_mass,
    local_stiffness,
)
from .mesh import PolygonalMesh
from .vem_core import VemSpace

log = logging.getLogger(__name__)

CLOSED_FORM = "closed_form_map"
ODE_FIELD = "ode_velocity_field"


class SolverError(Exception):
    """A linear solve failed (singular or non-convergent system)."""


class BoundaryValueError(ValueError):
    pass


@dataclass
class PrescribedMotion:
    """Domain motion given either as a closed-form map or a velocity field.

    ``closed_form_map``: ``map_fn(xi, t)`` and ``velocity_fn(xi, t)`` act on
    reference points. ``ode_velocity_field``: only ``velocity_fn(x, t)``
    acting on physical points is known and the map is integrated with Heun's
    method starting from the identity. ``stationary`` marks a map that does
    not change in time, which lets the driver reuse matrices.
    """

    kind: str
    map_fn: Optional[Callable] = None
    velocity_fn: Optional[Callable] = None
    stationary: bool = False

    def __post_init__(self):
        if self.kind == CLOSED_FORM:
            if self.map_fn is None or self.velocity_fn is None:
                raise ValueError("a closed-form motion needs both map_fn and velocity_fn")
        elif self.kind == ODE_FIELD:
            if self.velocity_fn is None:
                raise ValueError("an ODE motion needs velocity_fn")
        else:
            raise ValueError(f"unknown motion kind {self.kind!r}")

    def initial_map(self, space, t=0.0):
        if self.kind == CLOSED_FORM:
            return interpolate_ale_map(self.map_fn, self.velocity_fn, space, t)
        x = space.interpolate(lambda p: p)
        return _with_field_velocity(space, x, self.velocity_fn, t)

    def advance(self, ale, dt):
        if self.kind == CLOSED_FORM:
            return interpolate_ale_map(self.map_fn, self.velocity_fn, ale.space, ale.t + dt)
        return heun_advance_map(ale, self, dt)


def _with_field_velocity(space, map_dofs, velocity_fn, t):
    nodes = map_dofs[: space.layout.n_point_dofs]
    xq = [x.reshape(-1, 2) for x in space.pi_zero_at_quadrature(map_dofs)]
    w = space.interpolate_at(lambda p: velocity_fn(p, t), nodes, xq)
    return AleMap(space, map_dofs, w, t)


def heun_advance_map(ale, motion, dt):
    """Advance an ODE-driven map by one Heun (modified Euler) step.

    Point DoFs move with the two-stage rule; moment DoFs are re-integrated
    from the same rule applied at the mapped quadrature points. The velocity
    DoFs are refreshed from the field at the new positions.
    """
    if motion.kind != ODE_FIELD:
        raise ValueError("Heun advance needs an ODE velocity field")
    w = motion.velocity_fn
    t = ale.t

    def heun(x):
        k1 = w(x, t)
        k2 = w(x + dt * k1, t + dt)
        return x + 0.5 * dt * (k1 + k2)

    space = ale.space
    new_map = space.interpolate_at(heun, ale.node_positions, ale.physical_quadrature_points())
    return _with_field_velocity(space, new_map, w, t + dt)


@dataclass
class ThetaSchemeState:
    rho: np.ndarray
    ale_n: AleMap
    forms_n: AssembledForms
    t_n: float
    dt: float
    theta: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError(f"theta must lie in [0, 1], got {self.theta}")
        if not self.dt > 0.0:
            raise ValueError(f"time step must be positive, got {self.dt}")


def apply_dirichlet(G, rhs, boundary, values):
    """Symmetric elimination of prescribed boundary DoFs.

    Returns the modified matrix (boundary rows and columns replaced by the
    identity) and right-hand side (interior rows lifted by the boundary
    couplings, boundary rows equal to the prescribed values).
    """
    boundary = np.asarray(boundary, dtype=int)
    values = np.asarray(values, dtype=float)
    if values.shape != boundary.shape:
        raise BoundaryValueError(f"{len(boundary)} boundary DoFs but {values.size} values")
    if not np.all(np.isfinite(values)):
        raise BoundaryValueError("missing or non-finite boundary value")
    n = G.shape[0]
    xb = np.zeros(n)
    xb[boundary] = values
    out_rhs = np.asarray(rhs, dtype=float) - G @ xb
    out_rhs[boundary] = values
    keep = np.ones(n)
    keep[boundary] = 0.0
    d = sp.diags(keep)
    out = (d @ G @ d + sp.diags(1.0 - keep)).tocsr()
    out.eliminate_zeros()
    return out, out_rhs


def boundary_values(problem, ale, t):
    """Exact solution at the mapped boundary nodes, or zero without one."""
    bd = ale.space.boundary_dofs
    if problem.exact is None:
        return np.zeros(len(bd))
    return np.asarray(problem.exact(ale.node_positions[bd], t), dtype=float)


def _direct_solve(G, rhs):
    try:
        lu = spla.splu(sp.csc_matrix(G))
    except RuntimeError as exc:
        raise SolverError(f"sparse factorisation failed: {exc}") from exc
    x = lu.solve(rhs)
    if not np.all(np.isfinite(x)):
        raise SolverError("linear solve produced non-finite values")
    return x


def theta_step(state, ale_next, problem, forms_next=None):
    """One theta-scheme step from ``state`` to the time of ``ale_next``."""
    if forms_next is None:
        forms_next = assemble_forms(ale_next.space, ale_next, problem)
    dt, th, mu = state.dt, state.theta, problem.mu
    f0, f1 = state.forms_n, forms_next
    G = f1.M + dt * th * (mu * f1.A + f1.B)
    H = f0.M - dt * (1.0 - th) * (mu * f0.A + f0.B)
    rhs = H @ state.rho + dt * th * f1.F + dt * (1.0 - th) * f0.F
    bd = ale_next.space.boundary_dofs
    Gd, rd = apply_dirichlet(G, rhs, bd, boundary_values(problem, ale_next, ale_next.t))
    return _direct_solve(Gd, rd)


# --------------------------------------------------------------------------
# driver


class _Partition:
    """Fast extraction of interior/boundary blocks from a fixed CSR pattern."""

    def __init__(self, space):
        n = space.n_dofs
        bd = np.asarray(space.boundary_dofs)
        mask = np.ones(n, dtype=bool)
        mask[bd] = False
        self.interior = np.flatnonzero(mask)
        self.boundary = bd
        tmpl = space.assemble_matrix([np.zeros(g.dofs.shape + (g.n_local,)) for g in space.groups])
        tmpl.data = np.arange(1, tmpl.nnz + 1, dtype=float)
        self.nnz = tmpl.nnz
        self._ii = self._block(tmpl[self.interior][:, self.interior])
        self._ib = self._block(tmpl[self.interior][:, self.boundary])

    @staticmethod
    def _block(b):
        b = b.tocsr()
        b.sort_indices()
        return b.data.astype(np.int64) - 1, b.indices.copy(), b.indptr.copy(), b.shape

    def split(self, G):
        if G.nnz != self.nnz:
            raise ValueError("matrix does not match the space's sparsity pattern")
        out = []
        for idx, ind, ptr, shape in (self._ii, self._ib):
            out.append(sp.csr_matrix((G.data[idx], ind, ptr), shape=shape))
        return out


class _InteriorSolver:
    """Solves the interior block, reusing factorisations across steps.

    With a ``key`` (fixed matrix, e.g. a stationary map and step size) the
    factorisation for that key is reused directly. Without one the matrix
    drifts slowly from step to step, so the latest factorisation drives a
    defect-correction iteration until the residual falls below ``rtol``; the
    matrix is refactorised when the iteration contracts too slowly.
    """

    def __init__(self, rtol=1e-12, max_sweeps=8, min_contraction=0.1):
        self.rtol = rtol
        self.max_sweeps = max_sweeps
        self.min_contraction = min_contraction
        self._lu = None
        self._key = None
        self._stale = True
        self._floor = 0.0
        self.factorisations = 0

    def _factor(self, G):
        try:
            self._lu = spla.splu(G.tocsc())
        except RuntimeError as exc:
            raise SolverError(f"sparse factorisation failed: {exc}") from exc
        self.factorisations += 1
        self._stale = False

    def solve(self, G, rhs, key=None, x0=None):
        """Solve ``G x = rhs``; ``x0`` is an optional starting guess."""
        x = None
        if key is not None:
            if self._lu is None or key != self._key:
                self._factor(G)
                self._key = key
            x = self._lu.solve(rhs)
        else:
            self._key = None
            if not self._stale:
                x = self._correct(G, rhs, x0)
            if x is None:
                self._factor(G)
                self._floor = 0.0
                x = self._correct(G, rhs)
            if x is None:
                raise SolverError("defect correction failed on a fresh factorisation")
        if not np.all(np.isfinite(x)):
            raise SolverError("linear solve produced non-finite values")
        return x

    def _correct(self, G, rhs, x0=None):
        scale = np.linalg.norm(rhs)
        if x0 is None:
            x = self._lu.solve(rhs)
        else:
            x = x0 + self._lu.solve(rhs - G @ x0)
        r = rhs - G @ x
        res = np.linalg.norm(r)
        if self._floor == 0.0 and scale > 0.0:
            # residual of a fresh factorisation: the attainable accuracy for
            # this (possibly ill-conditioned) matrix
            self._floor = res / scale
        tol = max(self.rtol, 4.0 * self._floor) * scale
        for _ in range(self.max_sweeps):
            if not np.isfinite(res):
                break
            if res <= tol:
                return x
            x = x + self._lu.solve(r)
            r = rhs - G @ x
            new = np.linalg.norm(r)
            if new > self.min_contraction * res:
                # slow contraction: accept this solve if it is good enough,
                # but refactorise next time
                self._stale = True
                return x if new <= tol else None
            res = new
        self._stale = True
        return None


@dataclass
class SimulationResult:
    rho: np.ndarray
    ale: AleMap
    space: VemSpace
    t: float
    n_steps: int
    factorisations: int = 0


def time_grid(t0, T, dt):
    """Step end times from ``t0`` to ``T``; the last step is truncated."""
    if T < t0:
        raise ValueError("final time precedes the initial time")
    if T == t0:
        return np.empty(0)
    n = int(np.ceil((T - t0) / dt - 1e-9))
    times = t0 + dt * np.arange(1, n + 1)
    times[-1] = T
    return times


def run_simulation(problem, motion, mesh, k, theta, T, dt, t0=0.0, initial=None, callback=None):
    """Integrate the ALE convection-diffusion problem to time ``T``.

    ``mesh`` may be a :class:`PolygonalMesh` or a prebuilt :class:`VemSpace`.
    The initial condition is ``initial(x)`` or else the exact solution at
    ``t0``, interpolated through the initial map. ``callback(step, t, rho,
    ale)`` is called after every step.
    """
    if not 0.0 <= theta <= 1.0:
        raise ValueError(f"theta must lie in [0, 1], got {theta}")
    if not dt > 0.0:
        raise ValueError(f"time step must be positive, got {dt}")
    space = mesh if isinstance(mesh, VemSpace) else VemSpace(mesh, k)
    if space.k != k:
        raise ValueError(f"space degree {space.k} differs from k={k}")
    ale = motion.initial_map(space, t0)
    if initial is None:
        if problem.exact is None:
            raise ValueError("no initial condition: give `initial` or an exact solution")
        rho = ale.interpolate_physical(lambda x: problem.exact(x, t0))
    else:
        rho = ale.interpolate_physical(initial)
    times = time_grid(t0, T, dt)
    if len(times) == 0:
        return SimulationResult(rho, ale, space, t0, 0)

    part = _Partition(space)
    solver = _InteriorSolver()
    mu = problem.mu
    frozen = motion.stationary and problem.stationary_b

    def operators(a, t):
        m = local_mass(space, a)
        kk = local_convection(space, a, problem, t)
        if mu != 0.0:
            kk = [mu * s + c for s, c in zip(local_stiffness(space, a), kk)]
        return m, kk

    m0, k0 = operators(ale, t0)
    l0 = space.assemble_vector(local_load(space, ale, problem, t0))
    cache_g = {}
    t_prev = t0
    for step, t1 in enumerate(times, start=1):
        h = t1 - t_prev
        if motion.stationary:
            ale1 = ale
        else:
            ale1 = motion.advance(ale, h)
        ale1.t = t1
        if frozen:
            m1, k1 = m0, k0
        else:
            m1, k1 = operators(ale1, t1)
        l1 = space.assemble_vector(local_load(space, ale1, problem, t1))
        loc = space.gather(rho)
        hrho = [((m - h * (1.0 - theta) * kk) @ r[:, :, None])[:, :, 0] for m, kk, r in zip(m0, k0, loc)]
        rhs = space.assemble_vector(hrho) + h * theta * l1 + h * (1.0 - theta) * l0

        gkey = round(h / dt, 12) if frozen else None
        if gkey is not None and gkey in cache_g:
            G = cache_g[gkey]
        else:
            G = space.assemble_matrix([m + h * theta * kk for m, kk in zip(m1, k1)])
            if gkey is not None:
                cache_g[gkey] = G
        g_ii, g_ib = part.split(G)
        xb = boundary_values(problem, ale1, t1)
        r_i = rhs[part.interior] - g_ib @ xb
        x = np.empty(space.n_dofs)
        x[part.boundary] = xb
        x[part.interior] = solver.solve(g_ii, r_i, key=gkey)
        rho = x
        ale, m0, k0, l0, t_prev = ale1, m1, k1, l1, t1
        if callback is not None:
            callback(step, t1, rho, ale)
    log.debug("%d steps, %d factorisations", len(times), solver.factorisations)
    return SimulationResult(rho, ale, space, float(times[-1]), len(times), solver.factorisations)
