"""Velocity-based moving-mesh method for the porous medium equation.

The density obeys rho_t = div(rho grad rho) on a domain whose boundary moves
with the Lagrangian velocity. Each forward Euler step

1. solves the weighted potential problem a(phi, v) = d(v),
2. reconstructs the mesh velocity w as the L2 projection of grad phi,
3. moves the map A_{n+1} = A_n + dt w and updates the mass pairing
   M_{n+1} rho_{n+1} = M_n rho_n - dt B_n rho_n.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .ale_forms import (
    AleMap,
    DegenerateMapError,
    identity_map,
    local_gradient_load,
    local_mass,
    local_quadrature_load,
    local_stiffness,
    pull_back_gradient,
)
from .time_integration import SolverError, _InteriorSolver, _Partition
from .vem_core import VemSpace

log = logging.getLogger(__name__)

RHO_BAR_FLOOR = 1e-12


class PmeError(Exception):
    pass


@dataclass(frozen=True)
class SimilaritySolution:
    """Radially symmetric compactly supported solution with initial radius r0."""

    r0: float = 0.5

    @property
    def t0(self):
        return self.r0 ** 2 / 8.0

    def lam(self, t):
        if np.any(np.asarray(t) <= 0.0):
            raise ValueError("similarity solution needs t > 0")
        return (np.asarray(t, dtype=float) / self.t0) ** 0.25

    def front(self, t):
        return self.r0 * self.lam(t)

    def front_speed(self, t):
        return self.front(t) / (4.0 * t)

    def density(self, x, t):
        """Density at an (n, 2) array of points."""
        return pme_exact(np.linalg.norm(np.asarray(x, dtype=float), axis=-1), t, self)

    @property
    def mass(self):
        return math.pi * self.r0 ** 2 / 2.0


def pme_exact(r, t, sol):
    """(1/lam^2)(1 - (r / (r0 lam))^2) inside the support, zero outside."""
    lam = sol.lam(t)
    s = np.asarray(r, dtype=float) / (sol.r0 * lam)
    return np.where(s < 1.0, (1.0 - s ** 2) / lam ** 2, 0.0)


@dataclass
class PmeState:
    rho: np.ndarray
    ale: AleMap
    t_n: float
    initial_mass_vector: Optional[np.ndarray] = None
    velocity: Optional[np.ndarray] = None
    potential: Optional[np.ndarray] = None

    def __post_init__(self):
        if not np.all(np.isfinite(self.rho)):
            raise PmeError("non-finite density DoFs")


def total_mass(state, mass=None):
    """Pairing of rho with the constant function through the mass form."""
    space = state.ale.space
    if mass is None:
        mass = space.assemble_matrix(local_mass(space, state.ale))
    one = space.interpolate(lambda p: np.ones(len(p)))
    return float(one @ (mass @ state.rho))


# --------------------------------------------------------------------------
# velocity


def _rho_fields(space, ale, rho):
    vals = space.pi_zero_at_quadrature(rho)
    grads = space.pi_one_at_quadrature(rho)
    phys = [pull_back_gradient(geo.jinv, gr) for geo, gr in zip(ale.geometry, grads)]
    return vals, phys


def _rho_bar(space, vals):
    out = []
    for g, v in zip(space.groups, vals):
        avg = (g.qw * v).sum(axis=1) / g.area
        out.append(np.maximum(avg, RHO_BAR_FLOOR))
    return out


class _Workspace:
    """Solvers and patterns reused across steps of one run."""

    def __init__(self, space, strong):
        self.space = space
        self.part = _Partition(space) if strong else None
        self.potential_solver = _InteriorSolver()
        self.mass_solver = _InteriorSolver()
        self.rho_solver = _InteriorSolver() if strong else self.mass_solver
        self.mass = None  # mass matrix of the current map, when known


def _potential_system(space, ale, rho, fields=None):
    vals, grads = _rho_fields(space, ale, rho) if fields is None else fields
    weight = [np.maximum(v, 0.0) for v in vals]
    a = space.assemble_matrix(local_stiffness(space, ale, weight=weight, stab_scale=_rho_bar(space, vals)))
    d = space.assemble_vector(local_gradient_load(space, ale, [-v[:, :, None] * gr for v, gr in zip(vals, grads)]))
    # zero-mean constraint on phi through the constant pairing
    c = space.assemble_vector(local_quadrature_load(space, ale, [np.ones(g.qw.shape) for g in space.groups]))
    return a, d, c


def _augment(a, c):
    col = sp.csr_matrix(c.reshape(-1, 1))
    return sp.bmat([[a, col], [col.T, None]], format="csr")


def solve_velocity_potential(state, space=None, _solver=None, _fields=None):
    """Velocity potential phi with zero mean, and the constraint multiplier."""
    space = state.ale.space if space is None else space
    a, d, c = _potential_system(space, state.ale, state.rho, _fields)
    big = _augment(a, c)
    rhs = np.append(d, 0.0)
    solver = _solver if _solver is not None else _InteriorSolver()
    x0 = None if state.potential is None else np.append(state.potential, 0.0)
    try:
        sol = solver.solve(big, rhs, x0=x0)
    except SolverError as exc:
        raise PmeError(f"potential system is singular beyond constants: {exc}") from exc
    return sol[:-1], float(sol[-1])


def reconstruct_velocity(phi, state, space=None, _solver=None, mass=None):
    """L2 projection of the pulled-back gradient of ``phi`` (an (N, 2) array)."""
    space = state.ale.space if space is None else space
    ale = state.ale
    grads = space.pi_one_at_quadrature(phi)
    phys = [pull_back_gradient(geo.jinv, gr) for geo, gr in zip(ale.geometry, grads)]
    rhs = space.assemble_vector(local_quadrature_load(space, ale, phys))
    if mass is None:
        mass = space.assemble_matrix(local_mass(space, ale))
    solver = _solver if _solver is not None else _InteriorSolver()
    return solver.solve(mass, rhs, x0=state.velocity)


def _transport_vector(space, ale, rho, w, fields=None, w_quad=None):
    """B_n(rho, v; w) for every basis function v."""
    vals, grads = _rho_fields(space, ale, rho) if fields is None else fields
    ws = space.pi_zero_at_quadrature(w) if w_quad is None else w_quad
    vec = [v[:, :, None] * (gr + wq) for v, gr, wq in zip(vals, grads, ws)]
    return space.assemble_vector(local_gradient_load(space, ale, vec))


def pme_step(state, space, dt, strong=True, _work=None):
    """One forward Euler step of the coupled map/density update."""
    work = _work if _work is not None else _Workspace(space, strong)
    ale = state.ale
    mass_n = work.mass if work.mass is not None else space.assemble_matrix(local_mass(space, ale))
    fields = _rho_fields(space, ale, state.rho)
    phi, _ = solve_velocity_potential(state, space, work.potential_solver, fields)
    w = reconstruct_velocity(phi, state, space, work.mass_solver, mass=mass_n)
    t1 = state.t_n + dt
    try:
        ale1 = AleMap(space, ale.map_dofs + dt * w, w, t1)
    except DegenerateMapError as exc:
        raise DegenerateMapError(f"{exc}; reduce the time step") from exc
    # Pi0 w at the reference quadrature points does not depend on the map
    bvec = _transport_vector(space, ale, state.rho, w, fields, [geo.w for geo in ale1.geometry])
    rhs = mass_n @ state.rho - dt * bvec
    mass1 = space.assemble_matrix(local_mass(space, ale1))
    if strong:
        m_ii, _ = work.part.split(mass1)
        rho1 = np.zeros(space.n_dofs)
        inner = work.part.interior
        rho1[inner] = work.rho_solver.solve(m_ii, rhs[inner], x0=state.rho[inner])
    else:
        rho1 = work.rho_solver.solve(mass1, rhs, x0=state.rho)
    work.mass = mass1
    return PmeState(rho1, ale1, t1, state.initial_mass_vector, velocity=w, potential=phi)


# --------------------------------------------------------------------------
# initial data


def radial_projection(radius):
    def g(p):
        p = np.asarray(p, dtype=float)
        return radius * p / np.linalg.norm(p, axis=1, keepdims=True)

    return g


def harmonic_extension_initial_map(mesh, space, boundary_map, t=0.0):
    """Map whose components are discrete harmonic with boundary data ``boundary_map``.

    ``boundary_map`` acts on the reference boundary node positions. The
    result has zero velocity.
    """
    ident = identity_map(space, t)
    stiff = space.assemble_matrix(local_stiffness(space, ident))
    bd = np.asarray(space.boundary_dofs)
    mask = np.ones(space.n_dofs, dtype=bool)
    mask[bd] = False
    inner = np.flatnonzero(mask)
    xb = np.asarray(boundary_map(space.layout.node_xy[bd]), dtype=float)
    x = ident.map_dofs.copy()
    x[bd] = xb
    k_ii = stiff[inner][:, inner].tocsc()
    rhs = -(stiff[inner][:, bd] @ xb)
    solver = _InteriorSolver()
    for c in range(2):
        x[inner, c] = solver.solve(k_ii, rhs[:, c], key="harmonic")
    try:
        return AleMap(space, x, np.zeros_like(x), t)
    except DegenerateMapError as exc:
        raise DegenerateMapError(f"degenerate initial map: {exc}") from exc


@dataclass
class PmeResult:
    state: PmeState
    space: VemSpace
    n_steps: int
    mass_history: list = field(default_factory=list)
    radius_history: list = field(default_factory=list)


def initial_state(space, sol=SimilaritySolution(), strong=True):
    if strong:
        ale = harmonic_extension_initial_map(space.mesh, space, radial_projection(sol.r0), sol.t0)
    else:
        ale = identity_map(space, sol.t0)
    rho = ale.interpolate_physical(lambda x: sol.density(x, sol.t0))
    if strong:
        rho[space.boundary_dofs] = 0.0
    mass = space.assemble_matrix(local_mass(space, ale))
    return PmeState(rho, ale, sol.t0, initial_mass_vector=mass @ rho), mass


def run_pme(space, dt, duration=0.01, sol=SimilaritySolution(), strong=True, monitor_every=0, callback=None):
    """Run from t0 to t0 + duration; the last step is truncated to land on it."""
    if not dt > 0.0:
        raise ValueError("time step must be positive")
    state, mass = initial_state(space, sol, strong)
    work = _Workspace(space, strong)
    work.mass = mass
    one = space.interpolate(lambda p: np.ones(len(p)))
    result = PmeResult(state, space, 0)
    result.mass_history.append((state.t_n, float(one @ state.initial_mass_vector)))
    t_end = sol.t0 + duration
    n = int(math.ceil(duration / dt - 1e-9))
    for i in range(n):
        h = t_end - state.t_n if i == n - 1 else dt
        state = pme_step(state, space, h, strong=strong, _work=work)
        if i == n - 1:
            state.t_n = t_end
            state.ale.t = t_end
        if (monitor_every and (i + 1) % monitor_every == 0) or i == n - 1:
            result.mass_history.append((state.t_n, float(one @ (work.mass @ state.rho))))
            r = np.linalg.norm(state.ale.map_dofs[space.boundary_dofs], axis=1)
            result.radius_history.append((state.t_n, float(r.mean()), float(r.std())))
        if callback is not None:
            callback(i + 1, state)
    result.state = state
    result.n_steps = n
    log.debug("pme: %d steps, factorisations %d/%d/%d", n, work.potential_solver.factorisations,
              work.mass_solver.factorisations, work.rho_solver.factorisations)
    return result
