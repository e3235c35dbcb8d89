"""Invariant suite run by the ``check`` verb.

Every check compares the implementation against an independent route
(closed-form integrals, a plain per-element loop, a fine reference
integration) on small meshes, and returns a :class:`CheckResult`.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable, List

import numpy as np
import scipy.linalg as sla

from .ale_forms import ProblemData, identity_map, interpolate_ale_map, local_mass, local_stiffness
from .mesh import element_geometry, generate_cvt, generate_disk_cvt
from .moving_mesh_pme import run_pme
from .presets import FINAL_TIME, MOTIONS
from .quadrature import polygon_monomial_integral, polygon_quadrature
from .time_integration import CLOSED_FORM, PrescribedMotion, heun_advance_map, run_simulation
from .vem_core import VemSpace, eval_monomials, monomial_exponents, n_polys

DEGREES = (1, 2, 3)


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    limit: float
    detail: str = ""
    runtime: float = 0.0

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: {self.value:.3e} (limit {self.limit:.1e}) {self.detail} [{self.runtime:.1f}s]"


class _Context:
    """Meshes and spaces shared between checks."""

    def __init__(self, n_cells=100, seed=0):
        self.mesh = generate_cvt(n_cells, lloyd_iterations=50, rng_seed=seed)
        self._spaces = {}

    def space(self, k):
        if k not in self._spaces:
            self._spaces[k] = VemSpace(self.mesh, k)
        return self._spaces[k]


def _random_poly(k, rng):
    coeff = rng.normal(size=n_polys(k))
    exps = monomial_exponents(k)

    def p(x):
        return sum(c * x[:, 0] ** a * x[:, 1] ** b for c, (a, b) in zip(coeff, exps))

    def grad(x):
        gx = sum(c * a * x[:, 0] ** max(a - 1, 0) * x[:, 1] ** b for c, (a, b) in zip(coeff, exps) if a > 0)
        gy = sum(c * b * x[:, 0] ** a * x[:, 1] ** max(b - 1, 0) for c, (a, b) in zip(coeff, exps) if b > 0)
        return np.stack([gx + 0 * x[:, 0], gy + 0 * x[:, 0]], axis=-1)

    return p, grad


def check_projector_reproduction(ctx, tol=1e-10):
    """Pi0 and Pi1 of the interpolant of a degree-k polynomial reproduce it."""
    rng = np.random.default_rng(1)
    worst = 0.0
    for k in DEGREES:
        space = ctx.space(k)
        p, grad = _random_poly(k, rng)
        u = space.interpolate(p)
        for g, v0, v1 in zip(space.groups, space.pi_zero_at_quadrature(u), space.pi_one_at_quadrature(u)):
            x = g.qp.reshape(-1, 2)
            worst = max(worst, np.abs(v0.ravel() - p(x)).max(), np.abs(v1.reshape(-1, 2) - grad(x)).max())
    return worst <= tol, worst, tol, "k=1,2,3"


def check_quadrature_exactness(ctx, tol=1e-12):
    """Fan quadrature against edge integrals from the divergence theorem."""
    worst = 0.0
    mesh = ctx.mesh
    for e in range(mesh.n_elements):
        geom = element_geometry(mesh, e)
        for order in (2, 4, 8):
            rule = polygon_quadrature(geom, order)
            for a in range(order + 1):
                for b in range(order + 1 - a):
                    q = float(rule.weights @ (rule.points[:, 0] ** a * rule.points[:, 1] ** b))
                    ref = polygon_monomial_integral(geom.vertices, a, b)
                    worst = max(worst, abs(q - ref) / geom.area)
    return worst <= tol, worst, tol, f"{mesh.n_elements} cells, orders 2/4/8"


def check_form_definiteness(ctx, tol=1e-10):
    """M symmetric positive definite, A symmetric semidefinite with kernel = constants.

    Forms are assembled under the curved CE map. The reported value is the
    worst of: relative asymmetry, relative size of A applied to the
    constant vector, and the (negated) smallest eigenvalue ratios.
    """
    motion = MOTIONS["ce_static"]()
    worst = 0.0
    details = []
    for k in DEGREES:
        space = ctx.space(k)
        ale = interpolate_ale_map(motion.map_fn, motion.velocity_fn, space, 0.0)
        M = space.assemble_matrix(local_mass(space, ale)).toarray()
        A = space.assemble_matrix(local_stiffness(space, ale)).toarray()
        asym = max(np.abs(M - M.T).max() / np.abs(M).max(), np.abs(A - A.T).max() / np.abs(A).max())
        one = space.interpolate(lambda x: np.ones(len(x)))
        kern = np.abs(A @ one).max() / np.abs(A).max()
        em = sla.eigvalsh(M)
        ea = sla.eigvalsh(A)
        m_ok = em[0] > tol * em[-1]
        # exactly one (near) zero eigenvalue
        a_ok = ea[0] > -tol * ea[-1] and ea[1] > 1e3 * tol * ea[-1]
        if not (m_ok and a_ok):
            worst = max(worst, 1.0)
        worst = max(worst, asym, kern)
        details.append(f"k={k}: min eig M/max {em[0] / em[-1]:.1e}, A second/max {ea[1] / ea[-1]:.1e}")
    return worst <= tol, worst, tol, "; ".join(details)


def _fixed_mesh_forms(space):
    """Mass and stiffness of the fixed-mesh VEM, assembled element by element."""
    n = space.n_dofs
    k = space.k
    M = np.zeros((n, n))
    A = np.zeros((n, n))
    for e, proj in enumerate(space.projectors):
        geom = element_geometry(space.mesh, e)
        rule = polygon_quadrature(geom, space.quad_order)
        m = eval_monomials(rule.points, proj.centroid, proj.diameter, k)
        m1 = eval_monomials(rule.points, proj.centroid, proj.diameter, k - 1)
        v0 = m @ proj.pi_zero  # (nq, nd)
        gx, gy = m1 @ proj.pi_one[0], m1 @ proj.pi_one[1]
        resid = np.eye(len(v0.T)) - proj.dof_of_poly @ proj.pi_zero
        s = resid.T @ resid
        w = rule.weights
        dofs = space.layout.element_dofs[e]
        ix = np.ix_(dofs, dofs)
        M[ix] += v0.T @ (w[:, None] * v0) + proj.diameter ** 2 * s
        A[ix] += gx.T @ (w[:, None] * gx) + gy.T @ (w[:, None] * gy) + s
    return M, A


def check_identity_reduction(ctx, tol=1e-11):
    """Under the identity map the ALE forms equal the fixed-mesh VEM forms."""
    worst = 0.0
    for k in DEGREES:
        space = ctx.space(k)
        ale = identity_map(space)
        M = space.assemble_matrix(local_mass(space, ale)).toarray()
        A = space.assemble_matrix(local_stiffness(space, ale)).toarray()
        M0, A0 = _fixed_mesh_forms(space)
        worst = max(worst, np.abs(M - M0).max() / np.abs(M0).max(), np.abs(A - A0).max() / np.abs(A0).max())
        for geo in ale.geometry:
            worst = max(worst, np.abs(geo.det - 1.0).max())
    return worst <= tol, worst, tol, "k=1,2,3"


def check_jacobian_positivity(ctx, n_times=6):
    """j > 0 at every quadrature point for every preset motion over [0, T]."""
    worst = math.inf
    names = []
    for name in ("ce_static", "warped_square", "ce_linear", "vorticial", "oscillating"):
        motion = MOTIONS[name]()
        for k in DEGREES:
            space = ctx.space(k)
            ale = motion.initial_map(space, 0.0)
            mins = [min(float(g.det.min()) for g in ale.geometry)]
            ts = np.linspace(0.0, FINAL_TIME, n_times)
            for t0, t1 in zip(ts, ts[1:]):
                # constructing an AleMap raises if j <= 0 anywhere
                ale = motion.advance(ale, t1 - t0)
                mins.append(min(float(g.det.min()) for g in ale.geometry))
            worst = min(worst, min(mins))
        names.append(name)
    return worst > 0.0, worst, 0.0, f"min j over {', '.join(names)}"


def _reference_particle(x0, t_end, dt=1e-6):
    """Classical RK4 trajectory of one particle in the vortex field."""
    pi = math.pi

    def f(x, y):
        return 2 * math.sin(pi * x) * math.cos(pi * y), -2 * math.cos(pi * x) * math.sin(pi * y)

    x, y = x0
    n = int(round(t_end / dt))
    for _ in range(n):
        a = f(x, y)
        b = f(x + 0.5 * dt * a[0], y + 0.5 * dt * a[1])
        c = f(x + 0.5 * dt * b[0], y + 0.5 * dt * b[1])
        d = f(x + dt * c[0], y + dt * c[1])
        x += dt / 6 * (a[0] + 2 * b[0] + 2 * c[0] + d[0])
        y += dt / 6 * (a[1] + 2 * b[1] + 2 * c[1] + d[1])
    return np.array([x, y])


def check_heun_order(ctx, t_end=0.1, tol=0.3):
    """Heun error ratio under step halving tends to 4 for one tracked vertex."""
    motion = MOTIONS["vorticial"]()
    space = ctx.space(1)
    start = space.mesh.vertices
    vid = int(np.argmin(np.linalg.norm(start - np.array([0.3, 0.6]), axis=1)))
    ref = _reference_particle(start[vid], t_end)
    errs = []
    for n in (5, 10, 20, 40, 80):
        ale = motion.initial_map(space, 0.0)
        dt = t_end / n
        for _ in range(n):
            ale = heun_advance_map(ale, motion, dt)
        errs.append(float(np.linalg.norm(ale.map_dofs[vid] - ref)))
    ratios = [a / b for a, b in zip(errs, errs[1:])]
    dev = abs(ratios[-1] - 4.0)
    return dev <= tol, dev, tol, "ratios " + ", ".join(f"{r:.3f}" for r in ratios)


def check_transport_invariance(ctx, tol=1e-10, n_steps=20):
    """mu = 0, b = w, f = 0 on a fixed map: the DoFs do not change."""
    field = lambda x, t=0.0: np.column_stack([1.0 + x[:, 1], 0.5 - x[:, 0]])
    motion = PrescribedMotion(CLOSED_FORM, lambda xi, t: np.asarray(xi, dtype=float), field, stationary=True)
    worst = 0.0
    for k in DEGREES:
        space = ctx.space(k)
        init = lambda x: np.sin(3 * x[:, 0]) * np.cos(2 * x[:, 1]) + x[:, 0] ** 2
        problem = ProblemData(mu=0.0, b=field, f=None, exact=lambda x, t: init(x))
        rho0 = identity_map(space).interpolate_physical(init)
        res = run_simulation(problem, motion, space, k, 0.5, n_steps * 1e-2, 1e-2)
        worst = max(worst, np.abs(res.rho - rho0).max() / np.abs(rho0).max())
    return worst <= tol, worst, tol, f"{n_steps} steps, k=1,2,3"


def check_pme_mass(ctx, tol=1e-3):
    """Relative mass drift of short PME runs on a coarse disk mesh."""
    disk = generate_disk_cvt(60, lloyd_iterations=60)
    worst = 0.0
    parts = []
    for strong, k in ((True, 1), (True, 2), (True, 3), (False, 1), (False, 2), (False, 3)):
        space = VemSpace(disk, k)
        res = run_pme(space, 1e-4, duration=2e-3, strong=strong)
        m0, m1 = res.mass_history[0][1], res.mass_history[-1][1]
        drift = abs(m1 - m0) / abs(m0)
        worst = max(worst, drift)
        parts.append(f"{'strong' if strong else 'weak'} k={k}: {drift:.1e}")
    return worst <= tol, worst, tol, "; ".join(parts)


CHECKS: List[tuple] = [
    ("projector polynomial reproduction", check_projector_reproduction),
    ("quadrature exactness vs divergence theorem", check_quadrature_exactness),
    ("M/A symmetry and definiteness", check_form_definiteness),
    ("identity map reduces to fixed-mesh VEM", check_identity_reduction),
    ("j positivity on all preset maps", check_jacobian_positivity),
    ("Heun second-order ratio", check_heun_order),
    ("pure-transport DoF invariance", check_transport_invariance),
    ("PME mass drift", check_pme_mass),
]


def run_checks(names=None, report: Callable = None):
    """Run the invariant suite; returns the list of results."""
    ctx = _Context()
    out = []
    for name, fn in CHECKS:
        if names is not None and name not in names:
            continue
        t0 = time.perf_counter()
        try:
            ok, value, limit, detail = fn(ctx)
        except Exception as exc:  # a crash is a failed check, not a crashed suite
            ok, value, limit, detail = False, math.nan, math.nan, f"{type(exc).__name__}: {exc}"
        res = CheckResult(name, bool(ok), float(value), float(limit), detail, time.perf_counter() - t0)
        out.append(res)
        if report is not None:
            report(res)
    return out
