"""Isoparametric ALE forms on the reference mesh.

The ALE map and its velocity are vector VEM functions on the reference
space. The discrete Jacobian is the gradient projection of the map,
evaluated at quadrature points, and every form is integrated on the
reference elements with the determinant as weight. Physical-coordinate
data (convective velocity, forcing, exact solutions) are evaluated at the
L2-projected map value of each quadrature point.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .vem_core import n_polys, eval_monomials, VemSpace, _bmm


class DegenerateMapError(Exception):
    """The discrete Jacobian determinant is not positive somewhere."""


@dataclass(frozen=True)
class JacobianData:
    jac: np.ndarray  # (nq, 2, 2), rows are gradients of the map components
    det: np.ndarray  # (nq,)
    jac_inv_t: np.ndarray  # (nq, 2, 2)


@dataclass
class ProblemData:
    """Convection-diffusion data in physical coordinates.

    ``b(x, t)`` returns (n, 2) velocities, ``f(x, t)`` and ``exact(x, t)``
    return (n,) values for an (n, 2) array of points. ``stationary_b``
    declares that ``b`` does not depend on time.
    """

    mu: float = 1.0
    b: Optional[Callable] = None
    f: Optional[Callable] = None
    exact: Optional[Callable] = None
    exact_grad: Optional[Callable] = None
    stationary_b: bool = False

    def __post_init__(self):
        if self.mu < 0:
            raise ValueError("diffusivity mu must be non-negative")


@dataclass
class _GroupGeometry:
    jac: np.ndarray  # (ne, nq, 2, 2)
    det: np.ndarray  # (ne, nq)
    jinv: np.ndarray  # (ne, nq, 2, 2)
    x: np.ndarray  # (ne, nq, 2) physical positions (Pi^0 of the map)
    w: np.ndarray  # (ne, nq, 2) Pi^0 of the mesh velocity


def _inv2(a):
    det = a[..., 0, 0] * a[..., 1, 1] - a[..., 0, 1] * a[..., 1, 0]
    inv = np.empty_like(a)
    inv[..., 0, 0] = a[..., 1, 1]
    inv[..., 1, 1] = a[..., 0, 0]
    inv[..., 0, 1] = -a[..., 0, 1]
    inv[..., 1, 0] = -a[..., 1, 0]
    return inv / det[..., None, None], det


@dataclass
class AleMap:
    """Discrete ALE map and mesh velocity at time ``t``.

    ``map_dofs`` and ``velocity_dofs`` are (N, 2) arrays on the space's
    DoF layout. Positivity of the Jacobian determinant at all quadrature
    points is checked on construction.
    """

    space: VemSpace
    map_dofs: np.ndarray
    velocity_dofs: np.ndarray
    t: float = 0.0
    geometry: list = field(init=False, repr=False)

    def __post_init__(self):
        n = self.space.n_dofs
        self.map_dofs = np.asarray(self.map_dofs, dtype=float)
        self.velocity_dofs = np.asarray(self.velocity_dofs, dtype=float)
        if self.map_dofs.shape != (n, 2) or self.velocity_dofs.shape != (n, 2):
            raise ValueError(f"map and velocity DoF arrays must have shape ({n}, 2)")
        self.geometry = self._compute_geometry()

    def _compute_geometry(self):
        sp_ = self.space
        out = []
        grads = sp_.pi_one_at_quadrature(self.map_dofs)  # (ne, nq, comp, dir)
        xs = sp_.pi_zero_at_quadrature(self.map_dofs)
        ws = sp_.pi_zero_at_quadrature(self.velocity_dofs)
        for g, jac, x, w in zip(sp_.groups, grads, xs, ws):
            jinv, det = _inv2(jac)
            if not np.all(det > 0.0):
                e, q = np.unravel_index(np.argmin(det), det.shape)
                raise DegenerateMapError(
                    f"Jacobian determinant {det[e, q]:.3e} <= 0 in element {int(g.elements[e])} at t={self.t}"
                )
            out.append(_GroupGeometry(jac=jac, det=det, jinv=jinv, x=x, w=w))
        return out

    @property
    def node_positions(self):
        """Physical positions of the point DoF nodes."""
        return self.map_dofs[: self.space.layout.n_point_dofs]

    def with_velocity(self, velocity_dofs):
        """Copy of this map with new velocity DoFs (geometry reused)."""
        out = object.__new__(AleMap)
        out.space, out.map_dofs, out.t = self.space, self.map_dofs, self.t
        out.velocity_dofs = np.asarray(velocity_dofs, dtype=float)
        ws = self.space.pi_zero_at_quadrature(out.velocity_dofs)
        out.geometry = [
            _GroupGeometry(jac=g.jac, det=g.det, jinv=g.jinv, x=g.x, w=w) for g, w in zip(self.geometry, ws)
        ]
        return out

    def physical_quadrature_points(self):
        return [geo.x.reshape(-1, 2) for geo in self.geometry]

    def interpolate_physical(self, f):
        """Interpolant of ``f(x)`` composed with this map."""
        return self.space.interpolate_at(f, self.node_positions, self.physical_quadrature_points())


def pull_back_gradient(jinv, grad):
    """J^-T grad for stacked (..., 2, 2) inverses and (..., 2) gradients."""
    # written out: matmul on stacks of 2x2 matrices is slow
    g0, g1 = grad[..., 0], grad[..., 1]
    return np.stack([jinv[..., 0, 0] * g0 + jinv[..., 1, 0] * g1, jinv[..., 0, 1] * g0 + jinv[..., 1, 1] * g1], axis=-1)


def _apply_inverse(jinv, vec):
    """J^-1 vec for stacked inverses."""
    v0, v1 = vec[..., 0], vec[..., 1]
    return np.stack([jinv[..., 0, 0] * v0 + jinv[..., 0, 1] * v1, jinv[..., 1, 0] * v0 + jinv[..., 1, 1] * v1], axis=-1)


def identity_map(space, t=0.0):
    xy = space.interpolate(lambda p: p)
    return AleMap(space, xy, np.zeros_like(xy), t)


def interpolate_ale_map(map_fn, velocity_fn, space, t):
    """Component-wise interpolants of a closed-form map and its velocity.

    ``map_fn(xi, t)`` and ``velocity_fn(xi, t)`` take reference points.
    """
    x = space.interpolate(lambda p: map_fn(p, t))
    w = space.interpolate(lambda p: velocity_fn(p, t))
    return AleMap(space, x, w, t)


def jacobian_at_quadrature(ale, element, rule):
    """Discrete Jacobian, determinant and inverse transpose at rule points."""
    space = ale.space
    proj = space.projectors[element]
    loc = ale.map_dofs[space.layout.element_dofs[element]]  # (nd, 2)
    m = eval_monomials(rule.points, proj.centroid, proj.diameter, space.k - 1)
    # jac[q, comp, dir]
    jac = np.einsum("qa,dai,ic->qcd", m, proj.pi_one, loc)
    jinv, det = _inv2(jac)
    if not np.all(det > 0.0):
        raise DegenerateMapError(f"Jacobian determinant {det.min():.3e} <= 0 in element {element}")
    return JacobianData(jac=jac, det=det, jac_inv_t=np.swapaxes(jinv, -1, -2))


# --------------------------------------------------------------------------
# local forms, one (ne, nd, nd) array per element group


def _t(a):
    return np.swapaxes(a, -1, -2)


def local_mass(space, ale, weight=None, stab_scale=None):
    """Mass form: j-weighted Pi0 pairs plus h^2 dofi-dofi stabilisation.

    ``weight`` optionally multiplies the integrand (list per group of
    (ne, nq) arrays); ``stab_scale`` overrides the h^2 factor.
    """
    out = []
    for i, (g, geo) in enumerate(zip(space.groups, ale.geometry)):
        wj = g.qw * geo.det
        if weight is not None:
            wj = wj * weight[i]
        q = _t(g.mono * wj[:, :, None]) @ g.mono
        m = _t(g.pi_zero) @ q @ g.pi_zero
        s = g.diameter ** 2 if stab_scale is None else stab_scale[i]
        out.append(m + s[:, None, None] * g.stab)
    return out


def local_stiffness(space, ale, weight=None, stab_scale=None):
    """Pulled-back gradient pairs plus (unscaled) dofi-dofi stabilisation."""
    nk1 = n_polys(space.k - 1)
    out = []
    for i, (g, geo) in enumerate(zip(space.groups, ale.geometry)):
        # j J^-1 J^-T, entries written out
        ji = geo.jinv
        kq = {
            (0, 0): ji[..., 0, 0] ** 2 + ji[..., 0, 1] ** 2,
            (0, 1): ji[..., 0, 0] * ji[..., 1, 0] + ji[..., 0, 1] * ji[..., 1, 1],
            (1, 1): ji[..., 1, 0] ** 2 + ji[..., 1, 1] ** 2,
        }
        wq = g.qw * geo.det if weight is None else g.qw * geo.det * weight[i]
        m1 = g.mono[:, :, :nk1]
        ne = len(g.elements)
        q = np.empty((ne, 2 * nk1, 2 * nk1))
        for c in range(2):
            for d in range(c, 2):
                blk = _t(m1 * (wq * kq[c, d])[:, :, None]) @ m1
                q[:, c * nk1:(c + 1) * nk1, d * nk1:(d + 1) * nk1] = blk
                if d != c:
                    q[:, d * nk1:(d + 1) * nk1, c * nk1:(c + 1) * nk1] = _t(blk)
        a = _t(g.pi_one) @ q @ g.pi_one
        s = 1.0 if stab_scale is None else stab_scale[i][:, None, None]
        out.append(a + s * g.stab)
    return out


def local_vector_gradient_pairing(space, ale, vec):
    """Local matrices of int (vec . J^-T Pi1 v) Pi0 rho j  (row = test v).

    ``vec`` is a list per group of (ne, nq, 2) physical vectors.
    """
    nk1 = n_polys(space.k - 1)
    out = []
    for g, geo, v in zip(space.groups, ale.geometry, vec):
        # u = j J^-1 vec, so that vec . J^-T grad = grad . u
        u = _apply_inverse(geo.jinv, v) * geo.det[:, :, None]
        m1 = g.mono[:, :, :nk1]
        q = np.concatenate(
            [_t(m1 * (g.qw * u[:, :, c])[:, :, None]) @ g.mono for c in range(2)], axis=1
        )
        out.append(_t(g.pi_one) @ q @ g.pi_zero)
    return out


def local_convection(space, ale, problem, t=None):
    """Convection form with weight (Pi0 w - b) . Pi0 rho J^-T Pi1 v j."""
    t = ale.t if t is None else t
    vec = []
    for geo in ale.geometry:
        b = np.zeros_like(geo.x) if problem.b is None else problem.b(geo.x.reshape(-1, 2), t).reshape(geo.x.shape)
        vec.append(geo.w - b)
    return local_vector_gradient_pairing(space, ale, vec)


def local_quadrature_load(space, ale, values):
    """Local vectors of int g Pi0 v j for g given at quadrature points.

    ``values`` is a list per group of (ne, nq[, c]) arrays.
    """
    out = []
    for g, geo, v in zip(space.groups, ale.geometry, values):
        wv = (g.qw * geo.det).reshape(geo.det.shape + (1,) * (v.ndim - 2)) * v
        coeff = _bmm(_t(g.mono), wv)
        out.append(_bmm(_t(g.pi_zero), coeff))
    return out


def local_gradient_load(space, ale, vec):
    """Local vectors of int vec . J^-T Pi1 v j for (ne, nq, 2) arrays ``vec``."""
    nk1 = n_polys(space.k - 1)
    out = []
    for g, geo, v in zip(space.groups, ale.geometry, vec):
        u = _apply_inverse(geo.jinv, v) * (g.qw * geo.det)[:, :, None]
        coeff = _t(g.mono[:, :, :nk1]) @ u  # (ne, nk1, 2)
        coeff = _t(coeff).reshape(len(g.elements), 2 * nk1)
        out.append(_bmm(_t(g.pi_one), coeff))
    return out


def local_load(space, ale, problem, t=None):
    t = ale.t if t is None else t
    if problem.f is None:
        return [np.zeros(g.dofs.shape) for g in space.groups]
    vals = []
    for geo in ale.geometry:
        fv = np.asarray(problem.f(geo.x.reshape(-1, 2), t), dtype=float).reshape(geo.det.shape)
        if not np.all(np.isfinite(fv)):
            raise ValueError(f"non-finite forcing value at t={t}")
        vals.append(fv)
    return local_quadrature_load(space, ale, vals)


def assemble_mass(space, ale):
    return space.assemble_matrix(local_mass(space, ale))


def assemble_stiffness(space, ale):
    return space.assemble_matrix(local_stiffness(space, ale))


def assemble_convection(space, ale, problem):
    return space.assemble_matrix(local_convection(space, ale, problem))


def assemble_load(space, ale, problem, t=None):
    return space.assemble_vector(local_load(space, ale, problem, t))


@dataclass
class AssembledForms:
    M: object
    A: object
    B: object
    F: np.ndarray
    t: float


def assemble_forms(space, ale, problem, t=None):
    t = ale.t if t is None else t
    return AssembledForms(
        M=assemble_mass(space, ale),
        A=assemble_stiffness(space, ale),
        B=assemble_convection(space, ale, problem),
        F=assemble_load(space, ale, problem, t),
        t=t,
    )
