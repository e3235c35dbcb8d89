"""Enhanced Lagrangian virtual element spaces of degree 1, 2 and 3.

Local degrees of freedom on an element with ``n`` vertices are ordered as

* the ``n`` vertex values (counter-clockwise),
* ``k - 1`` interior Gauss-Lobatto values per edge, edge ``i`` running from
  vertex ``i`` to vertex ``i + 1``,
* the ``k(k-1)/2`` scaled moments ``|E|^-1 int_E v m`` against the scaled
  monomials of degree ``<= k - 2``.

Scaled monomials ``((x - xc)/h)^a ((y - yc)/h)^b`` are ordered by total degree
and then by decreasing ``a``. Projector matrices map local DoF vectors to
monomial coefficients.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .mesh import element_geometry
from .quadrature import gauss_lobatto, polygon_quadrature, SUPPORTED_DEGREES


class ProjectorError(Exception):
    """Singular local projector system; usually a badly shaped element."""


class InterpolationError(ValueError):
    pass


def n_polys(k):
    return (k + 1) * (k + 2) // 2 if k >= 0 else 0


@lru_cache(maxsize=None)
def monomial_exponents(k):
    return tuple((d - b, b) for d in range(k + 1) for b in range(d + 1))


def eval_monomials(xy, centroid, h, k):
    """Scaled monomials of degree <= k at points ``xy`` -> (..., n_polys(k))."""
    xy = np.asarray(xy, dtype=float)
    s = (xy[..., 0] - centroid[0]) / h
    t = (xy[..., 1] - centroid[1]) / h
    return np.stack([s ** a * t ** b for a, b in monomial_exponents(k)], axis=-1)


def _monomial_grad(xy, centroid, h, k):
    """Gradients of the scaled monomials at points -> (npts, n_polys(k), 2)."""
    s = (xy[:, 0] - centroid[0]) / h
    t = (xy[:, 1] - centroid[1]) / h
    out = np.zeros((len(xy), n_polys(k), 2))
    for i, (a, b) in enumerate(monomial_exponents(k)):
        if a:
            out[:, i, 0] = a * s ** (a - 1) * t ** b / h
        if b:
            out[:, i, 1] = b * s ** a * t ** (b - 1) / h
    return out


def _index_of(k):
    return {e: i for i, e in enumerate(monomial_exponents(k))}


# --------------------------------------------------------------------------
# DoF layout


@dataclass(frozen=True)
class DofLayout:
    """Global enumeration: vertices, then edge nodes, then element moments."""

    k: int
    n_dofs: int
    n_vertex_dofs: int
    n_edge_dofs: int
    n_moment_dofs: int
    element_dofs: list  # per element, local -> global
    boundary_dofs: np.ndarray
    node_xy: np.ndarray  # reference positions of the point DoFs

    @property
    def n_point_dofs(self):
        return self.n_vertex_dofs + self.n_edge_dofs

    @property
    def n_local_moments(self):
        return n_polys(self.k - 2)

    def interior_dofs(self):
        mask = np.ones(self.n_dofs, dtype=bool)
        mask[self.boundary_dofs] = False
        return np.flatnonzero(mask)


def build_dof_layout(mesh, k):
    if k not in SUPPORTED_DEGREES:
        raise ValueError(f"unsupported degree k={k}; supported: {SUPPORTED_DEGREES}")
    nv, ne_edges, nel = mesh.n_vertices, mesh.n_edges, mesh.n_elements
    per_edge = k - 1
    n_mom = n_polys(k - 2)
    edge_base = nv
    mom_base = nv + ne_edges * per_edge
    n_dofs = mom_base + nel * n_mom

    gl, _ = gauss_lobatto(k)
    frac = 0.5 * (gl[1:-1] + 1.0)
    a = mesh.vertices[mesh.edges[:, 0]]
    b = mesh.vertices[mesh.edges[:, 1]]
    edge_xy = a[:, None, :] + frac[None, :, None] * (b - a)[:, None, :]
    node_xy = np.vstack([mesh.vertices, edge_xy.reshape(-1, 2)])

    element_dofs = []
    for e, cyc in enumerate(mesh.elements):
        n = len(cyc)
        loc = [int(v) for v in cyc]
        for i, g in enumerate(mesh.element_edges[e]):
            idx = edge_base + g * per_edge + np.arange(per_edge)
            if int(mesh.edges[g, 0]) != int(cyc[i]):
                idx = idx[::-1]
            loc.extend(idx.tolist())
        loc.extend(range(mom_base + e * n_mom, mom_base + (e + 1) * n_mom))
        assert len(loc) == n * k + n_mom
        element_dofs.append(np.array(loc, dtype=np.int64))

    bedges = mesh.boundary_edges
    bdofs = [np.flatnonzero(mesh.boundary_vertex_flags)]
    if per_edge:
        bdofs.append((edge_base + bedges[:, None] * per_edge + np.arange(per_edge)).ravel())
    boundary = np.unique(np.concatenate(bdofs))
    return DofLayout(
        k=k,
        n_dofs=n_dofs,
        n_vertex_dofs=nv,
        n_edge_dofs=ne_edges * per_edge,
        n_moment_dofs=nel * n_mom,
        element_dofs=element_dofs,
        boundary_dofs=boundary,
        node_xy=node_xy,
    )


# --------------------------------------------------------------------------
# local projectors


@dataclass(frozen=True)
class ElementProjectors:
    pi_nabla: np.ndarray  # (n_k, nd)
    pi_zero: np.ndarray  # (n_k, nd)
    pi_one: np.ndarray  # (2, n_{k-1}, nd)
    dof_of_poly: np.ndarray  # (nd, n_k)
    centroid: np.ndarray
    diameter: float
    area: float


def _edge_nodes(geom, k):
    """Per edge: GL node coordinates (k+1, 2), weights scaled by length/2 and
    the local DoF index of every node."""
    gl, wl = gauss_lobatto(k)
    n = len(geom.vertices)
    out = []
    for i in range(n):
        p, q = geom.vertices[i], geom.vertices[(i + 1) % n]
        xy = p + 0.5 * (gl[:, None] + 1.0) * (q - p)
        w = 0.5 * geom.edge_lengths[i] * wl
        idx = [i] + [n + i * (k - 1) + j for j in range(k - 1)] + [(i + 1) % n]
        out.append((xy, w, np.array(idx), geom.edge_normals[i]))
    return out


def _solve(a, b, element):
    try:
        lu = sla.lu_factor(a, check_finite=True)
    except (ValueError, sla.LinAlgError) as exc:
        raise ProjectorError(f"element {element}: singular projector system ({exc})") from None
    if np.min(np.abs(np.diag(lu[0]))) <= 1e-14 * np.max(np.abs(np.diag(lu[0]))):
        raise ProjectorError(f"element {element}: singular projector system")
    return sla.lu_solve(lu, b)


def _local_projectors(geom, k, rule, element=-1):
    n = len(geom.vertices)
    nk, nk1, nk2 = n_polys(k), n_polys(k - 1), n_polys(k - 2)
    nd = n * k + nk2
    xc, h, area = geom.centroid, geom.diameter, geom.area
    mom0 = n * k
    exps = monomial_exponents(k)

    mq = eval_monomials(rule.points, xc, h, k)
    hmat = (mq * rule.weights[:, None]).T @ mq  # int m_a m_b

    edges = _edge_nodes(geom, k)

    # D: dof_i(m_a)
    dmat = np.zeros((nd, nk))
    dmat[:n] = eval_monomials(geom.vertices, xc, h, k)
    for xy, _, idx, _ in edges:
        if k > 1:
            dmat[idx[1:-1]] = eval_monomials(xy[1:-1], xc, h, k)
    if nk2:
        dmat[mom0:] = hmat[:nk2] / area

    # B: int grad m_a . grad phi_i, first row replaced by the mean constraint
    bmat = np.zeros((nk, nd))
    for xy, w, idx, nrm in edges:
        dn = _monomial_grad(xy, xc, h, k) @ nrm  # (k+1, nk)
        np.add.at(bmat.T, idx, (w[:, None] * dn))
    if k >= 2:
        ix2 = _index_of(k - 2)
        for a_, (a, b) in enumerate(exps):
            if a >= 2:
                bmat[a_, mom0 + ix2[(a - 2, b)]] -= area * a * (a - 1) / h ** 2
            if b >= 2:
                bmat[a_, mom0 + ix2[(a, b - 2)]] -= area * b * (b - 1) / h ** 2
    bmat[0] = 0.0
    if k == 1:
        bmat[0, :n] = 1.0 / n
    else:
        bmat[0, mom0] = 1.0
    gmat = bmat @ dmat
    pi_nabla = _solve(gmat, bmat, element)

    # C: int phi_i m_a, enhancement for degrees k-1 and k
    cmat = np.zeros((nk, nd))
    if nk2:
        cmat[np.arange(nk2), mom0 + np.arange(nk2)] = area
    cmat[nk2:] = (hmat @ pi_nabla)[nk2:]
    pi_zero = _solve(hmat, cmat, element)

    # gradient projection onto [P_{k-1}]^2 by integration by parts
    emat = np.zeros((2, nk1, nd))
    for xy, w, idx, nrm in edges:
        m = eval_monomials(xy, xc, h, k - 1)  # (k+1, nk1)
        for c in range(2):
            np.add.at(emat[c].T, idx, w[:, None] * m * nrm[c])
    if k >= 2:
        ix2 = _index_of(k - 2)
        for a_, (a, b) in enumerate(monomial_exponents(k - 1)):
            if a >= 1:
                emat[0, a_, mom0 + ix2[(a - 1, b)]] -= area * a / h
            if b >= 1:
                emat[1, a_, mom0 + ix2[(a, b - 1)]] -= area * b / h
    h1 = hmat[:nk1, :nk1]
    pi_one = np.stack([_solve(h1, emat[c], element) for c in range(2)])

    return ElementProjectors(
        pi_nabla=pi_nabla,
        pi_zero=pi_zero,
        pi_one=pi_one,
        dof_of_poly=dmat,
        centroid=xc,
        diameter=h,
        area=area,
    ), mq


def build_projectors(mesh, layout, element):
    """Projector matrices of one element for the layout's degree."""
    geom = element_geometry(mesh, element)
    rule = polygon_quadrature(geom, 2 * layout.k + 2)
    return _local_projectors(geom, layout.k, rule, element)[0]


def dofi_dofi(u, v):
    """DoF-wise inner product used as stabilisation."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if u.shape != v.shape:
        raise ValueError(f"length mismatch: {u.shape} vs {v.shape}")
    return float(np.dot(u.ravel(), v.ravel()))


# --------------------------------------------------------------------------
# vectorised space


def _bmm(a, b):
    """Batched a @ b where b is (ne, n) or (ne, n, c)."""
    if b.ndim == 2:
        return (a @ b[:, :, None])[:, :, 0]
    return a @ b


@dataclass
class ElementGroup:
    """Elements sharing a vertex count, with stacked per-element data."""

    elements: np.ndarray  # (ne,)
    dofs: np.ndarray  # (ne, nd)
    diameter: np.ndarray  # (ne,)
    area: np.ndarray  # (ne,)
    centroid: np.ndarray  # (ne, 2)
    qp: np.ndarray  # (ne, nq, 2)
    qw: np.ndarray  # (ne, nq)
    mono: np.ndarray  # (ne, nq, n_k)
    pi_zero: np.ndarray  # (ne, n_k, nd)
    pi_one: np.ndarray  # (ne, 2 * n_{k-1}, nd), x block then y block
    stab: np.ndarray  # (ne, nd, nd)  (I - D Pi0)^T (I - D Pi0)

    @property
    def n_local(self):
        return self.dofs.shape[1]


class VemSpace:
    """Degree-k enhanced VEM space on a reference mesh.

    Holds the DoF layout, per-element projectors and the stacked arrays used
    by the vectorised assembly routines. Volume integrals use a fan
    quadrature of order ``2k + 2``.
    """

    def __init__(self, mesh, k):
        self.mesh = mesh
        self.k = k
        self.layout = build_dof_layout(mesh, k)
        self.quad_order = 2 * k + 2
        self.projectors = []
        nk1 = n_polys(k - 1)
        by_size = {}
        for e in range(mesh.n_elements):
            geom = element_geometry(mesh, e)
            rule = polygon_quadrature(geom, self.quad_order)
            proj, mq = _local_projectors(geom, k, rule, e)
            self.projectors.append(proj)
            by_size.setdefault(len(geom.vertices), []).append((e, geom, rule, proj, mq))
        self.groups = []
        for n in sorted(by_size):
            items = by_size[n]
            els = np.array([it[0] for it in items])
            dmat = np.stack([it[3].dof_of_poly for it in items])
            pi0 = np.stack([it[3].pi_zero for it in items])
            nd = dmat.shape[1]
            resid = np.eye(nd)[None] - dmat @ pi0
            self.groups.append(
                ElementGroup(
                    elements=els,
                    dofs=np.stack([self.layout.element_dofs[e] for e in els]),
                    diameter=np.array([it[1].diameter for it in items]),
                    area=np.array([it[1].area for it in items]),
                    centroid=np.stack([it[1].centroid for it in items]),
                    qp=np.stack([it[2].points for it in items]),
                    qw=np.stack([it[2].weights for it in items]),
                    mono=np.stack([it[4] for it in items]),
                    pi_zero=pi0,
                    pi_one=np.stack([it[3].pi_one.reshape(2 * nk1, nd) for it in items]),
                    stab=np.transpose(resid, (0, 2, 1)) @ resid,
                )
            )
        self._build_pattern()

    @property
    def n_dofs(self):
        return self.layout.n_dofs

    @property
    def boundary_dofs(self):
        return self.layout.boundary_dofs

    def _build_pattern(self):
        n = self.n_dofs
        keys = []
        for g in self.groups:
            r = np.repeat(g.dofs[:, :, None], g.n_local, axis=2)
            c = np.repeat(g.dofs[:, None, :], g.n_local, axis=1)
            keys.append((r * n + c).ravel())
        keys = np.concatenate(keys)
        uniq, inverse = np.unique(keys, return_inverse=True)
        self._scatter = inverse
        rows = uniq // n
        self._indices = (uniq % n).astype(np.int32)
        self._indptr = np.searchsorted(rows, np.arange(n + 1)).astype(np.int32)
        self._nnz = len(uniq)

    def assemble_matrix(self, local):
        """Sum per-group local matrices (list of (ne, nd, nd)) into CSR."""
        vals = np.concatenate([m.ravel() for m in local])
        data = np.bincount(self._scatter, weights=vals, minlength=self._nnz)
        return sp.csr_matrix((data, self._indices.copy(), self._indptr.copy()), shape=(self.n_dofs, self.n_dofs))

    def assemble_vector(self, local):
        """Sum per-group local vectors (list of (ne, nd[, c])) into a global array."""
        tail = local[0].shape[2:]
        out = np.zeros((self.n_dofs,) + tail)
        for g, v in zip(self.groups, local):
            np.add.at(out, g.dofs.ravel(), v.reshape((-1,) + tail))
        return out

    def gather(self, values):
        """Local DoF arrays (ne, nd[, c]) of a global DoF array, per group."""
        values = np.asarray(values)
        return [values[g.dofs] for g in self.groups]

    # ---------------------------------------------------------------- interpolation

    def interpolate(self, f):
        """VEM interpolant of ``f`` given in reference coordinates.

        ``f`` maps an (n, 2) array of points to (n,) or (n, c) values.
        """
        quad = [g.qp.reshape(-1, 2) for g in self.groups]
        return self.interpolate_at(f, self.layout.node_xy, quad)

    def interpolate_at(self, f, node_xy, quad_xy):
        """Interpolant of ``f`` evaluated at given node and quadrature positions.

        ``node_xy`` holds one position per point DoF; ``quad_xy`` one
        (ne * nq, 2) array per element group. This allows composing ``f``
        with a discrete map.
        """
        lay = self.layout
        nodal = np.asarray(f(node_xy), dtype=float)
        out = np.zeros((lay.n_dofs,) + nodal.shape[1:])
        out[: lay.n_point_dofs] = nodal
        if lay.n_local_moments:
            nm = lay.n_local_moments
            for g, xy in zip(self.groups, quad_xy):
                vals = np.asarray(f(xy), dtype=float)
                vals = vals.reshape(g.qw.shape + vals.shape[1:])
                wm = g.qw[:, None, :] * np.swapaxes(g.mono[:, :, :nm], 1, 2) / g.area[:, None, None]
                mom = _bmm(wm, vals)
                out[g.dofs[:, -nm:]] = mom
        if not np.all(np.isfinite(out)):
            bad = np.flatnonzero(~np.isfinite(out.reshape(lay.n_dofs, -1)).all(1))
            raise InterpolationError(f"non-finite value at DoF {int(bad[0])}")
        return out

    # ---------------------------------------------------------------- projections

    def pi_zero_at_quadrature(self, values):
        """Pi^0_k of a DoF array evaluated at every group's quadrature points."""
        return [_bmm(g.mono, _bmm(g.pi_zero, loc)) for g, loc in zip(self.groups, self.gather(values))]

    def pi_one_at_quadrature(self, values):
        """Pi^1_{k-1} of a DoF array at quadrature points -> (ne, nq, [c,] 2)."""
        nk1 = n_polys(self.k - 1)
        out = []
        for g, loc in zip(self.groups, self.gather(values)):
            coeff = _bmm(g.pi_one, loc)  # (ne, 2 nk1[, c])
            m1 = g.mono[:, :, :nk1]
            val = np.stack([_bmm(m1, coeff[:, d * nk1:(d + 1) * nk1]) for d in range(2)], axis=-1)
            out.append(val)
        return out

    def integrate(self, quad_values):
        """Sum over elements of quadrature-weighted values (list per group)."""
        return float(sum((g.qw * v).sum() for g, v in zip(self.groups, quad_values)))
