"""Gauss-Lobatto edge nodes and polygon quadrature by fan triangulation."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.polynomial import legendre
from scipy.special import roots_jacobi

SUPPORTED_DEGREES = (1, 2, 3)


class QuadratureError(Exception):
    pass


@dataclass(frozen=True)
class QuadratureRule:
    points: np.ndarray  # (nq, 2)
    weights: np.ndarray  # (nq,)
    order: int

    def integrate(self, values):
        return np.tensordot(self.weights, values, axes=(0, 0))


@lru_cache(maxsize=None)
def _gauss_lobatto(k):
    # interior nodes are the roots of P_k'
    pk = np.zeros(k + 1)
    pk[k] = 1.0
    inner = np.sort(legendre.legroots(legendre.legder(pk))) if k > 1 else np.empty(0)
    nodes = np.concatenate([[-1.0], inner, [1.0]])
    weights = 2.0 / (k * (k + 1) * legendre.legval(nodes, pk) ** 2)
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return nodes, weights


def gauss_lobatto_nodes(k):
    """The k+1 Gauss-Lobatto nodes on [-1, 1], endpoints included."""
    return gauss_lobatto(k)[0]


def gauss_lobatto(k):
    """Nodes and weights of the (k+1)-point Gauss-Lobatto rule on [-1, 1].

    The rule integrates polynomials of degree 2k - 1 exactly, enough for the
    product of a degree-k edge trace and a degree-(k-1) polynomial.
    """
    if k not in SUPPORTED_DEGREES:
        raise ValueError(f"unsupported degree k={k}; supported: {SUPPORTED_DEGREES}")
    return _gauss_lobatto(k)


@lru_cache(maxsize=None)
def triangle_rule(order):
    """Collapsed Gauss rule on the reference triangle (0,0), (1,0), (0,1).

    Tensor Gauss-Legendre x Gauss-Jacobi(1, 0) points mapped through the
    Duffy transform; exact for total degree ``order``.
    """
    n = max(1, (order + 2) // 2)
    s, ws = legendre.leggauss(n)
    t, wt = roots_jacobi(n, 1.0, 0.0)
    s = 0.5 * (s + 1.0)
    ws = 0.5 * ws
    # weight (1 - t') on [-1, 1] becomes (1 - v) dv on [0, 1] up to a factor 1/4
    v = 0.5 * (t + 1.0)
    wv = 0.25 * wt
    ss, vv = np.meshgrid(s, v, indexing="ij")
    pts = np.column_stack([(ss * (1.0 - vv)).ravel(), vv.ravel()])
    w = np.outer(ws, wv).ravel()
    pts.setflags(write=False)
    w.setflags(write=False)
    return pts, w


def fan_quadrature(vertices, centroid, order):
    """Quadrature points/weights on a polygon star-shaped w.r.t. ``centroid``."""
    ref_pts, ref_w = triangle_rule(order)
    a = vertices - centroid
    b = np.roll(vertices, -1, axis=0) - centroid
    det = a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]
    if np.any(det <= 0.0):
        raise QuadratureError("polygon is not star-shaped with respect to its centroid")
    # x = c + s a + t b on each fan triangle
    pts = centroid + ref_pts[None, :, 0:1] * a[:, None, :] + ref_pts[None, :, 1:2] * b[:, None, :]
    w = det[:, None] * ref_w[None, :]
    return pts.reshape(-1, 2), w.ravel()


def polygon_quadrature(geom, order):
    """Quadrature rule on an element, exact for polynomials of degree ``order``."""
    if order < 1:
        raise ValueError("quadrature order must be at least 1")
    pts, w = fan_quadrature(geom.vertices, geom.centroid, order)
    return QuadratureRule(points=pts, weights=w, order=order)


def polygon_monomial_integral(vertices, a, b):
    """Exact integral of x^a y^b over a counter-clockwise polygon.

    Uses the divergence theorem with the field (x^(a+1) y^b / (a+1), 0),
    integrating the edge contributions with a Gauss-Legendre rule that is
    exact for the resulting polynomial.
    """
    n = (a + b + 2) // 2 + 1
    t, w = legendre.leggauss(n)
    t = 0.5 * (t + 1.0)
    w = 0.5 * w
    p = np.asarray(vertices, dtype=float)
    q = np.roll(p, -1, axis=0)
    d = q - p
    x = p[:, 0:1] + t[None, :] * d[:, 0:1]
    y = p[:, 1:2] + t[None, :] * d[:, 1:2]
    # n_x ds = dy along a counter-clockwise boundary
    vals = x ** (a + 1) * y ** b / (a + 1)
    return float((vals @ w * d[:, 1]).sum())
