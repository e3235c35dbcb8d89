"""Polygonal reference meshes.

Meshes are stored as a vertex array plus a list of counter-clockwise vertex
cycles. Edge connectivity is rebuilt on construction and the tiling
invariants are checked, so every ``PolygonalMesh`` instance is valid.

Centroidal Voronoi tessellations of the unit square and of a disk are
generated by Lloyd relaxation on top of :class:`scipy.spatial.Voronoi`,
with the domain boundary imposed by mirroring the seeds across it.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linprog
from scipy.spatial import Voronoi


class MeshError(Exception):
    """Base class for mesh related failures."""


class MeshFormatError(MeshError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class MeshInvalidError(MeshError):
    def __init__(self, message, element=None):
        if element is not None:
            message = f"element {element}: {message}"
        super().__init__(message)
        self.element = element


class MeshGenerationError(MeshError):
    pass


@dataclass(frozen=True)
class ElementGeometry:
    diameter: float
    centroid: np.ndarray
    area: float
    vertices: np.ndarray
    # one row per edge: (start vertex, end vertex) local coordinates
    edge_lengths: np.ndarray
    edge_normals: np.ndarray

    @property
    def edges(self):
        n = len(self.vertices)
        return [
            ((self.vertices[i], self.vertices[(i + 1) % n]), self.edge_lengths[i], self.edge_normals[i])
            for i in range(n)
        ]


@dataclass(frozen=True)
class RegularityReport:
    gamma_min: float
    delta_min: float
    worst_element: int
    gamma: np.ndarray = field(repr=False)
    delta: np.ndarray = field(repr=False)


def polygon_area(xy):
    x, y = xy[:, 0], xy[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def polygon_centroid(xy):
    x, y = xy[:, 0], xy[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    a = 0.5 * cross.sum()
    cx = ((x + xn) * cross).sum() / (6.0 * a)
    cy = ((y + yn) * cross).sum() / (6.0 * a)
    return np.array([cx, cy])


def polygon_diameter(xy):
    d = xy[:, None, :] - xy[None, :, :]
    return float(np.sqrt((d ** 2).sum(-1).max()))


def _segments_cross(p1, p2, q1, q2):
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    d1, d2 = orient(q1, q2, p1), orient(q1, q2, p2)
    d3, d4 = orient(p1, p2, q1), orient(p1, p2, q2)
    return d1 * d2 < 0 and d3 * d4 < 0


def _is_simple(xy):
    n = len(xy)
    if n == 3:
        return True
    for i in range(n):
        for j in range(i + 2, n):
            if i == 0 and j == n - 1:
                continue
            if _segments_cross(xy[i], xy[(i + 1) % n], xy[j], xy[(j + 1) % n]):
                return False
    return True


class PolygonalMesh:
    """Immutable polygonal mesh of a reference domain.

    Parameters
    ----------
    vertices : (NV, 2) array
    elements : sequence of integer sequences, counter-clockwise cycles
    domain_area : float, optional
        Expected area of the reference domain; if given, the element areas
        must sum to it within 1e-12 relative.
    """

    def __init__(self, vertices, elements, domain_area=None):
        self.vertices = np.array(vertices, dtype=float)
        self.vertices.setflags(write=False)
        self.elements = [np.array(e, dtype=np.int64) for e in elements]
        for e in self.elements:
            e.setflags(write=False)
        self._validate_and_connect(domain_area)

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_elements(self):
        return len(self.elements)

    @property
    def n_edges(self):
        return len(self.edges)

    def _validate_and_connect(self, domain_area):
        nv = len(self.vertices)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 2:
            raise MeshInvalidError("vertices must be an (NV, 2) array")
        directed = {}
        edge_id = {}
        edges = []
        edge_elements = []
        element_edges = []
        areas = np.empty(len(self.elements))
        for ie, cyc in enumerate(self.elements):
            if len(cyc) < 3:
                raise MeshInvalidError("fewer than 3 vertices", ie)
            if cyc.min() < 0 or cyc.max() >= nv:
                raise MeshInvalidError("vertex index out of range", ie)
            if len(set(cyc.tolist())) != len(cyc):
                raise MeshInvalidError("repeated vertex", ie)
            xy = self.vertices[cyc]
            areas[ie] = polygon_area(xy)
            if areas[ie] <= 0.0:
                raise MeshInvalidError("non-positive signed area (not counter-clockwise?)", ie)
            if not _is_simple(xy):
                raise MeshInvalidError("self-intersecting polygon", ie)
            local = []
            m = len(cyc)
            for i in range(m):
                a, b = int(cyc[i]), int(cyc[(i + 1) % m])
                if (a, b) in directed:
                    raise MeshInvalidError(
                        f"edge ({a}, {b}) already used by element {directed[(a, b)]} (overlap)", ie
                    )
                directed[(a, b)] = ie
                key = (min(a, b), max(a, b))
                if key not in edge_id:
                    edge_id[key] = len(edges)
                    edges.append(key)
                    edge_elements.append([ie])
                else:
                    edge_elements[edge_id[key]].append(ie)
                local.append(edge_id[key])
            element_edges.append(np.array(local, dtype=np.int64))

        self.areas = areas
        self.edges = np.array(edges, dtype=np.int64).reshape(-1, 2)
        self.edge_elements = edge_elements
        self.element_edges = element_edges
        self.boundary_edges = np.array([i for i, els in enumerate(edge_elements) if len(els) == 1], dtype=np.int64)
        flags = np.zeros(nv, dtype=bool)
        flags[self.edges[self.boundary_edges].ravel()] = True
        self.boundary_vertex_flags = flags
        self.boundary_edge_list = []
        for ie, local in enumerate(element_edges):
            for le, g in enumerate(local):
                if len(edge_elements[g]) == 1:
                    self.boundary_edge_list.append((ie, le))
        used = np.zeros(nv, dtype=bool)
        for cyc in self.elements:
            used[cyc] = True
        if not used.all():
            raise MeshInvalidError(f"{int((~used).sum())} vertices not referenced by any element")

        if domain_area is not None:
            total = areas.sum()
            if abs(total - domain_area) > 1e-12 * abs(domain_area):
                raise MeshInvalidError(f"element areas sum to {total!r}, expected {domain_area!r}")

    @property
    def domain_area(self):
        return float(self.areas.sum())

    def element_vertices(self, element):
        return self.vertices[self.elements[element]]


def element_geometry(mesh, element):
    """Area, centroid, diameter and edge data of one element."""
    if not 0 <= element < mesh.n_elements:
        raise IndexError(f"element index {element} out of range")
    xy = mesh.element_vertices(element)
    d = np.roll(xy, -1, axis=0) - xy
    lengths = np.hypot(d[:, 0], d[:, 1])
    normals = np.column_stack([d[:, 1], -d[:, 0]]) / lengths[:, None]
    return ElementGeometry(
        diameter=polygon_diameter(xy),
        centroid=polygon_centroid(xy),
        area=polygon_area(xy),
        vertices=xy,
        edge_lengths=lengths,
        edge_normals=normals,
    )


def global_mesh_size(mesh):
    return max(polygon_diameter(mesh.element_vertices(e)) for e in range(mesh.n_elements))


def _kernel_radius(xy):
    # Largest ball inside the intersection of the inner half-planes of all
    # edges (the polygon kernel); equals the inradius for convex polygons.
    d = np.roll(xy, -1, axis=0) - xy
    lengths = np.hypot(d[:, 0], d[:, 1])
    normals = np.column_stack([d[:, 1], -d[:, 0]]) / lengths[:, None]
    # n.(c - p) + r <= 0
    a_ub = np.column_stack([normals, np.ones(len(xy))])
    b_ub = (normals * xy).sum(1)
    res = linprog([0.0, 0.0, -1.0], A_ub=a_ub, b_ub=b_ub, bounds=[(None, None), (None, None), (0, None)])
    if res.status != 0:
        return 0.0
    return float(res.x[2])


def check_regularity(mesh):
    """Audit the star-shapedness and edge-length ratios of every element."""
    gamma = np.empty(mesh.n_elements)
    delta = np.empty(mesh.n_elements)
    for e in range(mesh.n_elements):
        xy = mesh.element_vertices(e)
        h = polygon_diameter(xy)
        d = np.roll(xy, -1, axis=0) - xy
        delta[e] = np.hypot(d[:, 0], d[:, 1]).min() / h
        gamma[e] = _kernel_radius(xy) / h
    worst = int(np.argmin(np.minimum(gamma, delta)))
    return RegularityReport(
        gamma_min=float(gamma.min()), delta_min=float(delta.min()), worst_element=worst, gamma=gamma, delta=delta
    )


# --------------------------------------------------------------------------
# file I/O


def save_mesh(mesh, path):
    lines = [f"# polygonal mesh: {mesh.n_vertices} vertices, {mesh.n_elements} elements", f"{mesh.n_vertices} {mesh.n_elements}"]
    lines += [f"{x!r} {y!r}" for x, y in mesh.vertices.tolist()]
    lines += [" ".join(str(v) for v in [len(e), *e.tolist()]) for e in mesh.elements]
    Path(path).write_text("\n".join(lines) + "\n")


def load_mesh(path, domain_area=None):
    text = Path(path).read_text()
    rows = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        s = raw.strip()
        if not s or s.startswith("#"):
            continue
        rows.append((lineno, s.split()))
    if not rows:
        raise MeshFormatError("empty mesh file")
    lineno, head = rows[0]
    try:
        nv, ne = (int(t) for t in head)
    except ValueError:
        raise MeshFormatError("expected header 'NV NE'", lineno) from None
    if len(rows) != 1 + nv + ne:
        raise MeshFormatError(f"expected {nv} vertex and {ne} element lines, found {len(rows) - 1} lines", rows[-1][0])
    verts = np.empty((nv, 2))
    for i in range(nv):
        lineno, tok = rows[1 + i]
        if len(tok) != 2:
            raise MeshFormatError("expected 'x y'", lineno)
        try:
            verts[i] = [float(tok[0]), float(tok[1])]
        except ValueError:
            raise MeshFormatError("bad coordinate", lineno) from None
    elements = []
    for i in range(ne):
        lineno, tok = rows[1 + nv + i]
        try:
            vals = [int(t) for t in tok]
        except ValueError:
            raise MeshFormatError("bad element record", lineno) from None
        if len(vals) < 1 or vals[0] != len(vals) - 1:
            raise MeshFormatError("element vertex count does not match record length", lineno)
        elements.append(vals[1:])
    return PolygonalMesh(verts, elements, domain_area=domain_area)


# --------------------------------------------------------------------------
# centroidal Voronoi tessellations


def _square_mirror(seeds):
    # only generators close to a side can own a cell touching it; small
    # sets are mirrored whole since they may leave a side uncovered
    x, y = seeds[:, 0], seeds[:, 1]
    band = 1.0 if len(seeds) < 1000 else 4.0 / np.sqrt(len(seeds))
    parts = [seeds]
    for near, image in (
        (x < band, np.column_stack([-x, y])),
        (x > 1.0 - band, np.column_stack([2.0 - x, y])),
        (y < band, np.column_stack([x, -y])),
        (y > 1.0 - band, np.column_stack([x, 2.0 - y])),
    ):
        parts.append(image[near])
    return np.vstack(parts)


def _disk_mirror(seeds, radius):
    r = np.hypot(seeds[:, 0], seeds[:, 1])
    r = np.maximum(r, 1e-14 * radius)
    scale = (2.0 * radius - r) / r
    return np.vstack([seeds, seeds * scale[:, None]])


def _collapse_short_edges(points, cells, tol, priority):
    """Collapse cell edges shorter than ``tol`` and drop repeated vertices.

    A merged vertex takes the mean position of its highest-priority members
    (corner > boundary > interior) so the domain boundary is preserved.
    """
    parent = np.arange(len(points))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    pairs = set()
    for cyc in cells:
        for a, b in zip(cyc, cyc[1:] + cyc[:1]):
            if np.hypot(*(points[a] - points[b])) < tol:
                pairs.add((min(a, b), max(a, b)))
    for a, b in sorted(pairs):
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    roots = np.array([find(i) for i in range(len(points))])
    points = points.copy()
    for r in np.unique(roots[[a for p in pairs for a in p]]) if pairs else []:
        members = np.flatnonzero(roots == r)
        top = members[priority[members] == priority[members].max()]
        points[r] = points[top].mean(0)
    out = []
    for cyc in cells:
        c = [int(roots[v]) for v in cyc]
        c = [v for i, v in enumerate(c) if v != c[i - 1]]
        out.append(c)
    return points, out


def _flat_cells(cells):
    idx = np.concatenate([np.asarray(c, dtype=np.int64) for c in cells])
    counts = np.array([len(c) for c in cells])
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    nxt = np.arange(len(idx)) + 1
    nxt[starts + counts - 1] = starts
    return idx, idx[nxt], starts


def _centroids(vx, cells):
    a_idx, b_idx, starts = _flat_cells(cells)
    a, b = vx[a_idx], vx[b_idx]
    cross = a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]
    area = 0.5 * np.add.reduceat(cross, starts)
    cx = np.add.reduceat((a[:, 0] + b[:, 0]) * cross, starts) / (6.0 * area)
    cy = np.add.reduceat((a[:, 1] + b[:, 1]) * cross, starts) / (6.0 * area)
    return np.column_stack([cx, cy])


def _energies(vx, cells, seeds):
    """Exact sum over cells of the integral of |x - seed|^2 (fan from the seed)."""
    a_idx, b_idx, starts = _flat_cells(cells)
    owner = np.repeat(np.arange(len(cells)), [len(c) for c in cells])
    a, b = vx[a_idx] - seeds[owner], vx[b_idx] - seeds[owner]
    cross = a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]
    sign = np.sign(np.add.reduceat(cross, starts))[owner]
    # integral over triangle (0, a, b) of |x|^2 = |T| (|a|^2 + a.b + |b|^2) / 6
    return float((sign * 0.5 * cross * ((a * a).sum(1) + (a * b).sum(1) + (b * b).sum(1)) / 6.0).sum())


def _voronoi_cells(seeds, domain, radius):
    """Voronoi cells of ``seeds`` clipped to the domain by mirroring.

    Returns vertex coordinates, the cell cycles and a per-vertex priority
    (2 corner, 1 boundary, 0 interior).
    """
    n = len(seeds)
    pts = _square_mirror(seeds) if domain == "square" else _disk_mirror(seeds, radius)
    vor = Voronoi(pts)
    vx = vor.vertices.copy()
    cells = []
    for i in range(n):
        region = vor.regions[vor.point_region[i]]
        if -1 in region or len(region) < 3:
            raise MeshGenerationError(f"unbounded Voronoi cell for seed {i}")
        cells.append(list(region))
    priority = np.zeros(len(vx), dtype=np.int64)
    if domain == "square":
        vx = np.clip(vx, 0.0, 1.0)
        on_side = (np.abs(vx) < 1e-12) | (np.abs(vx - 1.0) < 1e-12)
        vx[np.abs(vx) < 1e-12] = 0.0
        vx[np.abs(vx - 1.0) < 1e-12] = 1.0
        priority = on_side.sum(1)
    else:
        on_boundary = set()
        for (p, q), rv in zip(vor.ridge_points, vor.ridge_vertices):
            if (p < n) != (q < n):
                on_boundary.update(v for v in rv if v >= 0)
        idx = np.array(sorted(on_boundary), dtype=np.int64)
        r = np.hypot(vx[idx, 0], vx[idx, 1])
        vx[idx] *= (radius / r)[:, None]
        priority[idx] = 1
    a_idx, b_idx, starts = _flat_cells(cells)
    cross = vx[a_idx, 0] * vx[b_idx, 1] - vx[a_idx, 1] * vx[b_idx, 0]
    for i in np.flatnonzero(np.add.reduceat(cross, starts) < 0):
        cells[i].reverse()
    return vx, cells, priority


def _finalise(vx, cells, priority, collapse_tol):
    vx, cells = _collapse_short_edges(vx, cells, collapse_tol, priority)
    used = sorted({v for c in cells for v in c})
    remap = {v: i for i, v in enumerate(used)}
    verts = vx[used]
    out = []
    for i, c in enumerate(cells):
        if len(c) < 3 or polygon_area(verts[[remap[v] for v in c]]) <= 1e-14:
            raise MeshGenerationError(
                f"degenerate Voronoi cell {i} (zero area) after clipping; try more Lloyd iterations"
            )
        out.append([remap[v] for v in c])
    return verts, out


def _cvt(seeds, lloyd_iterations, domain, radius, energies=None):
    for it in range(lloyd_iterations + 1):
        vx, cells, priority = _voronoi_cells(seeds, domain, radius)
        if energies is not None:
            energies.append(_energies(vx, cells, seeds))
        if it == lloyd_iterations:
            return vx, cells, priority
        seeds = _centroids(vx, cells)


def generate_cvt(n_seeds, lloyd_iterations=50, rng_seed=0, seeds=None, energies=None, collapse_fraction=0.1):
    """Lloyd-relaxed Voronoi mesh of the unit square with ``n_seeds`` cells.

    ``seeds`` overrides the random initial generators. If ``energies`` is a
    list, the CVT energy of every iterate is appended to it. Edges shorter
    than ``collapse_fraction`` times the mean seed spacing are collapsed.
    """
    if n_seeds < 4:
        raise ValueError("n_seeds must be at least 4")
    if lloyd_iterations < 0:
        raise ValueError("lloyd_iterations must be non-negative")
    if seeds is None:
        seeds = np.random.default_rng(rng_seed).random((n_seeds, 2))
    seeds = np.asarray(seeds, dtype=float)
    if seeds.shape != (n_seeds, 2):
        raise ValueError("seeds must have shape (n_seeds, 2)")
    vx, cells, priority = _cvt(seeds, lloyd_iterations, "square", None, energies)
    verts, cells = _finalise(vx, cells, priority, collapse_fraction / np.sqrt(n_seeds))
    return PolygonalMesh(verts, cells, domain_area=1.0)


def generate_disk_cvt(n_seeds, radius=0.5, lloyd_iterations=60, rng_seed=0, collapse_fraction=0.1):
    """Lloyd-relaxed Voronoi mesh of the polygonal interpolant of a disk.

    The disk is centred at the origin and every boundary vertex lies on the
    circle of the given radius.
    """
    if n_seeds < 4:
        raise ValueError("n_seeds must be at least 4")
    rng = np.random.default_rng(rng_seed)
    r = radius * np.sqrt(rng.random(n_seeds))
    th = 2.0 * np.pi * rng.random(n_seeds)
    seeds = np.column_stack([r * np.cos(th), r * np.sin(th)])
    vx, cells, priority = _cvt(seeds, lloyd_iterations, "disk", radius)
    spacing = np.sqrt(np.pi * radius ** 2 / n_seeds)
    verts, cells = _finalise(vx, cells, priority, collapse_fraction * spacing)
    mesh = PolygonalMesh(verts, cells)
    # collapsed boundary vertices are put back on the circle
    v = mesh.vertices.copy()
    b = mesh.boundary_vertex_flags
    v[b] *= (radius / np.hypot(v[b, 0], v[b, 1]))[:, None]
    return PolygonalMesh(v, cells)
