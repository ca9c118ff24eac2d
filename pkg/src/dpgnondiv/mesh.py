"""Conforming triangle meshes of polygonal domains with newest-vertex
bisection (NVB) refinement and boundary-vertex classification.

Triangles are stored with their refinement edge normalized to the first
local edge (vertices 0-1); bisection inserts the midpoint of that edge and
the two children again carry their refinement edges first.  A completed
mesh is immutable and safe to share across element-local computations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# boundary classification codes
INTERIOR = 0
STRAIGHT = 1   # boundary vertex, adjacent boundary edges collinear (angle pi)
CORNER = 2     # boundary vertex, interior angle strictly less than pi

_CLASS_NAMES = {INTERIOR: "interior", STRAIGHT: "straight", CORNER: "corner"}

# relative tolerance for the collinearity test in boundary classification
COLLINEAR_TOL = 1e-12

_MAX_CLOSURE_SWEEPS = 10_000


@dataclass(frozen=True)
class Vertex:
    id: int
    coords: np.ndarray
    boundary_class: int


@dataclass(frozen=True)
class Triangle:
    id: int
    vertices: tuple
    refinement_edge: int
    generation: int


class Mesh:
    """Conforming triangulation with derived edge adjacency.

    ``vertices`` is (nv, 2) float, ``triangles`` is (nt, 3) int with
    counter-clockwise orientation; the refinement edge of every triangle is
    its first edge (local vertices 0-1).
    """

    def __init__(self, vertices, triangles, generations=None):
        self.vertices = np.ascontiguousarray(vertices, dtype=float)
        self.triangles = np.ascontiguousarray(triangles, dtype=np.int64)
        if generations is None:
            generations = np.zeros(len(self.triangles), dtype=np.int64)
        self.generations = np.asarray(generations, dtype=np.int64)
        if self.triangles.size and (np.min(self.signed_areas()) <= 0.0):
            raise ValueError("triangles must be counter-clockwise with positive area")
        self._build_edges()
        self._classify_boundary()
        self.vertices.flags.writeable = False
        self.triangles.flags.writeable = False

    # -- basic queries ----------------------------------------------------

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_triangles(self):
        return len(self.triangles)

    def vertex(self, i) -> Vertex:
        return Vertex(int(i), self.vertices[i].copy(), int(self.boundary_class[i]))

    def triangle(self, i) -> Triangle:
        return Triangle(int(i), tuple(int(v) for v in self.triangles[i]), 0,
                        int(self.generations[i]))

    def coords(self, ids=None):
        """Vertex coordinates per triangle, shape (nt, 3, 2)."""
        t = self.triangles if ids is None else self.triangles[ids]
        return self.vertices[t]

    def signed_areas(self):
        c = self.vertices[self.triangles]
        d1 = c[:, 1] - c[:, 0]
        d2 = c[:, 2] - c[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def areas(self):
        return np.abs(self.signed_areas())

    def diameters(self):
        c = self.vertices[self.triangles]
        l0 = np.linalg.norm(c[:, 1] - c[:, 0], axis=1)
        l1 = np.linalg.norm(c[:, 2] - c[:, 1], axis=1)
        l2 = np.linalg.norm(c[:, 0] - c[:, 2], axis=1)
        return np.maximum(np.maximum(l0, l1), l2)

    def centroids(self):
        return self.vertices[self.triangles].mean(axis=1)

    def min_angle(self):
        """Smallest interior angle over all triangles (radians)."""
        c = self.vertices[self.triangles]
        angles = []
        for k in range(3):
            a = c[:, (k + 1) % 3] - c[:, k]
            b = c[:, (k + 2) % 3] - c[:, k]
            cosang = np.einsum("ij,ij->i", a, b) / (
                np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))
            angles.append(np.arccos(np.clip(cosang, -1.0, 1.0)))
        return float(np.min(angles))

    # -- derived adjacency --------------------------------------------------

    def _build_edges(self):
        t = self.triangles
        if len(t) == 0:
            self.edges = np.zeros((0, 2), dtype=np.int64)
            self.tri_edges = np.zeros((0, 3), dtype=np.int64)
            self.edge_tris = np.zeros((0, 2), dtype=np.int64)
            self.boundary_edge = np.zeros(0, dtype=bool)
            return
        raw = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        raw_sorted = np.sort(raw, axis=1)
        self.edges, inv = np.unique(raw_sorted, axis=0, return_inverse=True)
        self.tri_edges = inv.reshape(3, len(t)).T
        counts = np.bincount(inv, minlength=len(self.edges))
        if counts.max() > 2:
            raise ValueError("non-manifold edge detected")
        self.boundary_edge = counts == 1
        edge_tris = -np.ones((len(self.edges), 2), dtype=np.int64)
        tri_ids = np.tile(np.arange(len(t)), 3)
        for e, ti in zip(inv, tri_ids):
            if edge_tris[e, 0] < 0:
                edge_tris[e, 0] = ti
            else:
                edge_tris[e, 1] = ti
        self.edge_tris = edge_tris

    def check_conforming(self):
        """Edge-incidence audit: every edge belongs to one (boundary) or
        two (interior) triangles and no vertex sits at an edge midpoint.

        Bisection-generated hanging nodes are always edge midpoints, so the
        midpoint test catches nonconformity without a quadratic scan.
        """
        if np.any(np.bincount(self.tri_edges.ravel(),
                              minlength=len(self.edges)) > 2):
            return False
        # any existing vertex exactly at the midpoint of an edge is hanging
        key = {(round(float(x), 12), round(float(y), 12)): i
               for i, (x, y) in enumerate(self.vertices)}
        mids = 0.5 * (self.vertices[self.edges[:, 0]] + self.vertices[self.edges[:, 1]])
        for m in mids:
            if (round(float(m[0]), 12), round(float(m[1]), 12)) in key:
                return False
        return True

    # -- boundary classification --------------------------------------------

    def _classify_boundary(self):
        cls = np.full(self.n_vertices, INTERIOR, dtype=np.int8)
        tangents = np.zeros((self.n_vertices, 2))
        bedges = self.edges[self.boundary_edge]
        incident = {}
        for i, j in bedges:
            incident.setdefault(int(i), []).append(int(j))
            incident.setdefault(int(j), []).append(int(i))
        for v, nbrs in incident.items():
            if len(nbrs) != 2:
                raise ValueError(f"boundary vertex {v} with {len(nbrs)} boundary edges")
            d1 = self.vertices[nbrs[0]] - self.vertices[v]
            d2 = self.vertices[nbrs[1]] - self.vertices[v]
            n1 = np.linalg.norm(d1)
            n2 = np.linalg.norm(d2)
            cross = abs(d1[0] * d2[1] - d1[1] * d2[0])
            if cross <= COLLINEAR_TOL * n1 * n2 and np.dot(d1, d2) < 0.0:
                cls[v] = STRAIGHT
                tangents[v] = d1 / n1
            else:
                cls[v] = CORNER
        self.boundary_class = cls
        self.boundary_tangent = tangents

    # -- export ---------------------------------------------------------------

    def dump_text(self):
        """Plain-text dump, one line per vertex and per triangle.

        Insertion order is preserved so DOF numbering is reproducible.
        """
        lines = []
        for i, (x, y) in enumerate(self.vertices):
            lines.append(f"v {x:.17g} {y:.17g} {_CLASS_NAMES[int(self.boundary_class[i])]}")
        for (i, j, k), _gen in zip(self.triangles, self.generations):
            lines.append(f"t {i} {j} {k} 0")
        return "\n".join(lines) + "\n"

    def write_text(self, path):
        with open(path, "w") as fh:
            fh.write(self.dump_text())


# ---------------------------------------------------------------------------
# construction and refinement
# ---------------------------------------------------------------------------

def initial_square_mesh() -> Mesh:
    """16-element criss-cross mesh of (-1, 1)^2.

    A 2x2 grid of unit squares, each split by both diagonals into four
    triangles around the square center; the lines x = 0 and y = 0 are
    unions of mesh edges, so quadrant-wise coefficient jumps stay aligned
    with every refinement of this mesh.
    """
    grid = {}
    verts = []

    def vid(x, y):
        key = (round(x, 12), round(y, 12))
        if key not in grid:
            grid[key] = len(verts)
            verts.append((float(x), float(y)))
        return grid[key]

    tris = []
    for x0 in (-1.0, 0.0):
        for y0 in (-1.0, 0.0):
            a = vid(x0, y0)
            b = vid(x0 + 1.0, y0)
            c = vid(x0 + 1.0, y0 + 1.0)
            d = vid(x0, y0 + 1.0)
            m = vid(x0 + 0.5, y0 + 0.5)
            # outer edges are the longest, so they come first (refinement edge)
            tris.extend([(a, b, m), (b, c, m), (c, d, m), (d, a, m)])
    return Mesh(np.asarray(verts), np.asarray(tris))


def _sweep(tris, gens, split, verts, midpoint):
    """Bisect the flagged triangles once; returns new (tris, gens)."""
    def mid(i, j):
        key = (i, j) if i < j else (j, i)
        if key not in midpoint:
            midpoint[key] = len(verts)
            verts.append(0.5 * (np.asarray(verts[i]) + np.asarray(verts[j])))
        return midpoint[key]

    out_t = []
    out_g = []
    for (a, b, c), g, s in zip(tris, gens, split):
        if s:
            m = mid(a, b)
            out_t.append((c, a, m))
            out_g.append(g + 1)
            out_t.append((b, c, m))
            out_g.append(g + 1)
        else:
            out_t.append((a, b, c))
            out_g.append(g)
    return out_t, out_g


def _closure(tris, gens, verts, midpoint):
    """Bisect until no triangle has a recorded midpoint on any edge."""
    for _ in range(_MAX_CLOSURE_SWEEPS):
        split = []
        any_split = False
        for a, b, c in tris:
            keys = (tuple(sorted((a, b))), tuple(sorted((b, c))), tuple(sorted((c, a))))
            s = any(k in midpoint for k in keys)
            split.append(s)
            any_split = any_split or s
        if not any_split:
            return tris, gens
        tris, gens = _sweep(tris, gens, split, verts, midpoint)
    raise RuntimeError("refinement closure did not terminate")


def refine_nvb(mesh: Mesh, marked) -> Mesh:
    """Newest-vertex bisection of the marked triangles with conforming closure.

    Every marked triangle is bisected at least once; the result has no
    hanging nodes.  Unknown triangle ids raise.
    """
    marked = set(int(m) for m in marked)
    if marked and (min(marked) < 0 or max(marked) >= mesh.n_triangles):
        raise ValueError("unknown triangle id in marked set")
    if not marked:
        return mesh
    verts = [mesh.vertices[i].copy() for i in range(mesh.n_vertices)]
    tris = [tuple(int(v) for v in t) for t in mesh.triangles]
    gens = [int(g) for g in mesh.generations]
    midpoint = {}
    split = [i in marked for i in range(len(tris))]
    tris, gens = _sweep(tris, gens, split, verts, midpoint)
    tris, gens = _closure(tris, gens, verts, midpoint)
    return Mesh(np.asarray(verts), np.asarray(tris), np.asarray(gens))


def uniform_refine(mesh: Mesh) -> Mesh:
    """Bisect every triangle twice: each element splits into 4 children."""
    verts = [mesh.vertices[i].copy() for i in range(mesh.n_vertices)]
    tris = [tuple(int(v) for v in t) for t in mesh.triangles]
    gens = [int(g) for g in mesh.generations]
    midpoint = {}
    tris, gens = _sweep(tris, gens, [True] * len(tris), verts, midpoint)
    tris, gens = _sweep(tris, gens, [True] * len(tris), verts, midpoint)
    tris, gens = _closure(tris, gens, verts, midpoint)
    return Mesh(np.asarray(verts), np.asarray(tris), np.asarray(gens))
