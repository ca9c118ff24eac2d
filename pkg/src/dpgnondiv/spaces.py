"""Discrete trial spaces (piecewise-polynomial fields and rHCT-type traces
with boundary constraints) and the broken matrix-valued test space.

Only the edge traces of the C^1 trace functions are ever used: on each edge
the value trace is the cubic Hermite interpolant of the endpoint values and
tangential derivatives, and the normal-derivative trace is the linear
interpolant of the endpoint normal derivatives.  The interior representation
is never constructed.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .mesh import CORNER, INTERIOR, STRAIGHT, Mesh
from .polyspace import ScalarBasis, basis_dimension

# local trace layout per element: 3 vertices x (value, grad_x, grad_y)
N_TRACE_LOCAL = 9


def _hermite(sigma):
    """Cubic Hermite shape functions and their derivatives at sigma in [0,1]."""
    s = np.asarray(sigma, dtype=float)
    h00 = 2 * s**3 - 3 * s**2 + 1
    h10 = s**3 - 2 * s**2 + s
    h01 = -2 * s**3 + 3 * s**2
    h11 = s**3 - s**2
    d00 = 6 * s**2 - 6 * s
    d10 = 3 * s**2 - 4 * s + 1
    d01 = -6 * s**2 + 6 * s
    d11 = 3 * s**2 - 2 * s
    return (h00, h10, h01, h11), (d00, d10, d01, d11)


def edge_frame(coords, edge):
    """(a, b, tangent, normal, length) for a local edge of a ccw triangle.

    Edge ``e`` runs from local vertex e to e+1 (mod 3); the normal is the
    outward normal of the triangle.
    """
    coords = np.asarray(coords, dtype=float)
    a = coords[edge]
    b = coords[(edge + 1) % 3]
    d = b - a
    length = float(np.hypot(*d))
    if length == 0.0:
        raise ValueError("degenerate edge")
    t = d / length
    n = np.array([t[1], -t[0]])   # outward for counter-clockwise triangles
    return a, b, t, n, length


def trace_edge_values(local_dofs, coords, edge, s):
    """Evaluate the rHCT edge traces from the 9 local vertex DOFs.

    ``local_dofs`` is ordered (v, gx, gy) per vertex; ``s`` is the arclength
    parameter along local edge ``edge``.  Returns (value, normal_derivative,
    tangential_derivative) with respect to the element-local edge frame.
    """
    dofs = np.asarray(local_dofs, dtype=float).reshape(3, 3)
    a, b, t, n, length = edge_frame(coords, edge)
    s = np.asarray(s, dtype=float)
    if np.any(s < -1e-12 * length) or np.any(s > length * (1 + 1e-12)):
        raise ValueError("arclength parameter outside the edge")
    ia, ib = edge, (edge + 1) % 3
    va, ga = dofs[ia, 0], dofs[ia, 1:]
    vb, gb = dofs[ib, 0], dofs[ib, 1:]
    ta, tb = t @ ga, t @ gb
    na, nb = n @ ga, n @ gb
    sigma = s / length
    (h00, h10, h01, h11), (d00, d10, d01, d11) = _hermite(sigma)
    value = h00 * va + h10 * length * ta + h01 * vb + h11 * length * tb
    dt = (d00 * va + d01 * vb) / length + d10 * ta + d11 * tb
    dn = (1.0 - sigma) * na + sigma * nb
    return value, dn, dt


def edge_trace_matrices(coords, edge, sigma):
    """Rows mapping the 9 local DOFs to (value, d_n, d_t) at parameters sigma.

    Returns (Mv, Mn, Mt) of shape (len(sigma), 9); used by the vectorized
    trace-pairing assembly.
    """
    a, b, t, n, length = edge_frame(coords, edge)
    ia, ib = edge, (edge + 1) % 3
    (h00, h10, h01, h11), (d00, d10, d01, d11) = _hermite(np.asarray(sigma))
    m = len(np.atleast_1d(sigma))
    Mv = np.zeros((m, 9))
    Mn = np.zeros((m, 9))
    Mt = np.zeros((m, 9))
    Mv[:, 3 * ia] = h00
    Mv[:, 3 * ia + 1] = length * h10 * t[0]
    Mv[:, 3 * ia + 2] = length * h10 * t[1]
    Mv[:, 3 * ib] = h01
    Mv[:, 3 * ib + 1] = length * h11 * t[0]
    Mv[:, 3 * ib + 2] = length * h11 * t[1]
    Mt[:, 3 * ia] = d00 / length
    Mt[:, 3 * ia + 1] = d10 * t[0]
    Mt[:, 3 * ia + 2] = d10 * t[1]
    Mt[:, 3 * ib] = d01 / length
    Mt[:, 3 * ib + 1] = d11 * t[0]
    Mt[:, 3 * ib + 2] = d11 * t[1]
    sig = np.atleast_1d(np.asarray(sigma, dtype=float))
    Mn[:, 3 * ia + 1] = (1.0 - sig) * n[0]
    Mn[:, 3 * ia + 2] = (1.0 - sig) * n[1]
    Mn[:, 3 * ib + 1] = sig * n[0]
    Mn[:, 3 * ib + 2] = sig * n[1]
    return Mv, Mn, Mt


def interpolate_trace(u, grad_u, mesh: Mesh):
    """Vertex-wise trace DOFs (u(z), grad u(z)), flattened to (3*nv,)."""
    x = mesh.vertices[:, 0]
    y = mesh.vertices[:, 1]
    vals = np.asarray(u(x, y), dtype=float)
    g = np.asarray(grad_u(x, y), dtype=float)
    out = np.zeros((mesh.n_vertices, 3))
    out[:, 0] = vals
    out[:, 1] = g[..., 0]
    out[:, 2] = g[..., 1]
    return out.reshape(-1)


class TraceSpace:
    """Global rHCT-trace DOFs: one (value, grad) triple per mesh vertex."""

    def __init__(self, mesh: Mesh):
        self.mesh = mesh
        self.n_dofs = 3 * mesh.n_vertices

    def element_dofs(self, ids=None):
        """Global Cartesian trace-DOF indices per element, shape (nt, 9)."""
        t = self.mesh.triangles if ids is None else self.mesh.triangles[ids]
        return (3 * t[:, :, None] + np.arange(3)[None, None, :]).reshape(len(t), 9)


class ConstrainedTraceSpace:
    """Trace space with homogeneous or lifted boundary constraints.

    Constraints are eliminated in a per-vertex rotated frame: at straight
    boundary vertices only the physical normal derivative stays free, at
    corners the full triple is fixed, interior vertices keep all three DOFs.
    The map from free DOFs to Cartesian DOFs is ``x = E x_free + x0``.
    """

    def __init__(self, mesh: Mesh, lift_values=None):
        self.mesh = mesh
        cls = mesh.boundary_class
        nv = mesh.n_vertices
        if lift_values is None:
            lift_values = np.zeros((nv, 3))
        lift_values = np.asarray(lift_values, dtype=float)

        rows, cols, vals = [], [], []
        x0 = np.zeros(3 * nv)
        free = 0
        self.vertex_free_start = np.full(nv, -1, dtype=np.int64)
        self.vertex_n_free = np.zeros(nv, dtype=np.int64)
        for v in range(nv):
            base = 3 * v
            if cls[v] == INTERIOR:
                for c in range(3):
                    rows.append(base + c)
                    cols.append(free + c)
                    vals.append(1.0)
                self.vertex_free_start[v] = free
                self.vertex_n_free[v] = 3
                free += 3
            elif cls[v] == STRAIGHT:
                t = mesh.boundary_tangent[v]
                n = np.array([t[1], -t[0]])
                uv, g = lift_values[v, 0], lift_values[v, 1:]
                tau = float(t @ g)
                x0[base] = uv
                x0[base + 1] = tau * t[0]
                x0[base + 2] = tau * t[1]
                rows.extend([base + 1, base + 2])
                cols.extend([free, free])
                vals.extend([n[0], n[1]])
                self.vertex_free_start[v] = free
                self.vertex_n_free[v] = 1
                free += 1
            else:  # CORNER: value and full gradient fixed
                x0[base:base + 3] = lift_values[v]
        self.n_free = free
        self.n_cartesian = 3 * nv
        self._E = sp.csr_matrix((vals, (rows, cols)), shape=(3 * nv, free))
        self._x0 = x0
        self.lift_values = lift_values

    @property
    def extension(self):
        """Sparse map E with Cartesian trace DOFs = E @ free + offset."""
        return self._E

    @property
    def offset(self):
        return self._x0

    def expand(self, free_vec):
        return self._E @ free_vec + self._x0


def apply_boundary_conditions(space: TraceSpace, mesh: Mesh, lift_values=None):
    """Constrain a trace space: v = 0 (or lifted) at boundary vertices,
    tangential derivative fixed at straight vertices, full gradient fixed at
    corners.  Free count = 3*#interior + #straight."""
    if mesh is not space.mesh:
        raise ValueError("trace space belongs to a different mesh")
    return ConstrainedTraceSpace(mesh, lift_values)


class FieldSpace:
    """Element-local field components: scalar u (P0, or P1 when augmented)
    and the symmetric matrix M with 3 constant components per element."""

    def __init__(self, mesh: Mesh, augmented: bool = False):
        self.mesh = mesh
        self.augmented = bool(augmented)
        self.u_degree = 1 if augmented else 0
        self.n_u = basis_dimension(self.u_degree)
        self.n_m = 3
        self.n_per_element = self.n_u + self.n_m
        self.n_dofs = self.n_per_element * mesh.n_triangles

    def u_basis(self, elem):
        return ScalarBasis(self.u_degree, self.mesh.coords([elem])[0])

    def element_dofs(self, ids=None):
        nt = self.mesh.n_triangles
        idx = np.arange(nt) if ids is None else np.asarray(ids)
        base = idx[:, None] * self.n_per_element
        return base + np.arange(self.n_per_element)[None, :]


class BrokenTestSpace:
    """Per-element test space: scalar P^p times symmetric matrix P^4.

    The V-norm Gram on an element realizes <v, dv> + <Q, dQ> +
    <divDiv Q, divDiv dQ>; assembly of the blocks lives in ``forms``.
    """

    def __init__(self, mesh: Mesh, p: int = 0):
        if p < 0:
            raise ValueError("test degree must be nonnegative")
        self.mesh = mesh
        self.p = int(p)
        self.n_scalar = basis_dimension(p)
        self.n_matrix = 3 * basis_dimension(4)
        self.n_per_element = self.n_scalar + self.n_matrix

    def gram(self, elem):
        from .forms import local_gram
        return local_gram(self, int(elem))
