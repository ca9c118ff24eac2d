"""Polynomial bases on triangles and edges, exact quadrature, and the
second-order differential operators (Hessian, double divergence).

Everything here is purely local and immutable: bases are monomials centered
at the triangle centroid and scaled by the triangle diameter, quadrature
rules are fixed symmetric rules verified against exact monomial integrals.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi


# ---------------------------------------------------------------------------
# dense bivariate polynomials (used by oracles, coefficient fields, operators)
# ---------------------------------------------------------------------------

class Poly2D:
    """Bivariate polynomial with dense coefficient matrix c[i, j] ~ x^i y^j."""

    __slots__ = ("coeffs",)

    def __init__(self, coeffs):
        c = np.atleast_2d(np.asarray(coeffs, dtype=float))
        self.coeffs = c

    @classmethod
    def from_terms(cls, terms):
        """Build from {(i, j): coefficient} pairs."""
        if not terms:
            return cls([[0.0]])
        imax = max(i for i, _ in terms)
        jmax = max(j for _, j in terms)
        c = np.zeros((imax + 1, jmax + 1))
        for (i, j), a in terms.items():
            c[i, j] = a
        return cls(c)

    @property
    def degree(self):
        nz = np.argwhere(self.coeffs != 0.0)
        if nz.size == 0:
            return 0
        return int((nz[:, 0] + nz[:, 1]).max())

    def __call__(self, x, y):
        return np.polynomial.polynomial.polyval2d(np.asarray(x, dtype=float),
                                                  np.asarray(y, dtype=float),
                                                  self.coeffs)

    def dx(self):
        c = self.coeffs
        if c.shape[0] == 1:
            return Poly2D([[0.0]])
        return Poly2D(c[1:, :] * np.arange(1, c.shape[0])[:, None])

    def dy(self):
        c = self.coeffs
        if c.shape[1] == 1:
            return Poly2D([[0.0]])
        return Poly2D(c[:, 1:] * np.arange(1, c.shape[1])[None, :])

    def __add__(self, other):
        a, b = self.coeffs, _as_poly(other).coeffs
        m = np.zeros((max(a.shape[0], b.shape[0]), max(a.shape[1], b.shape[1])))
        m[:a.shape[0], :a.shape[1]] += a
        m[:b.shape[0], :b.shape[1]] += b
        return Poly2D(m)

    def __sub__(self, other):
        return self + (_as_poly(other) * -1.0)

    def __mul__(self, other):
        if np.isscalar(other):
            return Poly2D(self.coeffs * other)
        b = _as_poly(other).coeffs
        out = np.zeros((self.coeffs.shape[0] + b.shape[0] - 1,
                        self.coeffs.shape[1] + b.shape[1] - 1))
        for i in range(self.coeffs.shape[0]):
            for j in range(self.coeffs.shape[1]):
                a = self.coeffs[i, j]
                if a != 0.0:
                    out[i:i + b.shape[0], j:j + b.shape[1]] += a * b
        return Poly2D(out)

    __rmul__ = __mul__

    def __neg__(self):
        return Poly2D(-self.coeffs)

    def __repr__(self):
        return f"Poly2D(degree={self.degree})"


def _as_poly(p):
    if isinstance(p, Poly2D):
        return p
    return Poly2D([[float(p)]])


def eval_hessian(p: Poly2D, point):
    """Exact Hessian of a scalar polynomial at a point, as a 2x2 array."""
    x, y = point
    pxx = p.dx().dx()(x, y)
    pxy = p.dx().dy()(x, y)
    pyy = p.dy().dy()(x, y)
    return np.array([[pxx, pxy], [pxy, pyy]])


def divdiv(Q):
    """Double divergence of a symmetric matrix polynomial.

    ``Q`` is given either as the component triple (Q11, Q12, Q22) or as a
    nested 2x2 structure with Q[0][1] == Q[1][0].  Returns the scalar
    polynomial sum_jk d^2 Q_jk / dx_j dx_k with exact coefficients.
    """
    if len(Q) == 3:
        q11, q12, q22 = Q
    else:
        q11, q12, q22 = Q[0][0], Q[0][1], Q[1][1]
    q11 = _as_poly(q11)
    q12 = _as_poly(q12)
    q22 = _as_poly(q22)
    return q11.dx().dx() + 2.0 * q12.dx().dy() + q22.dy().dy()


# ---------------------------------------------------------------------------
# quadrature
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QuadratureRule:
    """Quadrature on the reference triangle {x,y >= 0, x+y <= 1}.

    ``points`` are barycentric coordinates (n, 3), weights sum to the
    reference area 1/2, and all polynomials of total degree up to
    ``exactness_degree`` integrate exactly.
    """

    points: np.ndarray
    weights: np.ndarray
    exactness_degree: int


@lru_cache(maxsize=None)
def triangle_rule(exactness: int = 13) -> QuadratureRule:
    """Conical-product Gauss rule on the reference triangle.

    Tensorizes Gauss-Jacobi (weight 1-x) with Gauss-Legendre through the
    Duffy map; n points per direction give exactness 2n-1.  All points are
    strictly interior and all weights positive.
    """
    n = exactness // 2 + 1
    uj, wj = roots_jacobi(n, 1.0, 0.0)
    xi = 0.5 * (1.0 + uj)          # Jacobi nodes on (0,1), weight (1-xi)
    wxi = 0.25 * wj
    ul, wl = np.polynomial.legendre.leggauss(n)
    eta = 0.5 * (1.0 + ul)
    weta = 0.5 * wl

    X = np.repeat(xi, n)
    Y = np.tile(eta, n) * (1.0 - X)
    W = np.repeat(wxi, n) * np.tile(weta, n)
    bary = np.column_stack([1.0 - X - Y, X, Y])
    bary.flags.writeable = False
    W.flags.writeable = False
    return QuadratureRule(points=bary, weights=W, exactness_degree=2 * n - 1)


@lru_cache(maxsize=None)
def edge_rule(n_points: int = 6):
    """Gauss-Legendre nodes/weights on (0, 1); exact to degree 2n-1."""
    u, w = np.polynomial.legendre.leggauss(n_points)
    s = 0.5 * (1.0 + u)
    w = 0.5 * w
    s.flags.writeable = False
    w.flags.writeable = False
    return s, w


def triangle_area(coords):
    """Signed area of a triangle given as a (3, 2) coordinate array."""
    coords = np.asarray(coords, dtype=float)
    d1 = coords[1] - coords[0]
    d2 = coords[2] - coords[0]
    return 0.5 * (d1[0] * d2[1] - d1[1] * d2[0])


def map_to_physical(rule: QuadratureRule, coords):
    """Map reference points/weights to a physical triangle.

    Returns (points (n, 2), weights (n,)); weights sum to the triangle area.
    """
    coords = np.asarray(coords, dtype=float)
    area = triangle_area(coords)
    if area <= 0.0:
        raise ValueError("degenerate or misoriented triangle")
    pts = rule.points @ coords
    return pts, rule.weights * (2.0 * area)


def integrate_triangle(f, coords, rule: QuadratureRule | None = None):
    """Integrate a callable or Poly2D over a physical triangle.

    Exact for polynomials within the rule's exactness degree.
    """
    if rule is None:
        rule = triangle_rule()
    pts, w = map_to_physical(rule, coords)
    vals = f(pts[:, 0], pts[:, 1])
    return float(np.dot(w, vals))


def integrate_edge(f, a, b, n_points: int = 6):
    """Integrate ``f(x, y)`` over the segment a-b with arclength measure.

    Exact for polynomials of degree <= 2*n_points - 1 along the edge.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    length = float(np.hypot(*(b - a)))
    if length == 0.0:
        raise ValueError("zero-length edge")
    s, w = edge_rule(n_points)
    pts = a[None, :] + s[:, None] * (b - a)[None, :]
    vals = f(pts[:, 0], pts[:, 1])
    return float(np.dot(w, vals) * length)


# ---------------------------------------------------------------------------
# centered/scaled monomial bases on physical triangles
# ---------------------------------------------------------------------------

def monomial_exponents(degree: int):
    """Exponent pairs (a, b) ordered by total degree, x-power descending."""
    exps = []
    for total in range(degree + 1):
        for ax in range(total, -1, -1):
            exps.append((ax, total - ax))
    return np.asarray(exps, dtype=np.int64)


def basis_dimension(degree: int) -> int:
    return (degree + 1) * (degree + 2) // 2


class ScalarBasis:
    """Monomials ((x-cx)/h)^a ((y-cy)/h)^b on one physical triangle.

    Centering at the centroid and scaling by the diameter keeps the local
    Gram conditioning independent of the mesh size.
    """

    def __init__(self, degree: int, coords):
        coords = np.asarray(coords, dtype=float)
        self.degree = int(degree)
        self.exps = monomial_exponents(degree)
        self.center = coords.mean(axis=0)
        d01 = np.linalg.norm(coords[1] - coords[0])
        d12 = np.linalg.norm(coords[2] - coords[1])
        d20 = np.linalg.norm(coords[0] - coords[2])
        self.scale = float(max(d01, d12, d20))
        self.coords = coords

    @property
    def dim(self):
        return len(self.exps)

    def _local(self, x, y):
        xi = (np.asarray(x, dtype=float) - self.center[0]) / self.scale
        eta = (np.asarray(y, dtype=float) - self.center[1]) / self.scale
        return xi, eta

    def eval(self, x, y):
        """Values, shape (..., dim)."""
        xi, eta = self._local(x, y)
        a = self.exps[:, 0]
        b = self.exps[:, 1]
        return xi[..., None] ** a * eta[..., None] ** b

    def grad(self, x, y):
        """Gradients, shape (..., dim, 2)."""
        xi, eta = self._local(x, y)
        a = self.exps[:, 0]
        b = self.exps[:, 1]
        gx = np.where(a > 0, a, 0) * xi[..., None] ** np.maximum(a - 1, 0) \
            * eta[..., None] ** b / self.scale
        gy = np.where(b > 0, b, 0) * xi[..., None] ** a \
            * eta[..., None] ** np.maximum(b - 1, 0) / self.scale
        return np.stack([gx, gy], axis=-1)

    def hess(self, x, y):
        """Second derivatives (pxx, pxy, pyy), shape (..., dim, 3)."""
        xi, eta = self._local(x, y)
        a = self.exps[:, 0]
        b = self.exps[:, 1]
        s2 = self.scale ** 2
        pxx = np.where(a > 1, a * (a - 1), 0) * xi[..., None] ** np.maximum(a - 2, 0) \
            * eta[..., None] ** b / s2
        pxy = np.where((a > 0) & (b > 0), a * b, 0) \
            * xi[..., None] ** np.maximum(a - 1, 0) \
            * eta[..., None] ** np.maximum(b - 1, 0) / s2
        pyy = np.where(b > 1, b * (b - 1), 0) * xi[..., None] ** a \
            * eta[..., None] ** np.maximum(b - 2, 0) / s2
        return np.stack([pxx, pxy, pyy], axis=-1)

    def project_coeffs(self, poly: Poly2D):
        """Exact coefficient vector representing ``poly`` in this basis.

        Raises if the polynomial degree exceeds the basis degree.
        """
        if poly.degree > self.degree:
            raise ValueError("polynomial degree exceeds basis degree")
        # x^i y^j -> ((cx + h*xi)^i (cy + h*eta)^j), expand binomially
        cx, cy = self.center
        h = self.scale
        out = np.zeros(self.dim)
        index = {(int(a), int(b)): k for k, (a, b) in enumerate(self.exps)}
        C = poly.coeffs
        for i in range(C.shape[0]):
            for j in range(C.shape[1]):
                cij = C[i, j]
                if cij == 0.0:
                    continue
                for k in range(i + 1):
                    for l in range(j + 1):
                        coef = (cij * math.comb(i, k) * math.comb(j, l)
                                * cx ** (i - k) * cy ** (j - l) * h ** (k + l))
                        out[index[(k, l)]] += coef
        return out


# symmetric 2x2 component matrices; a degree-4 scalar basis per component
# gives the 45-dimensional local matrix-valued test space.
SYM_BASIS = (
    np.array([[1.0, 0.0], [0.0, 0.0]]),
    np.array([[0.0, 1.0], [1.0, 0.0]]),
    np.array([[0.0, 0.0], [0.0, 1.0]]),
)
# Frobenius norms-squared of the component matrices
SYM_WEIGHTS = np.array([1.0, 2.0, 1.0])


class SymMatBasis:
    """Symmetric-matrix polynomial basis: 3 components x scalar monomials.

    Member (c, k) is ``SYM_BASIS[c] * phi_k``; for degree 4 this spans the
    45-dimensional local space used for matrix-valued test functions.
    """

    def __init__(self, coords, degree: int = 4):
        self.component_basis = ScalarBasis(degree, coords)
        self.degree = degree

    @property
    def dim(self):
        return 3 * self.component_basis.dim
