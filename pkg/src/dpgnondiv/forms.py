"""Element-local realization of the ultraweak bilinear form b, the
least-squares form c, the load functional, the trace duality pairing, and
numerical verification of the moment conditions certifying the discrete
test space.

Conventions.  Trial columns per element are ordered [u-block | M-block |
trace-block(9)] with M components (M11, M12, M22).  Test rows are ordered
[scalar block | matrix block], the matrix block component-major: rows
c*dim4 + k correspond to E_c * phi_k with E_1 = [[1,0],[0,0]],
E_2 = [[0,1],[1,0]], E_3 = [[0,0],[0,1]].

The trace pairing of an element is evaluated by the boundary-integral
formula obtained from two integrations by parts,

    <u_hat, Q>_dT = sum_edges int [ (n . Div Q) v - (n.Qn) d_n v
                                    - (t.Qn) d_t v ] ds,

which for any H^2 extension u of the traces equals
<divDiv Q, u>_T - <Q, D^2 u>_T.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Optional

import numpy as np
import scipy.linalg

from .mesh import Mesh
from .polyspace import (Poly2D, ScalarBasis, SymMatBasis, SYM_WEIGHTS,
                        basis_dimension, divdiv, edge_rule, integrate_edge,
                        map_to_physical, monomial_exponents, triangle_rule)
from .spaces import (BrokenTestSpace, FieldSpace, N_TRACE_LOCAL,
                     edge_frame, edge_trace_matrices, trace_edge_values)

DIM4 = basis_dimension(4)          # 15 scalar monomials of degree <= 4
N_MATRIX_TEST = 3 * DIM4           # 45 matrix-valued test functions
EDGE_GAUSS_POINTS = 6              # exact to degree 11 along edges
VOLUME_EXACTNESS = 13


class CordesViolation(ValueError):
    """Raised when the sampled Cordes constant is nonpositive."""


@dataclass
class CoefficientField:
    """Coefficient matrix A(x); vectorized to return shape (..., 2, 2).

    ``piecewise_polynomial_degree`` is set when A is a mesh-aligned
    piecewise polynomial (then a scalar test degree >= that value makes the
    two methods equivalent); ``None`` flags the variational crime of
    non-aligned coefficients.
    """

    fn: Callable
    piecewise_polynomial_degree: Optional[int] = 0
    name: str = ""

    def __call__(self, x, y):
        return np.asarray(self.fn(np.asarray(x, dtype=float),
                                  np.asarray(y, dtype=float)))


def constant_coefficient(matrix):
    m = np.asarray(matrix, dtype=float)

    def fn(x, y):
        out = np.empty(np.shape(x) + (2, 2))
        out[...] = m
        return out

    return CoefficientField(fn=fn, piecewise_polynomial_degree=0, name="constant")


def frobenius_components(A):
    """(A:E_1, A:E_2, A:E_3) = (A11, 2*A12, A22) stacked on the last axis."""
    return np.stack([A[..., 0, 0], 2.0 * A[..., 0, 1], A[..., 1, 1]], axis=-1)


def cordes_sample_points(mesh: Mesh):
    """All physical volume quadrature points of the mesh, shape (m, 2)."""
    rule = triangle_rule(VOLUME_EXACTNESS)
    pts = np.einsum("qk,nkd->nqd", rule.points, mesh.coords())
    return pts.reshape(-1, 2)


def cordes_epsilon(A: CoefficientField, sample_points):
    """Sampled Cordes constant eps = min (tr A)^2/|A|_F^2 - 1 (d = 2).

    Returns (epsilon clamped to (0, 1], ellipticity_ok); raises
    CordesViolation if the sampled epsilon is nonpositive.
    """
    pts = np.asarray(sample_points, dtype=float).reshape(-1, 2)
    Am = A(pts[:, 0], pts[:, 1])
    tr = Am[:, 0, 0] + Am[:, 1, 1]
    fro2 = Am[:, 0, 0] ** 2 + Am[:, 1, 1] ** 2 + 2.0 * Am[:, 0, 1] ** 2
    eps = float(np.min(tr**2 / fro2 - 1.0))
    if eps <= 0.0:
        raise CordesViolation(f"Cordes condition violated: epsilon = {eps:.3e}")
    disc = np.sqrt((Am[:, 0, 0] - Am[:, 1, 1]) ** 2 + 4.0 * Am[:, 0, 1] ** 2)
    lam_min = 0.5 * (tr - disc)
    ellipticity_ok = bool(np.all(lam_min > 0.0))
    return min(eps, 1.0), ellipticity_ok


# ---------------------------------------------------------------------------
# local basis change: separate the kernel of divDiv
# ---------------------------------------------------------------------------

N_DD_RANGE = basis_dimension(2)    # rank of divDiv on the degree-4 space


@lru_cache(maxsize=None)
def _divdiv_rotation():
    """Orthogonal 45x45 change of basis splitting ker(divDiv).

    In centroid/diameter-scaled coordinates the coefficient-space kernel of
    divDiv on degree-4 symmetric matrix polynomials is element independent;
    rotating onto [range-part (first 6 columns) | kernel-part] keeps the
    V-norm Gram conditioning bounded under refinement (a plain monomial
    basis degrades like h^-4).
    """
    exps4 = monomial_exponents(4)
    exps2 = monomial_exponents(2)
    idx2 = {(int(a), int(b)): i for i, (a, b) in enumerate(exps2)}
    D = np.zeros((len(exps2), N_MATRIX_TEST))
    for k, (a, b) in enumerate(exps4):
        a, b = int(a), int(b)
        if a >= 2:                      # E_1: d^2/dx^2
            D[idx2[(a - 2, b)], 0 * DIM4 + k] += a * (a - 1)
        if a >= 1 and b >= 1:           # E_2: 2 d^2/dxdy
            D[idx2[(a - 1, b - 1)], 1 * DIM4 + k] += 2.0 * a * b
        if b >= 2:                      # E_3: d^2/dy^2
            D[idx2[(a, b - 2)], 2 * DIM4 + k] += b * (b - 1)
    _, _, vt = np.linalg.svd(D, full_matrices=True)
    W = vt.T                            # first 6 columns span the row space
    W.flags.writeable = False
    return W


@lru_cache(maxsize=None)
def _test_rotation(n_scalar: int):
    W = _divdiv_rotation()
    T = np.zeros((n_scalar + N_MATRIX_TEST, n_scalar + N_MATRIX_TEST))
    T[:n_scalar, :n_scalar] = np.eye(n_scalar)
    T[n_scalar:, n_scalar:] = W
    T.flags.writeable = False
    return T


# ---------------------------------------------------------------------------
# batched element data
# ---------------------------------------------------------------------------

def _power_table(z, degree):
    """Powers z^0 .. z^degree stacked on a new last axis."""
    out = np.empty(z.shape + (degree + 1,))
    out[..., 0] = 1.0
    for k in range(1, degree + 1):
        out[..., k] = out[..., k - 1] * z
    return out


def _monomial_values(xp, yp, exps):
    a = exps[:, 0]
    b = exps[:, 1]
    return xp[..., a] * yp[..., b]


class ElementBatch:
    """Geometry, quadrature and basis evaluations for a chunk of elements.

    Basis-value arrays are built lazily so cheap passes (error integrals,
    data indicators) do not pay for the full test-space evaluation.
    """

    def __init__(self, mesh: Mesh, ids, p: int, n_u: int):
        ids = np.asarray(ids, dtype=np.int64)
        self.ids = ids
        self.mesh = mesh
        self.p = p
        self.n_u = n_u
        coords = mesh.coords(ids)
        self.coords = coords
        self.n = len(ids)

        rule = triangle_rule(VOLUME_EXACTNESS)
        d1 = coords[:, 1] - coords[:, 0]
        d2 = coords[:, 2] - coords[:, 0]
        area = 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
        self.area = area
        self.qp = np.einsum("qk,nkd->nqd", rule.points, coords)
        self.qw = rule.weights[None, :] * (2.0 * area[:, None])

        self.centroid = coords.mean(axis=1)
        l0 = np.linalg.norm(coords[:, 1] - coords[:, 0], axis=1)
        l1 = np.linalg.norm(coords[:, 2] - coords[:, 1], axis=1)
        l2 = np.linalg.norm(coords[:, 0] - coords[:, 2], axis=1)
        self.diam = np.maximum(np.maximum(l0, l1), l2)
        self._cache = {}
        self._edges = None

    def _powers(self):
        if "pow" not in self._cache:
            xi = (self.qp[..., 0] - self.centroid[:, None, 0]) / self.diam[:, None]
            eta = (self.qp[..., 1] - self.centroid[:, None, 1]) / self.diam[:, None]
            self._cache["pow"] = (_power_table(xi, 4), _power_table(eta, 4))
        return self._cache["pow"]

    @property
    def phi4(self):
        if "phi4" not in self._cache:
            xp, yp = self._powers()
            self._cache["phi4"] = _monomial_values(xp, yp, monomial_exponents(4))
        return self._cache["phi4"]

    @property
    def grad4(self):
        if "grad4" not in self._cache:
            xp, yp = self._powers()
            exps4 = monomial_exponents(4)
            a4, b4 = exps4[:, 0], exps4[:, 1]
            inv_h = 1.0 / self.diam[:, None, None]
            gx = a4 * xp[..., np.maximum(a4 - 1, 0)] * yp[..., b4] * inv_h
            gy = b4 * xp[..., a4] * yp[..., np.maximum(b4 - 1, 0)] * inv_h
            self._cache["grad4"] = np.stack([gx, gy], axis=-1)
        return self._cache["grad4"]

    @property
    def ddphi(self):
        """divDiv(E_c phi_k) values, shape (n, nq, 15, 3)."""
        if "ddphi" not in self._cache:
            xp, yp = self._powers()
            exps4 = monomial_exponents(4)
            a4, b4 = exps4[:, 0], exps4[:, 1]
            inv_h2 = 1.0 / (self.diam ** 2)[:, None, None]
            pxx = a4 * (a4 - 1) * xp[..., np.maximum(a4 - 2, 0)] * yp[..., b4] * inv_h2
            pxy = a4 * b4 * xp[..., np.maximum(a4 - 1, 0)] \
                * yp[..., np.maximum(b4 - 1, 0)] * inv_h2
            pyy = b4 * (b4 - 1) * xp[..., a4] * yp[..., np.maximum(b4 - 2, 0)] * inv_h2
            self._cache["ddphi"] = np.stack([pxx, 2.0 * pxy, pyy], axis=-1)
        return self._cache["ddphi"]

    @property
    def phiv(self):
        if "phiv" not in self._cache:
            xp, yp = self._powers()
            self._cache["phiv"] = _monomial_values(xp, yp,
                                                   monomial_exponents(self.p))
        return self._cache["phiv"]

    @property
    def phiu(self):
        if "phiu" not in self._cache:
            xp, yp = self._powers()
            deg = 0 if self.n_u == 1 else 1
            self._cache["phiu"] = _monomial_values(xp, yp,
                                                   monomial_exponents(deg))
        return self._cache["phiu"]

    @property
    def edges(self):
        """Per local edge: frame vectors, Gauss data and Hermite matrices."""
        if self._edges is not None:
            return self._edges
        sig, wg = edge_rule(EDGE_GAUSS_POINTS)
        coords = self.coords
        centroid = self.centroid
        diam = self.diam
        exps4 = monomial_exponents(4)
        a4 = exps4[:, 0]
        b4 = exps4[:, 1]
        edges = []
        (h00, h10, h01, h11), (d00, d10, d01, d11) = _hermite_arrays(sig)
        for e in range(3):
            ia, ib = e, (e + 1) % 3
            a = coords[:, ia]
            b = coords[:, ib]
            d = b - a
            L = np.hypot(d[:, 0], d[:, 1])
            t = d / L[:, None]
            nrm = np.stack([t[:, 1], -t[:, 0]], axis=1)
            pts = a[:, None, :] + sig[None, :, None] * d[:, None, :]   # (n, ng, 2)
            xi = (pts[..., 0] - centroid[:, None, 0]) / diam[:, None]
            eta = (pts[..., 1] - centroid[:, None, 1]) / diam[:, None]
            xpow = _power_table(xi, 4)
            ypow = _power_table(eta, 4)
            phi = _monomial_values(xpow, ypow, exps4)
            inv_h = 1.0 / diam[:, None, None]
            gx = a4 * xpow[..., np.maximum(a4 - 1, 0)] * ypow[..., b4] * inv_h
            gy = b4 * xpow[..., a4] * ypow[..., np.maximum(b4 - 1, 0)] * inv_h
            grad = np.stack([gx, gy], axis=-1)

            n_el = self.n
            ng = len(sig)
            Mv = np.zeros((n_el, ng, 9))
            Mn = np.zeros((n_el, ng, 9))
            Mt = np.zeros((n_el, ng, 9))
            Lh = L[:, None]
            Mv[:, :, 3 * ia] = h00
            Mv[:, :, 3 * ia + 1] = Lh * h10 * t[:, None, 0]
            Mv[:, :, 3 * ia + 2] = Lh * h10 * t[:, None, 1]
            Mv[:, :, 3 * ib] = h01
            Mv[:, :, 3 * ib + 1] = Lh * h11 * t[:, None, 0]
            Mv[:, :, 3 * ib + 2] = Lh * h11 * t[:, None, 1]
            Mt[:, :, 3 * ia] = d00 / Lh
            Mt[:, :, 3 * ia + 1] = d10 * t[:, None, 0]
            Mt[:, :, 3 * ia + 2] = d10 * t[:, None, 1]
            Mt[:, :, 3 * ib] = d01 / Lh
            Mt[:, :, 3 * ib + 1] = d11 * t[:, None, 0]
            Mt[:, :, 3 * ib + 2] = d11 * t[:, None, 1]
            Mn[:, :, 3 * ia + 1] = (1.0 - sig)[None, :] * nrm[:, None, 0]
            Mn[:, :, 3 * ia + 2] = (1.0 - sig)[None, :] * nrm[:, None, 1]
            Mn[:, :, 3 * ib + 1] = sig[None, :] * nrm[:, None, 0]
            Mn[:, :, 3 * ib + 2] = sig[None, :] * nrm[:, None, 1]

            edges.append(dict(t=t, n=nrm, L=L, w=wg, pts=pts, phi=phi,
                              grad=grad, Mv=Mv, Mn=Mn, Mt=Mt))
        self._edges = edges
        return edges


def _hermite_arrays(s):
    h00 = 2 * s**3 - 3 * s**2 + 1
    h10 = s**3 - 2 * s**2 + s
    h01 = -2 * s**3 + 3 * s**2
    h11 = s**3 - s**2
    d00 = 6 * s**2 - 6 * s
    d10 = 3 * s**2 - 4 * s + 1
    d01 = -6 * s**2 + 6 * s
    d11 = 3 * s**2 - 2 * s
    return (h00, h10, h01, h11), (d00, d10, d01, d11)


def _edge_contractions(ed):
    """Edge-frame contractions of the component matrices E_c."""
    t, nrm = ed["t"], ed["n"]
    nx, ny = nrm[:, 0], nrm[:, 1]
    tx, ty = t[:, 0], t[:, 1]
    nEn = np.stack([nx * nx, 2 * nx * ny, ny * ny], axis=1)          # (n, 3)
    tEn = np.stack([tx * nx, tx * ny + ty * nx, ty * ny], axis=1)
    nE = np.stack([
        np.stack([nx, np.zeros_like(nx)], axis=1),
        np.stack([ny, nx], axis=1),
        np.stack([np.zeros_like(ny), ny], axis=1),
    ], axis=1)                                                       # (n, 3, 2)
    return nEn, tEn, nE


def trace_block(batch: ElementBatch):
    """Trace pairing <u_hat, E_c phi_k>_dT per element, shape (n, 45, 9)."""
    out = np.zeros((batch.n, N_MATRIX_TEST, 9))
    for ed in batch.edges:
        L, wg = ed["L"], ed["w"]
        phi, grad = ed["phi"], ed["grad"]
        Mv, Mn, Mt = ed["Mv"], ed["Mn"], ed["Mt"]
        w = wg[None, :] * L[:, None]                          # (n, ng)
        nEn, tEn, nE = _edge_contractions(ed)
        wphiT = (w[:, :, None] * phi).transpose(0, 2, 1)      # (n, 15, ng)
        phiMn = np.matmul(wphiT, Mn)                          # (n, 15, 9)
        phiMt = np.matmul(wphiT, Mt)
        for c in range(3):
            rows = slice(c * DIM4, (c + 1) * DIM4)
            ndivc = grad[..., 0] * nE[:, c, 0, None, None] \
                + grad[..., 1] * nE[:, c, 1, None, None]      # (n, ng, 15)
            out[:, rows, :] += np.matmul(
                (w[:, :, None] * ndivc).transpose(0, 2, 1), Mv)
            out[:, rows, :] -= nEn[:, c, None, None] * phiMn
            out[:, rows, :] -= tEn[:, c, None, None] * phiMt
    return out


def gram_blocks(batch: ElementBatch):
    """Raw V-norm Gram per element: blockdiag(scalar L2, matrix L2 + divDiv)."""
    n = batch.n
    ns = batch.phiv.shape[-1]
    nt = ns + N_MATRIX_TEST
    G = np.zeros((n, nt, nt))
    G[:, :ns, :ns] = np.einsum("nq,nqi,nqj->nij", batch.qw, batch.phiv, batch.phiv)
    mass4 = np.einsum("nq,nqi,nqj->nij", batch.qw, batch.phi4, batch.phi4)
    for c in range(3):
        rows = slice(ns + c * DIM4, ns + (c + 1) * DIM4)
        G[:, rows, rows] += SYM_WEIGHTS[c] * mass4
    dd = batch.ddphi                                                  # (n, nq, 15, 3)
    for c1 in range(3):
        for c2 in range(3):
            blk = np.einsum("nq,nqi,nqj->nij", batch.qw, dd[..., c1], dd[..., c2])
            G[:, ns + c1 * DIM4:ns + (c1 + 1) * DIM4,
              ns + c2 * DIM4:ns + (c2 + 1) * DIM4] += blk
    return G


def b_blocks(batch: ElementBatch, A: CoefficientField):
    """Raw matrix of b per element, shape (n, n_test, n_u + 3 + 9)."""
    n = batch.n
    ns = batch.phiv.shape[-1]
    n_u = batch.phiu.shape[-1]
    ntrial = n_u + 3 + 9
    B = np.zeros((n, ns + N_MATRIX_TEST, ntrial))
    Avals = A(batch.qp[..., 0], batch.qp[..., 1])                     # (n, nq, 2, 2)
    AE = frobenius_components(Avals)                                  # (n, nq, 3)
    # scalar tests against M:  <M, A v>
    B[:, :ns, n_u:n_u + 3] = np.einsum("nq,nqj,nqi->nij", batch.qw, AE, batch.phiv)
    # matrix tests against u:  -<u, divDiv Q>
    for c in range(3):
        rows = slice(ns + c * DIM4, ns + (c + 1) * DIM4)
        B[:, rows, :n_u] = -np.einsum("nq,nqk,nqj->nkj", batch.qw,
                                      batch.ddphi[..., c], batch.phiu)
        # matrix tests against M:  <M, Q> (component-orthogonal)
        B[:, rows, n_u + c] = SYM_WEIGHTS[c] * np.einsum(
            "nq,nqk->nk", batch.qw, batch.phi4)
    # matrix tests against traces
    B[:, ns:, n_u + 3:] = trace_block(batch)
    return B


def load_blocks(batch: ElementBatch, f):
    """Raw load vector per element (supported on the scalar test block)."""
    ns = batch.phiv.shape[-1]
    F = np.zeros((batch.n, ns + N_MATRIX_TEST))
    fv = np.asarray(f(batch.qp[..., 0], batch.qp[..., 1]), dtype=float)
    F[:, :ns] = np.einsum("nq,nqi->ni", batch.qw, fv[..., None] * batch.phiv)
    return F


def lsq_blocks(batch: ElementBatch, A: CoefficientField, f):
    """Explicit least-squares coupling: <A:M, A:Z> matrix and <f, A:Z> load."""
    Avals = A(batch.qp[..., 0], batch.qp[..., 1])
    AE = frobenius_components(Avals)
    D = np.einsum("nq,nqi,nqj->nij", batch.qw, AE, AE)                # (n, 3, 3)
    fv = np.asarray(f(batch.qp[..., 0], batch.qp[..., 1]), dtype=float)
    g = np.einsum("nq,nq,nqi->ni", batch.qw, fv, AE)                  # (n, 3)
    return D, g


def transform_tests(G, B, F, n_scalar):
    """Rotate the matrix-test block and scale rows to unit Gram diagonal.

    The element Schur complements are invariant under this change of test
    basis; it exists purely to keep the Gram factorization well conditioned
    on deeply refined meshes.
    """
    T = _test_rotation(n_scalar)
    G = np.einsum("st,nsu->ntu", T, G)
    G = np.einsum("ntu,uv->ntv", G, T)
    B = np.einsum("st,nsj->ntj", T, B)
    F = np.einsum("st,ns->nt", T, F)
    d = 1.0 / np.sqrt(np.einsum("ntt->nt", G))
    G = G * d[:, :, None] * d[:, None, :]
    B = B * d[:, :, None]
    F = F * d
    return G, B, F, d


# ---------------------------------------------------------------------------
# solver-path builders in the rotated matrix-test basis
#
# Assembling the raw monomial Gram and rotating afterwards destroys the
# small eigenvalues in floating point once the divDiv part dominates
# (|divDiv| ~ h^-2); evaluating the rotated members pointwise lets the
# kernel members' divDiv cancel at value level, keeping the scaled Gram
# well conditioned on arbitrarily fine meshes.
# ---------------------------------------------------------------------------

def rotated_divdiv_values(batch: ElementBatch):
    """divDiv values of the non-kernel rotated members, shape (n, nq, 6).

    The kernel members' divDiv vanishes identically (up to the 1e-16
    accuracy of the kernel basis) and is treated as exactly zero; this is
    what keeps the scaled Gram SPD in floating point on deep meshes.
    """
    if getattr(batch, "_dd_rot", None) is not None:
        return batch._dd_rot
    W = _divdiv_rotation()
    Wc = W.reshape(3, DIM4, N_MATRIX_TEST)[:, :, :N_DD_RANGE]
    n, nq = batch.qw.shape
    dd_flat = np.zeros((n * nq, N_DD_RANGE))
    ddphi = batch.ddphi
    for c in range(3):
        dd_flat += ddphi[..., c].reshape(n * nq, DIM4) @ Wc[c]
    batch._dd_rot = dd_flat.reshape(n, nq, N_DD_RANGE)
    return batch._dd_rot


def _sandwich(core, M):
    """Batched M^T core M via two reshaped GEMM contractions."""
    T1 = np.tensordot(core, M, axes=(2, 0))         # (n, k, j)
    return np.tensordot(T1, M, axes=(1, 0)).transpose(0, 2, 1)


def gram_blocks_rotated(batch: ElementBatch):
    """V-norm Gram in the rotated matrix-test basis.

    The benign L2 part is assembled in the monomial basis and sandwiched
    with the rotation; the divDiv part lives only on the 6 non-kernel
    members and is built from pointwise rotated values.
    """
    W = _divdiv_rotation()
    Wc = W.reshape(3, DIM4, N_MATRIX_TEST)
    n = batch.n
    ns = batch.phiv.shape[-1]
    nt = ns + N_MATRIX_TEST
    sw = np.sqrt(batch.qw)
    G = np.zeros((n, nt, nt))
    Xv = sw[:, :, None] * batch.phiv
    G[:, :ns, :ns] = np.matmul(Xv.transpose(0, 2, 1), Xv)
    Xp = sw[:, :, None] * batch.phi4
    mass4 = np.matmul(Xp.transpose(0, 2, 1), Xp)              # (n, 15, 15)
    GQ = np.zeros((n, N_MATRIX_TEST, N_MATRIX_TEST))
    for c in range(3):
        GQ += SYM_WEIGHTS[c] * _sandwich(mass4, Wc[c])
    dd = rotated_divdiv_values(batch)
    Xd = sw[:, :, None] * dd
    GQ[:, :N_DD_RANGE, :N_DD_RANGE] += np.matmul(Xd.transpose(0, 2, 1), Xd)
    G[:, ns:, ns:] = GQ
    return G


def b_blocks_rotated(batch: ElementBatch, A: CoefficientField):
    """Element matrix of b with the matrix-test block in the rotated basis."""
    W = _divdiv_rotation()
    n = batch.n
    ns = batch.phiv.shape[-1]
    n_u = batch.phiu.shape[-1]
    ntrial = n_u + 3 + 9
    B = np.zeros((n, ns + N_MATRIX_TEST, ntrial))
    Avals = A(batch.qp[..., 0], batch.qp[..., 1])
    AE = frobenius_components(Avals)
    B[:, :ns, n_u:n_u + 3] = np.matmul(
        (batch.qw[:, :, None] * batch.phiv).transpose(0, 2, 1), AE)
    dd = rotated_divdiv_values(batch)
    B[:, ns:ns + N_DD_RANGE, :n_u] = -np.matmul(
        (batch.qw[:, :, None] * dd).transpose(0, 2, 1), batch.phiu)
    # M columns and trace columns: benign entries, rotate after assembly
    raw = np.zeros((n, N_MATRIX_TEST, 3 + 9))
    phi_int = np.einsum("nq,nqk->nk", batch.qw, batch.phi4)
    for c in range(3):
        raw[:, c * DIM4:(c + 1) * DIM4, c] = SYM_WEIGHTS[c] * phi_int
    raw[:, :, 3:] = trace_block(batch)
    B[:, ns:, n_u:] = np.tensordot(raw, W, axes=(1, 0)).transpose(0, 2, 1)
    return B


def scale_tests(G, B, F):
    """Symmetric Jacobi scaling of the test rows (Schur-invariant)."""
    d = 1.0 / np.sqrt(np.einsum("ntt->nt", G))
    return (G * d[:, :, None] * d[:, None, :], B * d[:, :, None], F * d, d)


# ---------------------------------------------------------------------------
# single-element reference implementations (spec operations)
# ---------------------------------------------------------------------------

def _poly_Q_parts(Q):
    if len(Q) == 3:
        q11, q12, q22 = Q
    else:
        q11, q12, q22 = Q[0][0], Q[0][1], Q[1][1]
    return q11, q12, q22


def trace_pairing_element(trace_dofs, Q, coords, n_points: int = EDGE_GAUSS_POINTS):
    """Trace duality pairing <u_hat, Q>_dT from the 9 local trace DOFs.

    ``Q`` is a symmetric matrix polynomial given as (Q11, Q12, Q22) Poly2D
    components (or a nested 2x2).  Direct edge-by-edge Gauss integration of
    the boundary formula; independent of the vectorized assembly path.
    """
    q11, q12, q22 = _poly_Q_parts(Q)
    dq = (q11.dx() + q12.dy(), q12.dx() + q22.dy())     # Div Q rows
    sig, wg = edge_rule(n_points)
    total = 0.0
    coords = np.asarray(coords, dtype=float)
    for e in range(3):
        a, b, t, n, L = edge_frame(coords, e)
        s = sig * L
        v, dn, dt = trace_edge_values(trace_dofs, coords, e, s)
        pts = a[None, :] + sig[:, None] * (b - a)[None, :]
        x, y = pts[:, 0], pts[:, 1]
        Qn1 = q11(x, y) * n[0] + q12(x, y) * n[1]
        Qn2 = q12(x, y) * n[0] + q22(x, y) * n[1]
        ndivq = dq[0](x, y) * n[0] + dq[1](x, y) * n[1]
        nqn = Qn1 * n[0] + Qn2 * n[1]
        tqn = Qn1 * t[0] + Qn2 * t[1]
        total += L * np.dot(wg, ndivq * v - nqn * dn - tqn * dt)
    return float(total)


def trace_pairing_exact(v, grad_v, Q, coords, n_points: int = EDGE_GAUSS_POINTS):
    """Boundary formula with exact traces of a smooth function v.

    Unlike :func:`trace_pairing_element` this does not reduce the traces to
    the 9 vertex DOFs; for polynomial (v, Q) it equals the volume identity
    <divDiv Q, v> - <Q, D^2 v> exactly.
    """
    q11, q12, q22 = _poly_Q_parts(Q)
    dq = (q11.dx() + q12.dy(), q12.dx() + q22.dy())
    sig, wg = edge_rule(n_points)
    total = 0.0
    coords = np.asarray(coords, dtype=float)
    for e in range(3):
        a, b, t, n, L = edge_frame(coords, e)
        pts = a[None, :] + sig[:, None] * (b - a)[None, :]
        x, y = pts[:, 0], pts[:, 1]
        g = np.asarray(grad_v(x, y), dtype=float)
        vv = np.asarray(v(x, y), dtype=float)
        dn = g[..., 0] * n[0] + g[..., 1] * n[1]
        dt = g[..., 0] * t[0] + g[..., 1] * t[1]
        Qn1 = q11(x, y) * n[0] + q12(x, y) * n[1]
        Qn2 = q12(x, y) * n[0] + q22(x, y) * n[1]
        ndivq = dq[0](x, y) * n[0] + dq[1](x, y) * n[1]
        nqn = Qn1 * n[0] + Qn2 * n[1]
        tqn = Qn1 * t[0] + Qn2 * t[1]
        total += L * np.dot(wg, ndivq * vv - nqn * dn - tqn * dt)
    return float(total)


def local_b(trial: FieldSpace, test: BrokenTestSpace, A: CoefficientField, elem: int):
    """Element matrix of b in the raw monomial test basis."""
    batch = ElementBatch(test.mesh, [elem], test.p, trial.n_u)
    return b_blocks(batch, A)[0]


def local_c(trial: FieldSpace, test: BrokenTestSpace, elem: int):
    """Element matrix of c: the matrix-test block of b without <M, Av>."""
    batch = ElementBatch(test.mesh, [elem], test.p, trial.n_u)
    zero = constant_coefficient(np.zeros((2, 2)))
    B = b_blocks(batch, zero)[0]
    return B[test.n_scalar:, :]


def local_gram(test: BrokenTestSpace, elem: int):
    """Element V-norm Gram in the raw monomial test basis (SPD)."""
    batch = ElementBatch(test.mesh, [elem], test.p, 1)
    G = gram_blocks(batch)[0]
    np.linalg.cholesky(G)   # raises on basis degeneracy
    return G


def local_load(test: BrokenTestSpace, f, elem: int):
    batch = ElementBatch(test.mesh, [elem], test.p, 1)
    return load_blocks(batch, f)[0]


# ---------------------------------------------------------------------------
# moment-condition verification for the discrete test space
# ---------------------------------------------------------------------------

def _matrix_poly_norms_and_moments(Q, coords):
    """Integrals of a symmetric matrix polynomial needed by the verification."""
    q11, q12, q22 = _poly_Q_parts(Q)
    rule = triangle_rule(VOLUME_EXACTNESS)
    pts, w = map_to_physical(rule, coords)
    x, y = pts[:, 0], pts[:, 1]
    vals = np.stack([q11(x, y), q12(x, y), q22(x, y)], axis=-1)
    dd = divdiv(Q)
    ddv = dd(x, y)
    l2 = float(np.dot(w, vals[:, 0] ** 2 + 2 * vals[:, 1] ** 2 + vals[:, 2] ** 2))
    ddl2 = float(np.dot(w, ddv**2))
    return vals, ddv, l2, ddl2, pts, w


def verify_fortin_moments(coords, Q, return_projection=False):
    """Feasibility/boundedness check of the three moment families that the
    projection onto the degree-4 matrix test space must preserve.

    Finds the element of the local degree-4 symmetric space closest to ``Q``
    in the H(divDiv) norm subject to matching (i) the trace pairings against
    all 9 local trace DOFs, (ii) the constant-matrix moments, and (iii) the
    quadratic moments of divDiv.  Returns (residuals, bound_ratio) with
    residuals scaled by 1 + |rhs| and bound_ratio =
    ||Pi Q||_divDiv / ||Q||_divDiv.  Feasible for Q in the space itself with
    Pi Q = Q and ratio 1.
    """
    coords = np.asarray(coords, dtype=float)
    basis = ScalarBasis(4, coords)
    rule = triangle_rule(VOLUME_EXACTNESS)
    pts, w = map_to_physical(rule, coords)
    x, y = pts[:, 0], pts[:, 1]
    phi = basis.eval(x, y)                      # (nq, 15)
    hess = basis.hess(x, y)                     # (nq, 15, 3) = (pxx, pxy, pyy)
    dd = np.stack([hess[..., 0], 2.0 * hess[..., 1], hess[..., 2]], axis=-1)

    nb = N_MATRIX_TEST

    def idx(c, k):
        return c * DIM4 + k

    # H(divDiv) Gram of the 45 local basis members
    mass = np.einsum("q,qi,qj->ij", w, phi, phi)
    H = np.zeros((nb, nb))
    for c in range(3):
        H[idx(c, 0):idx(c, 0) + DIM4, idx(c, 0):idx(c, 0) + DIM4] += SYM_WEIGHTS[c] * mass
    for c1 in range(3):
        for c2 in range(3):
            H[idx(c1, 0):idx(c1, 0) + DIM4, idx(c2, 0):idx(c2, 0) + DIM4] += \
                np.einsum("q,qi,qj->ij", w, dd[..., c1], dd[..., c2])

    qvals, qdd, q_l2, q_ddl2, _, _ = _matrix_poly_norms_and_moments(Q, coords)
    q_norm2 = q_l2 + q_ddl2
    if q_norm2 == 0.0:
        zero = np.zeros(nb)
        if return_projection:
            return np.zeros(18), 0.0, zero
        return np.zeros(18), 0.0

    # cross inner products <basis_j, Q>_H(divDiv)
    cross = np.zeros(nb)
    for c in range(3):
        cross[idx(c, 0):idx(c, 0) + DIM4] = SYM_WEIGHTS[c] * np.einsum(
            "q,qi,q->i", w, phi, qvals[:, c]) + np.einsum(
            "q,qi,q->i", w, dd[..., c], qdd)

    # (i) trace moments: pairing of each local trace DOF with each basis member
    sig, wg = edge_rule(EDGE_GAUSS_POINTS)
    A_tr = np.zeros((9, nb))
    b_tr = np.zeros(9)
    q11, q12, q22 = _poly_Q_parts(Q)
    dq = (q11.dx() + q12.dy(), q12.dx() + q22.dy())
    for e in range(3):
        a, b, t, n, L = edge_frame(coords, e)
        Mv, Mn, Mt = edge_trace_matrices(coords, e, sig)
        epts = a[None, :] + sig[:, None] * (b - a)[None, :]
        ex, ey = epts[:, 0], epts[:, 1]
        ephi = basis.eval(ex, ey)
        egrad = basis.grad(ex, ey)
        nEn = np.array([n[0] ** 2, 2 * n[0] * n[1], n[1] ** 2])
        tEn = np.array([t[0] * n[0], t[0] * n[1] + t[1] * n[0], t[1] * n[1]])
        nE = np.array([[n[0], 0.0], [n[1], n[0]], [0.0, n[1]]])
        for c in range(3):
            ndivq = egrad @ nE[c]
            contrib = (np.einsum("g,gk,gd->dk", wg * L, ndivq, Mv)
                       - nEn[c] * np.einsum("g,gk,gd->dk", wg * L, ephi, Mn)
                       - tEn[c] * np.einsum("g,gk,gd->dk", wg * L, ephi, Mt))
            A_tr[:, idx(c, 0):idx(c, 0) + DIM4] += contrib
        # rhs: same boundary formula with the exact traces of Q
        Qn1 = q11(ex, ey) * n[0] + q12(ex, ey) * n[1]
        Qn2 = q12(ex, ey) * n[0] + q22(ex, ey) * n[1]
        ndivq_Q = dq[0](ex, ey) * n[0] + dq[1](ex, ey) * n[1]
        nqn = Qn1 * n[0] + Qn2 * n[1]
        tqn = Qn1 * t[0] + Qn2 * t[1]
        b_tr += L * (np.einsum("g,g,gd->d", wg, ndivq_Q, Mv)
                     - np.einsum("g,g,gd->d", wg, nqn, Mn)
                     - np.einsum("g,g,gd->d", wg, tqn, Mt))

    # (ii) constant symmetric matrix moments
    A_m = np.zeros((3, nb))
    b_m = np.zeros(3)
    for c in range(3):
        A_m[c, idx(c, 0):idx(c, 0) + DIM4] = SYM_WEIGHTS[c] * np.einsum("q,qi->i", w, phi)
        b_m[c] = SYM_WEIGHTS[c] * np.dot(w, qvals[:, c])

    # (iii) quadratic moments of divDiv
    basis2 = ScalarBasis(2, coords)
    psi = basis2.eval(x, y)
    A_d = np.zeros((6, nb))
    for c in range(3):
        A_d[:, idx(c, 0):idx(c, 0) + DIM4] = np.einsum("q,qi,qj->ij", w, psi, dd[..., c])
    b_d = np.einsum("q,qi,q->i", w, psi, qdd)

    Acon = np.vstack([A_tr, A_m, A_d])
    bcon = np.concatenate([b_tr, b_m, b_d])

    # The 18 moment rows have structural rank 12: for quadratic u the trace
    # moments reduce, by the pairing identity, to combinations of the divDiv
    # and constant-matrix moments.  The right-hand side satisfies the same
    # relations for smooth Q, so the system stays consistent; consistency is
    # exactly what the returned residuals certify.
    x_p, _, rank, _ = np.linalg.lstsq(Acon, bcon, rcond=None)
    if rank < 12:
        raise ValueError("moment constraints degenerate (rank "
                         f"{rank} < 12); degenerate triangle?")
    N = scipy.linalg.null_space(Acon)
    rhs = N.T @ (cross - H @ x_p)
    z = np.linalg.solve(N.T @ H @ N, rhs)
    xsol = x_p + N @ z

    residuals = np.abs(Acon @ xsol - bcon) / (1.0 + np.abs(bcon))
    ratio = float(np.sqrt(max(xsol @ H @ xsol, 0.0) / q_norm2))
    if return_projection:
        return residuals, ratio, xsol
    return residuals, ratio
