"""Assembly and solution of the fully discrete minimal-residual schemes.

Both methods reduce, per element, to a Schur complement S_T = B_T^t G_T^-1
B_T of the local form matrix against the SPD test-norm Gram; the assembled
global system over free trial DOFs is symmetric positive definite and is
solved by sparse Cholesky (CHOLMOD) with a conjugate-gradient fallback.

DOF ordering: field DOFs first (element-major, [u-block, M11, M12, M22]),
trace DOFs last (vertex-major, (value, gx, gy)).  Everything is
deterministic for reproducible outputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import forms
from .forms import (ElementBatch, cordes_epsilon, cordes_sample_points,
                    load_blocks, lsq_blocks)
from .mesh import Mesh
from .spaces import (BrokenTestSpace, ConstrainedTraceSpace, FieldSpace,
                     TraceSpace, apply_boundary_conditions)

try:
    from cvxopt import cholmod as _cholmod
    from cvxopt import matrix as _cvx_matrix
    from cvxopt import spmatrix as _cvx_spmatrix
    HAVE_CHOLMOD = True
except ImportError:  # pragma: no cover - cvxopt is a declared dependency
    HAVE_CHOLMOD = False

CHUNK = 1024


class SolverError(RuntimeError):
    """Assembly or solve failure (non-SPD system, factorization breakdown)."""


@dataclass
class GlobalSystem:
    """Assembled SPD normal-equation system over the free trial DOFs.

    ``local_schur`` keeps the per-element pieces (c0, g, S) of the pure
    Schur complement so the residual indicators eta_res,T^2 =
    c0 - 2 g.x + x.S x come for free once the solution is known.
    """

    stiffness: sp.csr_matrix
    load: np.ndarray
    n_field: int
    n_u: int
    trace: ConstrainedTraceSpace
    extension: sp.csr_matrix      # expanded = extension @ free + offset
    offset: np.ndarray
    local_schur: tuple = None
    spd_certified: bool = False

    @property
    def n_free(self):
        return self.stiffness.shape[0]


class Solution:
    """Discrete solution with per-element residual data.

    ``trace_cartesian`` holds the full (value, gx, gy) triples per vertex,
    constraints and boundary lift included.  ``residual_representers`` are
    the test-space Riesz representers r_T with G_T r_T = F_T - B_T x_T in
    the (rotated, scaled) element test basis used by the solver; they are
    materialized on first access, while the squared local dual norms
    ``eta_res2`` are always stored.
    """

    def __init__(self, mesh, method_tag, trial, test_degree, u_coeffs,
                 M_coeffs, trace_cartesian, free_vector, eta_res2, meta,
                 rep_builder=None):
        self.mesh = mesh
        self.method_tag = method_tag
        self.trial = trial
        self.test_degree = test_degree
        self.u_coeffs = u_coeffs
        self.M_coeffs = M_coeffs
        self.trace_cartesian = trace_cartesian
        self.free_vector = free_vector
        self.eta_res2 = eta_res2
        self.meta = meta
        self._rep_builder = rep_builder
        self._reps = None

    @property
    def residual_representers(self):
        if self._reps is None:
            if self._rep_builder is None:
                raise ValueError("solution carries no representer builder")
            self._reps = self._rep_builder()
        return self._reps

    @property
    def ndof(self):
        return len(self.free_vector)

    def u_at(self, batch: ElementBatch):
        """u_h at the batch quadrature points, shape (n, nq)."""
        return np.einsum("nqj,nj->nq", batch.phiu, self.u_coeffs[batch.ids])

    def dump_csv(self):
        """One row per element (id, u DOFs, M components), one per vertex."""
        lines = ["row,id,values"]
        for e in range(self.mesh.n_triangles):
            us = ",".join(f"{v:.12e}" for v in self.u_coeffs[e])
            ms = ",".join(f"{v:.12e}" for v in self.M_coeffs[e])
            lines.append(f"e,{e},{us},{ms}")
        tc = self.trace_cartesian.reshape(-1, 3)
        for v in range(self.mesh.n_vertices):
            vals = ",".join(f"{x:.12e}" for x in tc[v])
            lines.append(f"v,{v},{vals}")
        return "\n".join(lines) + "\n"

    def write_csv(self, path):
        with open(path, "w") as fh:
            fh.write(self.dump_csv())


def element_schur(B, G, F):
    """Dense local Schur complement (S, g, chol_G) with S = B^t G^-1 B.

    ``G`` must be SPD; Cholesky failure signals basis degeneracy.
    """
    B = np.atleast_2d(np.asarray(B, dtype=float))
    G = np.atleast_2d(np.asarray(G, dtype=float))
    F = np.atleast_1d(np.asarray(F, dtype=float))
    L = np.linalg.cholesky(G)
    Y = np.linalg.solve(G, np.column_stack([B, F]))
    S = B.T @ Y[:, :-1]
    g = B.T @ Y[:, -1]
    return S, g, L


def _trial_layout(mesh: Mesh, trial: str):
    if trial not in ("std", "augmented"):
        raise ValueError(f"unknown trial space tag {trial!r}")
    fs = FieldSpace(mesh, augmented=(trial == "augmented"))
    ts = TraceSpace(mesh)
    return fs, ts


def _chunk_ids(n):
    for start in range(0, n, CHUNK):
        yield np.arange(start, min(start + CHUNK, n))


def _element_matrices(problem, mesh, fs, test_space, ids, method):
    """Scaled rotated-basis (G, B, F) per chunk; LSQ adds (D, g) couplings."""
    batch = ElementBatch(mesh, ids, test_space.p, fs.n_u)
    G = forms.gram_blocks_rotated(batch)
    B = forms.b_blocks_rotated(batch, problem.A)
    F = load_blocks(batch, problem.f)
    ns = test_space.n_scalar
    if method == "dpg":
        Gh, Bh, Fh, _ = forms.scale_tests(G, B, F)
        return batch, Gh, Bh, Fh, None, None
    # least-squares coupling: matrix-test rows only plus explicit M-M term
    GQ = G[:, ns:, ns:]
    C = B[:, ns:, :]
    FQ = np.zeros((len(ids), C.shape[1]))
    Gh, Ch, Fh, _ = forms.scale_tests(GQ, C, FQ)
    D, g = lsq_blocks(batch, problem.A, problem.f)
    return batch, Gh, Ch, Fh, D, g


def assemble_system(problem, mesh: Mesh, trial: str = "std",
                    test_degree: int = 0, method: str = "dpg") -> GlobalSystem:
    """Assemble the SPD normal-equation system for either method."""
    if method not in ("dpg", "dpg-lsq"):
        raise ValueError(f"unknown method {method!r}")
    fs, ts = _trial_layout(mesh, trial)
    test_space = BrokenTestSpace(mesh, test_degree)
    lift = problem.lift_values(mesh) if problem.boundary == "lift" else None
    ctr = apply_boundary_conditions(ts, mesh, lift)

    nt = mesh.n_triangles
    n_f = fs.n_per_element
    n_field = n_f * nt
    n_exp = n_field + ts.n_dofs
    ntrial = n_f + 9

    rows = []
    cols = []
    vals = []
    gvec = np.zeros(n_exp)
    c0_all = np.zeros(nt)
    g_all = np.zeros((nt, ntrial))
    S_all = np.zeros((nt, ntrial, ntrial))
    for ids in _chunk_ids(nt):
        batch, Gh, Bh, Fh, D, g = _element_matrices(problem, mesh, fs,
                                                    test_space, ids, method)
        try:
            np.linalg.cholesky(Gh)
        except np.linalg.LinAlgError as exc:
            raise SolverError(f"test Gram not SPD (nelem={nt})") from exc
        Y = np.linalg.solve(Gh, np.concatenate([Bh, Fh[:, :, None]], axis=2))
        S = np.matmul(Bh.transpose(0, 2, 1), Y[:, :, :-1])
        ge = np.einsum("nti,nt->ni", Bh, Y[:, :, -1])
        c0_all[ids] = np.einsum("nt,nt->n", Fh, Y[:, :, -1])
        g_all[ids] = ge
        S_all[ids] = S
        if D is not None:
            S = S.copy()
            ge = ge.copy()
            S[:, fs.n_u:fs.n_u + 3, fs.n_u:fs.n_u + 3] += D
            ge[:, fs.n_u:fs.n_u + 3] += g

        edofs = np.concatenate([fs.element_dofs(ids),
                                n_field + ts.element_dofs(ids)], axis=1)
        rows.append(np.repeat(edofs, ntrial, axis=1).ravel())
        cols.append(np.tile(edofs, (1, ntrial)).ravel())
        vals.append(S.ravel())
        np.add.at(gvec, edofs.ravel(), ge.ravel())

    S_exp = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n_exp, n_exp)).tocsr()

    E = sp.block_diag([sp.eye(n_field, format="csr"), ctr.extension],
                      format="csr")
    x0 = np.concatenate([np.zeros(n_field), ctr.offset])
    S_free = (E.T @ S_exp @ E).tocsr()
    S_free = (S_free + S_free.T) * 0.5
    g_free = E.T @ (gvec - S_exp @ x0)
    return GlobalSystem(stiffness=S_free.tocsr(), load=g_free, n_field=n_field,
                        n_u=fs.n_u, trace=ctr, extension=E, offset=x0,
                        local_schur=(c0_all, g_all, S_all))


def _sparse_cholesky_solve(S: sp.csr_matrix, b: np.ndarray) -> np.ndarray:
    """Sparse Cholesky via CHOLMOD with one step of iterative refinement.

    Raises SolverError when the factorization certifies a non-SPD system.
    """
    if not HAVE_CHOLMOD:
        raise SolverError("cvxopt/CHOLMOD unavailable")
    coo = S.tocoo()
    A = _cvx_spmatrix(coo.data, coo.row.astype(np.int64),
                      coo.col.astype(np.int64), size=S.shape)
    try:
        factor = _cholmod.symbolic(A)
        _cholmod.numeric(A, factor)
    except ArithmeticError as exc:
        raise SolverError("sparse Cholesky failed: system not SPD") from exc
    B = _cvx_matrix(b)
    _cholmod.solve(factor, B)
    x = np.asarray(B).ravel()
    resid = b - S @ x
    R = _cvx_matrix(resid)
    _cholmod.solve(factor, R)
    return x + np.asarray(R).ravel()


def solve_spd(S: sp.csr_matrix, b: np.ndarray, method: str = "cholesky"):
    """Solve the SPD system after symmetric diagonal equilibration.

    ``method`` is 'cholesky' (CHOLMOD, falls back to sparse LU if cvxopt is
    missing) or 'cg' (diagonally preconditioned, relative residual 1e-12).
    Returns (x, tag, rel_resid) where rel_resid is the relative residual of
    the equilibrated system actually factorized (trace and field DOFs carry
    different physical units, so the raw diagonal spans many orders; the
    equilibrated residual is the meaningful solve-quality measure).
    """
    d = S.diagonal()
    if np.any(d <= 0.0):
        raise SolverError("nonpositive diagonal: system not SPD")
    ds = 1.0 / np.sqrt(d)
    Dm = sp.diags(ds)
    Ss = (Dm @ S @ Dm).tocsc()
    bs = ds * b
    bnorm = max(float(np.linalg.norm(bs)), 1e-300)
    if method == "cholesky":
        if HAVE_CHOLMOD:
            y = _sparse_cholesky_solve(Ss.tocsr(), bs)
            tag = "cholmod"
        else:
            lu = spla.splu(Ss, diag_pivot_thresh=0.0,
                           permc_spec="MMD_AT_PLUS_A",
                           options=dict(SymmetricMode=True))
            if np.any(lu.U.diagonal() <= 0.0):
                raise SolverError("LU certificate failed: system not SPD")
            y = lu.solve(bs)
            tag = "splu"
    elif method == "cg":
        M = sp.diags(1.0 / Ss.diagonal())
        y, info = spla.cg(Ss, bs, rtol=1e-12, atol=0.0, M=M, maxiter=20000)
        if info != 0:
            raise SolverError(f"CG did not converge (info={info})")
        tag = "cg"
    else:
        raise ValueError(f"unknown linear solver {method!r}")
    rel = float(np.linalg.norm(Ss @ y - bs)) / bnorm
    return ds * y, tag, rel


def _representer_pass(problem, mesh, fs, test_space, method, x_exp, n_field,
                      ts: TraceSpace):
    nt = mesh.n_triangles
    n_test = (test_space.n_scalar if method == "dpg" else 0) + forms.N_MATRIX_TEST
    reps = np.zeros((nt, n_test))
    eta2 = np.zeros(nt)
    for ids in _chunk_ids(nt):
        batch, Gh, Bh, Fh, _, _ = _element_matrices(problem, mesh, fs,
                                                    test_space, ids, method)
        edofs = np.concatenate([fs.element_dofs(ids),
                                n_field + ts.element_dofs(ids)], axis=1)
        xloc = x_exp[edofs]
        rho = Fh - np.einsum("ntj,nj->nt", Bh, xloc)
        r = np.linalg.solve(Gh, rho[:, :, None])[:, :, 0]
        reps[ids] = r
        eta2[ids] = np.einsum("nt,nt->n", rho, r)
    return reps, eta2


def _solve(problem, mesh, trial, test_degree, method, linear_solver):
    eps, ell_ok = cordes_epsilon(problem.A, cordes_sample_points(mesh))
    system = assemble_system(problem, mesh, trial, test_degree, method)
    try:
        x_free, solver_tag, rel_resid = solve_spd(system.stiffness,
                                                  system.load, linear_solver)
    except SolverError as exc:
        raise SolverError(
            f"{exc} [method={method}, nelem={mesh.n_triangles}, "
            f"ndof={system.n_free}]") from exc

    x_exp = system.extension @ x_free + system.offset
    fs, ts = _trial_layout(mesh, trial)
    nt = mesh.n_triangles
    fields = x_exp[:system.n_field].reshape(nt, fs.n_per_element)
    u_coeffs = fields[:, :fs.n_u].copy()
    M_coeffs = fields[:, fs.n_u:].copy()
    trace_cart = x_exp[system.n_field:].copy()

    # eta_res,T^2 = |F_T - B_T x_T|^2 in the inverse-Gram norm, assembled
    # from the stored Schur pieces (no second element pass)
    c0, gT, ST = system.local_schur
    edofs = np.concatenate([fs.element_dofs(),
                            system.n_field + ts.element_dofs()], axis=1)
    xloc = x_exp[edofs]
    eta2 = (c0 - 2.0 * np.einsum("ni,ni->n", gT, xloc)
            + np.einsum("ni,nij,nj->n", xloc, ST, xloc))

    test_space = BrokenTestSpace(mesh, test_degree)

    def rep_builder():
        reps, _ = _representer_pass(problem, mesh, fs, test_space, method,
                                    x_exp, system.n_field, ts)
        return reps

    meta = dict(cordes_epsilon=eps, ellipticity_ok=ell_ok,
                linear_residual=rel_resid, linear_solver=solver_tag,
                ndof=system.n_free, nelem=nt,
                mesh_aligned=problem.A.piecewise_polynomial_degree is not None,
                variational_crime=(
                    problem.A.piecewise_polynomial_degree is None
                    or problem.A.piecewise_polynomial_degree > test_degree),
                test_degree=test_degree)
    return Solution(mesh=mesh, method_tag="DPG" if method == "dpg" else "DPG-LSQ",
                    trial=trial, test_degree=test_degree, u_coeffs=u_coeffs,
                    M_coeffs=M_coeffs, trace_cartesian=trace_cart,
                    free_vector=x_free, eta_res2=np.maximum(eta2, 0.0),
                    meta=meta, rep_builder=rep_builder)


def solve_dpg(problem, mesh: Mesh, trial: str = "std", test_degree: int = 0,
              linear_solver: str = "cholesky") -> Solution:
    """Solve the fully discrete DPG scheme (optimal test functions in the
    full broken test space, scalar block of degree ``test_degree``)."""
    return _solve(problem, mesh, trial, test_degree, "dpg", linear_solver)


def solve_dpg_lsq(problem, mesh: Mesh, trial: str = "std",
                  test_degree: int = 0,
                  linear_solver: str = "cholesky") -> Solution:
    """Solve the coupled least-squares scheme: optimal test functions only in
    the matrix-valued space plus the explicit <A:M, A:Z> term."""
    return _solve(problem, mesh, trial, test_degree, "dpg-lsq", linear_solver)


def field_errors(sol: Solution, u_exact, hess_exact):
    """Elementwise L2 errors (||u - u_h||, ||D^2 u - M_h||_F) by quadrature."""
    mesh = sol.mesh
    fs = FieldSpace(mesh, augmented=(sol.trial == "augmented"))
    err_u2 = 0.0
    err_m2 = 0.0
    for ids in _chunk_ids(mesh.n_triangles):
        batch = ElementBatch(mesh, ids, 0, fs.n_u)
        x, y = batch.qp[..., 0], batch.qp[..., 1]
        uh = np.einsum("nqj,nj->nq", batch.phiu, sol.u_coeffs[ids])
        ue = np.asarray(u_exact(x, y), dtype=float)
        err_u2 += float(np.sum(batch.qw * (ue - uh) ** 2))
        He = np.asarray(hess_exact(x, y), dtype=float)
        M = sol.M_coeffs[ids]
        d11 = He[..., 0, 0] - M[:, None, 0]
        d12 = He[..., 0, 1] - M[:, None, 1]
        d22 = He[..., 1, 1] - M[:, None, 2]
        err_m2 += float(np.sum(batch.qw * (d11**2 + 2.0 * d12**2 + d22**2)))
    return np.sqrt(err_u2), np.sqrt(err_m2)
