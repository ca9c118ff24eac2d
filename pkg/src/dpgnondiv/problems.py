"""Benchmark problems on (-1, 1)^2, the Cordes report, and convergence-study
drivers emitting deterministic CSV tables and mesh/solution exports.

All four shipped problems share the Cordes-elliptic coefficient family with
off-diagonal sign(xy) jumps aligned with the coordinate axes; the initial
mesh keeps those jumps on element edges.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .adapt import (DEFAULT_THETA, Indicators, LevelRecord, adaptive_solve,
                    estimate)
from .forms import (CoefficientField, cordes_epsilon, cordes_sample_points)
from .mesh import Mesh, initial_square_mesh, uniform_refine
from .solver import field_errors, solve_dpg, solve_dpg_lsq
from .spaces import interpolate_trace


@dataclass
class ExactSolution:
    u: Callable
    grad: Callable
    hess: Callable


@dataclass
class ProblemSpec:
    """Problem data: coefficients, right-hand side, optional exact solution.

    ``boundary`` is 'homogeneous' or 'lift' (trace DOFs interpolated from
    the exact solution and moved to the right-hand side).
    """

    name: str
    A: CoefficientField
    f: Callable
    exact: Optional[ExactSolution] = None
    boundary: str = "homogeneous"
    preferred_trial: str = "std"
    notes: dict = field(default_factory=dict)

    def lift_values(self, mesh: Mesh):
        if self.boundary != "lift":
            return None
        if self.exact is None:
            raise ValueError("lift boundary requires an exact solution")
        vals = interpolate_trace(self.exact.u, self.exact.grad, mesh).reshape(-1, 3)
        lift = np.zeros_like(vals)
        onb = mesh.boundary_class > 0
        lift[onb] = vals[onb]
        return lift


def _sign_coefficient(g=None):
    """A = [[2, g(x,y)*sign(xy)], [g(x,y)*sign(xy), 2]]."""

    def fn(x, y):
        s = np.sign(x * y)
        off = s if g is None else g(x, y) * s
        out = np.empty(np.shape(off) + (2, 2))
        out[..., 0, 0] = 2.0
        out[..., 1, 1] = 2.0
        out[..., 0, 1] = off
        out[..., 1, 0] = off
        return out

    return fn


def _phi(x):
    return x * np.exp(1.0 - np.abs(x)) - x


def _dphi(x):
    return np.exp(1.0 - np.abs(x)) * (1.0 - np.abs(x)) - 1.0


def _ddphi(x):
    return np.exp(1.0 - np.abs(x)) * (np.abs(x) - 2.0) * np.sign(x)


def problem_61() -> ProblemSpec:
    """Smooth solution (x e^{1-|x|} - x)(y e^{1-|y|} - y), quadrant-wise
    constant coefficients aligned with the initial mesh."""
    A = CoefficientField(fn=_sign_coefficient(), piecewise_polynomial_degree=0,
                         name="sign-offdiagonal")

    def u(x, y):
        return _phi(x) * _phi(y)

    def grad(x, y):
        return np.stack([_dphi(x) * _phi(y), _phi(x) * _dphi(y)], axis=-1)

    def hess(x, y):
        uxx = _ddphi(x) * _phi(y)
        uxy = _dphi(x) * _dphi(y)
        uyy = _phi(x) * _ddphi(y)
        return _stack_hess(uxx, uxy, uyy)

    def f(x, y):
        s = np.sign(x * y)
        return (2.0 * _ddphi(x) * _phi(y) + 2.0 * s * _dphi(x) * _dphi(y)
                + 2.0 * _phi(x) * _ddphi(y))

    return ProblemSpec(name="61", A=A, f=f,
                       exact=ExactSolution(u=u, grad=grad, hess=hess),
                       boundary="homogeneous",
                       notes=dict(mesh_aligned=True, regularity="piecewise smooth"))


def _r2_power(x, y, p):
    """(x^2 + y^2)^p with the origin mapped to 0 (p > 0 branches only)."""
    r2 = x * x + y * y
    safe = np.where(r2 > 0.0, r2, 1.0)
    return np.where(r2 > 0.0, safe**p, 0.0)


def problem_62() -> ProblemSpec:
    """Singular solution (x^2+y^2)^{5/6}; inhomogeneous boundary by lifting."""
    A = CoefficientField(fn=_sign_coefficient(), piecewise_polynomial_degree=0,
                         name="sign-offdiagonal")

    def u(x, y):
        return _r2_power(x, y, 5.0 / 6.0)

    def grad(x, y):
        c = (5.0 / 3.0) * _r2_power(x, y, -1.0 / 6.0)
        return np.stack([c * x, c * y], axis=-1)

    def hess(x, y):
        c1 = (5.0 / 3.0) * _r2_power(x, y, -1.0 / 6.0)
        c2 = (5.0 / 9.0) * _r2_power(x, y, -7.0 / 6.0)
        return _stack_hess(c1 - c2 * x * x, -c2 * x * y, c1 - c2 * y * y)

    def f(x, y):
        s = np.sign(x * y)
        return ((50.0 / 9.0) * _r2_power(x, y, -1.0 / 6.0)
                - (10.0 / 9.0) * s * x * y * _r2_power(x, y, -7.0 / 6.0))

    return ProblemSpec(name="62", A=A, f=f,
                       exact=ExactSolution(u=u, grad=grad, hess=hess),
                       boundary="lift",
                       notes=dict(mesh_aligned=True,
                                  regularity="H^(2+2/3-delta)"))


def problem_63() -> ProblemSpec:
    """Unknown solution: f = 1, ring-wise off-diagonal coefficient not
    aligned with the mesh (circles at radius 1/3 and 2/3 take the outer
    branch by convention)."""

    def g(x, y):
        r = np.sqrt(x * x + y * y)
        return np.where(r < 1.0 / 3.0, 1.0, np.where(r < 2.0 / 3.0, -1.0, 0.0))

    A = CoefficientField(fn=_sign_coefficient(g), piecewise_polynomial_degree=None,
                         name="ring-offdiagonal")

    def f(x, y):
        return np.ones_like(np.asarray(x, dtype=float))

    return ProblemSpec(name="63", A=A, f=f, exact=None, boundary="homogeneous",
                       notes=dict(mesh_aligned=False))


def problem_64() -> ProblemSpec:
    """Same data as problem 61 paired with the augmented trial space (the
    scalar field component raised from P0 to P1)."""
    spec = problem_61()
    spec.name = "64"
    spec.preferred_trial = "augmented"
    spec.notes = dict(spec.notes, trial="augmented")
    return spec


def _stack_hess(uxx, uxy, uyy):
    out = np.empty(np.shape(uxx) + (2, 2))
    out[..., 0, 0] = uxx
    out[..., 0, 1] = uxy
    out[..., 1, 0] = uxy
    out[..., 1, 1] = uyy
    return out


PROBLEMS = {"61": problem_61, "62": problem_62, "63": problem_63, "64": problem_64}


def get_problem(key) -> ProblemSpec:
    key = str(key)
    if key not in PROBLEMS:
        raise KeyError(f"unknown problem {key!r}; choose from {sorted(PROBLEMS)}")
    return PROBLEMS[key]()


def verify_quadrature_off_axes(mesh: Mesh):
    """The interior quadrature rule must never sample x = 0 or y = 0, where
    sign(xy) would be evaluated at its discontinuity."""
    pts = cordes_sample_points(mesh)
    if np.any(pts[:, 0] == 0.0) or np.any(pts[:, 1] == 0.0):
        raise RuntimeError("quadrature point on a coefficient discontinuity line")


# ---------------------------------------------------------------------------
# convergence studies
# ---------------------------------------------------------------------------

TABLE_HEADER = ("level,nelem,ndof,err_u,err_M,eta_res,eta_data,eta_total,"
                "theta,method,eoc_h,eoc_ndof")


def eoc_wrt_h(errors, hs):
    """Experimental orders log(e_k-1/e_k)/log(h_k-1/h_k); first entry nan."""
    out = [float("nan")]
    for k in range(1, len(errors)):
        out.append(float(np.log(errors[k - 1] / errors[k])
                         / np.log(hs[k - 1] / hs[k])))
    return out


def eoc_wrt_ndof(errors, ndofs):
    """Orders with respect to ndof^(-1/2) (the 2D mesh-size proxy)."""
    out = [float("nan")]
    for k in range(1, len(errors)):
        out.append(float(np.log(errors[k - 1] / errors[k])
                         / np.log(np.sqrt(ndofs[k] / ndofs[k - 1]))))
    return out


def _combined_field_error(rec: LevelRecord):
    if np.isnan(rec.err_u):
        return rec.indicators.eta_total
    return float(np.hypot(rec.err_u, rec.err_M))


def run_convergence(problem: ProblemSpec, method: str = "dpg",
                    refine: str = "uniform", theta: float = DEFAULT_THETA,
                    levels: Optional[int] = None,
                    max_dofs: Optional[int] = None,
                    trial: Optional[str] = None, test_degree: int = 0,
                    out_dir: Optional[str] = None):
    """Run a uniform or adaptive convergence study.

    Returns the list of LevelRecord; when ``out_dir`` is given also writes
    ``table.csv``, per-level ``mesh_L.txt`` and ``solution_L.csv``, and a
    flat key=value ``meta.txt``.  Output is byte-identical across runs with
    identical configuration.
    """
    if trial is None:
        trial = problem.preferred_trial
    mesh0 = initial_square_mesh()
    verify_quadrature_off_axes(mesh0)
    eps, ell_ok = cordes_epsilon(problem.A, cordes_sample_points(mesh0))

    if refine == "uniform":
        if levels is None:
            levels = 5
        records = []
        mesh = mesh0
        for lev in range(levels + 1):
            sol = (solve_dpg if method == "dpg" else solve_dpg_lsq)(
                problem, mesh, trial=trial, test_degree=test_degree)
            ind = estimate(sol, problem, mesh)
            if problem.exact is not None:
                eu, em = field_errors(sol, problem.exact.u, problem.exact.hess)
            else:
                eu, em = float("nan"), float("nan")
            records.append(LevelRecord(level=lev, mesh=mesh, solution=sol,
                                       indicators=ind, err_u=eu, err_M=em))
            if lev < levels:
                mesh = uniform_refine(mesh)
    elif refine == "adaptive":
        budget = max_dofs if max_dofs is not None else 50_000
        records = adaptive_solve(problem, mesh0, theta=theta, dof_budget=budget,
                                 method=method, trial=trial,
                                 test_degree=test_degree)
    else:
        raise ValueError(f"unknown refinement strategy {refine!r}")

    errs = [_combined_field_error(r) for r in records]
    hs = [float(r.mesh.diameters().max()) for r in records]
    ndofs = [r.solution.ndof for r in records]
    eh = eoc_wrt_h(errs, hs)
    en = eoc_wrt_ndof(errs, ndofs)
    for r, a, b in zip(records, eh, en):
        r.extra["eoc_h"] = a
        r.extra["eoc_ndof"] = b

    if out_dir is not None:
        write_outputs(records, problem, method=method, refine=refine,
                      theta=theta, trial=trial, test_degree=test_degree,
                      out_dir=out_dir, cordes=(eps, ell_ok))
    return records


def format_table(records, theta, method):
    lines = [TABLE_HEADER]
    for r in records:
        lines.append(
            f"{r.level},{r.mesh.n_triangles},{r.solution.ndof},"
            f"{r.err_u:.12e},{r.err_M:.12e},"
            f"{r.indicators.eta_res:.12e},{r.indicators.eta_data:.12e},"
            f"{r.indicators.eta_total:.12e},{theta:.6g},{method},"
            f"{r.extra.get('eoc_h', float('nan')):.6g},"
            f"{r.extra.get('eoc_ndof', float('nan')):.6g}")
    return "\n".join(lines) + "\n"


def write_outputs(records, problem, method, refine, theta, trial, test_degree,
                  out_dir, cordes):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "table.csv"), "w") as fh:
        fh.write(format_table(records, theta, method))
    for r in records:
        r.mesh.write_text(os.path.join(out_dir, f"mesh_{r.level}.txt"))
        r.solution.write_csv(os.path.join(out_dir, f"solution_{r.level}.csv"))
    eps, ell_ok = cordes
    last = records[-1].solution.meta
    meta = {
        "problem": problem.name,
        "method": method,
        "refine": refine,
        "theta": f"{theta:.6g}",
        "trial": trial,
        "test_degree": test_degree,
        "levels": len(records),
        "cordes_epsilon": f"{eps:.12g}",
        "ellipticity_ok": str(ell_ok).lower(),
        "mesh_aligned": str(bool(last.get("mesh_aligned", False))).lower(),
        "variational_crime": str(bool(last.get("variational_crime", False))).lower(),
        "linear_solver": last.get("linear_solver", ""),
        "volume_quadrature_exactness": 13,
        "edge_gauss_points": 6,
        "final_nelem": records[-1].mesh.n_triangles,
        "final_ndof": records[-1].solution.ndof,
    }
    with open(os.path.join(out_dir, "meta.txt"), "w") as fh:
        for k, v in meta.items():
            fh.write(f"{k}={v}\n")
