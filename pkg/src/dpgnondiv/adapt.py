"""A posteriori error estimation, Doerfler marking, the adaptive solve loop,
and boundary lifting for inhomogeneous Dirichlet data.

The estimator is a byproduct of the stored residual representers: the
residual part of eta_T^2 is the squared discrete dual norm of the local
residual functional, the data part is the elementwise quadrature of
(A:M_h - f)^2.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .forms import ElementBatch, frobenius_components
from .mesh import Mesh, refine_nvb
from .solver import Solution, _chunk_ids, field_errors, solve_dpg, solve_dpg_lsq
from .spaces import ConstrainedTraceSpace, interpolate_trace

DEFAULT_THETA = 0.5
DEFAULT_DOF_BUDGET = 50_000


@dataclass
class Indicators:
    """Per-element squared indicators split into residual and data parts."""

    eta_res2: np.ndarray
    eta_data2: np.ndarray

    @property
    def eta_sq(self):
        return self.eta_res2 + self.eta_data2

    @property
    def eta_total(self):
        return float(np.sqrt(np.sum(self.eta_sq)))

    @property
    def eta_res(self):
        return float(np.sqrt(np.sum(self.eta_res2)))

    @property
    def eta_data(self):
        return float(np.sqrt(np.sum(self.eta_data2)))


def estimate(sol: Solution, problem, mesh: Mesh) -> Indicators:
    """Local error indicators from the stored residual dual norms."""
    if sol.eta_res2 is None or sol.mesh is not mesh:
        raise ValueError("solution does not carry residual data for this mesh")
    eta_data2 = np.zeros(mesh.n_triangles)
    for ids in _chunk_ids(mesh.n_triangles):
        batch = ElementBatch(mesh, ids, 0, sol.u_coeffs.shape[1])
        x, y = batch.qp[..., 0], batch.qp[..., 1]
        AE = frobenius_components(problem.A(x, y))
        am = np.einsum("nqj,nj->nq", AE, sol.M_coeffs[ids])
        fv = np.asarray(problem.f(x, y), dtype=float)
        eta_data2[ids] = np.sum(batch.qw * (am - fv) ** 2, axis=1)
    eta_res2 = np.maximum(sol.eta_res2, 0.0)
    return Indicators(eta_res2=eta_res2, eta_data2=eta_data2)


def doerfler_mark(ind: Indicators, theta: float):
    """Minimal-cardinality set carrying a theta fraction of the total
    squared indicator (greedy on the sorted indicators)."""
    if not 0.0 < theta <= 1.0:
        raise ValueError("theta must be in (0, 1]")
    eta2 = ind.eta_sq
    if len(eta2) == 0:
        raise ValueError("empty indicators")
    order = np.argsort(-eta2, kind="stable")
    csum = np.cumsum(eta2[order])
    total = csum[-1]
    if total == 0.0:
        return np.zeros(0, dtype=np.int64)
    k = int(np.searchsorted(csum, theta * total - 1e-14 * total)) + 1
    k = min(k, len(eta2))
    return np.sort(order[:k])


def lift_boundary_data(u, grad_u, mesh: Mesh):
    """Trace lift for inhomogeneous Dirichlet data.

    Boundary vertices receive (u(z), grad u(z)); at straight boundary
    vertices only the tangential gradient part is fixed (the normal
    derivative stays a free unknown), at corners the full gradient.
    Returns (vertex_values (nv, 3), expanded_offset (3*nv,)); the solver
    moves the lifted contribution to the right-hand side.
    """
    vals = interpolate_trace(u, grad_u, mesh).reshape(-1, 3)
    if not np.all(np.isfinite(vals[mesh.boundary_class > 0])):
        raise ValueError("non-finite boundary data")
    lift = np.zeros_like(vals)
    onb = mesh.boundary_class > 0
    lift[onb] = vals[onb]
    ctr = ConstrainedTraceSpace(mesh, lift)
    return lift, ctr.offset


@dataclass
class LevelRecord:
    """One adaptive/uniform level: mesh, solution, indicators, errors."""

    level: int
    mesh: Mesh
    solution: Solution
    indicators: Indicators
    err_u: float
    err_M: float
    marked: Optional[np.ndarray] = None
    extra: dict = field(default_factory=dict)


def _solve_by_tag(problem, mesh, method, trial, test_degree):
    if method == "dpg":
        return solve_dpg(problem, mesh, trial=trial, test_degree=test_degree)
    if method == "dpg-lsq":
        return solve_dpg_lsq(problem, mesh, trial=trial, test_degree=test_degree)
    raise ValueError(f"unknown method {method!r}")


def adaptive_solve(problem, initial_mesh: Mesh, theta: float = DEFAULT_THETA,
                   dof_budget: int = DEFAULT_DOF_BUDGET, method: str = "dpg",
                   trial: str = "std", test_degree: int = 0,
                   max_elements: Optional[int] = None):
    """Adaptive loop solve -> estimate -> mark -> refine until the budget.

    Stops after the first level whose free-DOF count exceeds ``dof_budget``
    (or whose element count exceeds ``max_elements`` when given); emits one
    LevelRecord per level.
    """
    if not 0.0 < theta <= 1.0:
        raise ValueError("theta must be in (0, 1]")
    records = []
    mesh = initial_mesh
    level = 0
    while True:
        sol = _solve_by_tag(problem, mesh, method, trial, test_degree)
        ind = estimate(sol, problem, mesh)
        if problem.exact is not None:
            eu, em = field_errors(sol, problem.exact.u, problem.exact.hess)
        else:
            eu, em = float("nan"), float("nan")
        marked = doerfler_mark(ind, theta)
        rec = LevelRecord(level=level, mesh=mesh, solution=sol, indicators=ind,
                          err_u=eu, err_M=em, marked=marked)
        records.append(rec)
        over_dofs = sol.ndof > dof_budget
        over_elem = max_elements is not None and mesh.n_triangles > max_elements
        if over_dofs or over_elem or len(marked) == 0:
            break
        mesh = refine_nvb(mesh, marked)
        level += 1
    return records
