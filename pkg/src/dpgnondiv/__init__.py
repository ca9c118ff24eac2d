"""Ultraweak minimal-residual (DPG) solvers for linear second-order PDEs in
nondivergence form A : D^2 u = f under the Cordes condition.

The package provides conforming triangle meshes with newest-vertex
bisection, the ultraweak first-order reformulation with rHCT trace
unknowns, the fully discrete DPG and DPG-least-squares schemes, built-in a
posteriori error indicators, and adaptive refinement drivers.
"""

from .adapt import (Indicators, LevelRecord, adaptive_solve, doerfler_mark,
                    estimate, lift_boundary_data)
from .forms import (CoefficientField, CordesViolation, cordes_epsilon,
                    cordes_sample_points, local_b, local_c, local_gram,
                    trace_pairing_element, verify_fortin_moments)
from .mesh import Mesh, initial_square_mesh, refine_nvb, uniform_refine
from .polyspace import (Poly2D, QuadratureRule, divdiv, edge_rule,
                        eval_hessian, integrate_edge, integrate_triangle,
                        triangle_rule)
from .problems import (ExactSolution, ProblemSpec, get_problem, problem_61,
                       problem_62, problem_63, problem_64, run_convergence)
from .solver import (GlobalSystem, Solution, assemble_system, element_schur,
                     field_errors, solve_dpg, solve_dpg_lsq)
from .spaces import (BrokenTestSpace, FieldSpace, TraceSpace,
                     apply_boundary_conditions, interpolate_trace,
                     trace_edge_values)

__version__ = "0.1.0"

__all__ = [
    "Mesh", "initial_square_mesh", "refine_nvb", "uniform_refine",
    "Poly2D", "QuadratureRule", "divdiv", "eval_hessian",
    "integrate_triangle", "integrate_edge", "triangle_rule", "edge_rule",
    "TraceSpace", "BrokenTestSpace", "FieldSpace",
    "apply_boundary_conditions", "interpolate_trace", "trace_edge_values",
    "CoefficientField", "CordesViolation", "cordes_epsilon",
    "cordes_sample_points", "local_b", "local_c", "local_gram",
    "trace_pairing_element", "verify_fortin_moments",
    "GlobalSystem", "Solution", "assemble_system", "element_schur",
    "field_errors", "solve_dpg", "solve_dpg_lsq",
    "Indicators", "LevelRecord", "adaptive_solve", "doerfler_mark",
    "estimate", "lift_boundary_data",
    "ExactSolution", "ProblemSpec", "get_problem", "problem_61",
    "problem_62", "problem_63", "problem_64", "run_convergence",
]
