"""Quadrature exactness, polynomial operators, and basis conditioning."""

import math

import numpy as np
import pytest
import sympy

from dpgnondiv.polyspace import (Poly2D, ScalarBasis, divdiv, edge_rule,
                                 eval_hessian, integrate_edge,
                                 integrate_triangle, monomial_exponents,
                                 triangle_rule)

REF = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])


def reference_monomial_integral(a, b):
    return math.factorial(a) * math.factorial(b) / math.factorial(a + b + 2)


class TestTriangleRule:
    def test_weights_sum_to_reference_area(self):
        rule = triangle_rule()
        assert rule.weights.sum() == pytest.approx(0.5, abs=1e-15)
        assert np.all(rule.weights > 0)

    def test_points_strictly_interior(self):
        rule = triangle_rule()
        assert np.all(rule.points > 0.0)
        assert np.all(rule.points < 1.0)

    def test_exactness_all_monomials(self):
        rule = triangle_rule()
        for a, b in monomial_exponents(rule.exactness_degree):
            exact = reference_monomial_integral(int(a), int(b))
            got = integrate_triangle(Poly2D.from_terms({(int(a), int(b)): 1.0}),
                                     REF, rule)
            assert got == pytest.approx(exact, rel=1e-13)

    def test_affine_mapping(self):
        coords = np.array([[1.0, 2.0], [4.0, 2.5], [2.0, 5.0]])
        area = 0.5 * abs((coords[1] - coords[0])[0] * (coords[2] - coords[0])[1]
                         - (coords[1] - coords[0])[1] * (coords[2] - coords[0])[0])
        assert integrate_triangle(lambda x, y: np.ones_like(x), coords) == \
            pytest.approx(area, rel=1e-14)


class TestIntegrateTriangle:
    def test_constant_on_reference(self):
        assert integrate_triangle(Poly2D([[1.0]]), REF) == pytest.approx(0.5)

    def test_linear(self):
        p = Poly2D.from_terms({(1, 0): 1.0, (0, 1): 1.0})
        assert integrate_triangle(p, REF) == pytest.approx(1.0 / 3.0, rel=1e-14)

    def test_x2y2(self):
        p = Poly2D.from_terms({(2, 2): 1.0})
        assert integrate_triangle(p, REF) == pytest.approx(1.0 / 180.0, rel=1e-13)

    def test_degenerate_triangle_raises(self):
        bad = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
        with pytest.raises(ValueError):
            integrate_triangle(Poly2D([[1.0]]), bad)


class TestIntegrateEdge:
    def test_length(self):
        assert integrate_edge(lambda x, y: np.ones_like(x), (0, 0), (2, 0)) == \
            pytest.approx(2.0)

    def test_s_squared_two_points(self):
        val = integrate_edge(lambda x, y: x**2, (0, 0), (1, 0), n_points=2)
        assert val == pytest.approx(1.0 / 3.0, rel=1e-14)

    def test_degree7_four_points(self):
        # along the diagonal edge, s = sqrt(2) x; antiderivative oracle
        val = integrate_edge(lambda x, y: x**7, (0.0, 0.0), (1.0, 1.0),
                             n_points=4)
        exact = math.sqrt(2.0) / 8.0
        assert val == pytest.approx(exact, rel=1e-13)

    def test_zero_edge_raises(self):
        with pytest.raises(ValueError):
            integrate_edge(lambda x, y: x, (1, 1), (1, 1))

    def test_gauss_rule_degree(self):
        s, w = edge_rule(6)
        for k in range(12):
            assert np.dot(w, s**k) == pytest.approx(1.0 / (k + 1), rel=1e-13)


class TestHessianAndDivDiv:
    def test_hessian_x2(self):
        p = Poly2D.from_terms({(2, 0): 1.0})
        assert np.allclose(eval_hessian(p, (0.3, -0.7)), [[2, 0], [0, 0]])

    def test_hessian_xy(self):
        p = Poly2D.from_terms({(1, 1): 1.0})
        assert np.allclose(eval_hessian(p, (5.0, 2.0)), [[0, 1], [1, 0]])

    def test_hessian_x3y(self):
        p = Poly2D.from_terms({(3, 1): 1.0})
        assert np.allclose(eval_hessian(p, (1.0, 2.0)), [[12, 3], [3, 0]])

    def test_hessian_sympy_oracle(self):
        rng = np.random.default_rng(3)
        x, y = sympy.symbols("x y")
        for _ in range(5):
            coeffs = rng.standard_normal((4, 4))
            expr = sum(coeffs[i, j] * x**i * y**j
                       for i in range(4) for j in range(4))
            p = Poly2D(coeffs)
            pt = rng.uniform(-2, 2, 2)
            H = eval_hessian(p, pt)
            subs = {x: pt[0], y: pt[1]}
            assert H[0, 0] == pytest.approx(float(sympy.diff(expr, x, 2).subs(subs)), rel=1e-11, abs=1e-11)
            assert H[0, 1] == pytest.approx(float(sympy.diff(expr, x, y).subs(subs)), rel=1e-11, abs=1e-11)
            assert H[1, 1] == pytest.approx(float(sympy.diff(expr, y, 2).subs(subs)), rel=1e-11, abs=1e-11)

    def test_divdiv_constant(self):
        q = Poly2D([[3.0]])
        assert divdiv((q, q, q)).coeffs.max() == 0.0

    def test_divdiv_diag_squares(self):
        q11 = Poly2D.from_terms({(2, 0): 1.0})
        q22 = Poly2D.from_terms({(0, 2): 1.0})
        dd = divdiv((q11, Poly2D([[0.0]]), q22))
        assert dd(0.0, 0.0) == pytest.approx(4.0)
        assert dd.degree == 0

    def test_divdiv_offdiag(self):
        # Q12 = x^2 y: divDiv = 2 d2/dxdy (x^2 y) = 4x
        q12 = Poly2D.from_terms({(2, 1): 1.0})
        dd = divdiv((Poly2D([[0.0]]), q12, Poly2D([[0.0]])))
        xs = np.linspace(-2, 2, 7)
        assert np.allclose(dd(xs, 0 * xs), 4 * xs)

    def test_divdiv_of_scalar_identity_is_laplacian(self):
        # div Div (v I) = Laplace v, coefficient-wise up to degree 6
        rng = np.random.default_rng(11)
        for _ in range(10):
            c = rng.standard_normal((7, 7))
            for i in range(7):
                for j in range(7):
                    if i + j > 6:
                        c[i, j] = 0.0
            v = Poly2D(c)
            lhs = divdiv((v, Poly2D([[0.0]]), v))
            rhs = v.dx().dx() + v.dy().dy()
            m = np.zeros((7, 7))
            m[:lhs.coeffs.shape[0], :lhs.coeffs.shape[1]] += lhs.coeffs
            m[:rhs.coeffs.shape[0], :rhs.coeffs.shape[1]] -= rhs.coeffs
            assert np.abs(m).max() < 1e-12


class TestScalarBasis:
    def test_dimension(self):
        coords = np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 1.0]])
        for p in range(5):
            basis = ScalarBasis(p, coords)
            assert basis.dim == (p + 1) * (p + 2) // 2

    def test_gram_nonsingular_random_triangles(self):
        from conftest import random_shape_regular_triangle
        rng = np.random.default_rng(7)
        rule = triangle_rule()
        for _ in range(20):
            coords = random_shape_regular_triangle(rng)
            d1, d2 = coords[1] - coords[0], coords[2] - coords[0]
            area = 0.5 * (d1[0] * d2[1] - d1[1] * d2[0])
            basis = ScalarBasis(4, coords)
            pts = rule.points @ coords
            w = rule.weights * 2.0 * area
            vals = basis.eval(pts[:, 0], pts[:, 1])
            G = np.einsum("q,qi,qj->ij", w, vals, vals)
            ev = np.linalg.eigvalsh(G)
            assert ev.min() > 0.0
            assert ev.max() / ev.min() < 1e8

    def test_project_coeffs_exact(self):
        coords = np.array([[0.3, -0.2], [1.4, 0.1], [0.5, 1.7]])
        basis = ScalarBasis(4, coords)
        rng = np.random.default_rng(5)
        c = rng.standard_normal((3, 3))
        p = Poly2D(c)
        vec = basis.project_coeffs(p)
        pts = rng.uniform(-1, 2, (20, 2))
        vals = basis.eval(pts[:, 0], pts[:, 1]) @ vec
        assert np.allclose(vals, p(pts[:, 0], pts[:, 1]), rtol=1e-12, atol=1e-12)
