"""Shared helpers: seeded random shape-regular triangles and polynomials."""

import numpy as np

from dpgnondiv.polyspace import Poly2D


def random_shape_regular_triangle(rng, min_angle_deg=25.0, min_diam=0.05,
                                  max_diam=2.0):
    """Random triangle with all angles >= min_angle_deg."""
    smin = np.sin(np.radians(min_angle_deg))
    while True:
        c = rng.uniform(-1.0, 1.0, (3, 2)) * rng.uniform(min_diam, max_diam)
        d1 = c[1] - c[0]
        d2 = c[2] - c[0]
        area = 0.5 * (d1[0] * d2[1] - d1[1] * d2[0])
        if area < 0.0:
            c = c[[0, 2, 1]]
            area = -area
        lens = [np.linalg.norm(c[(i + 1) % 3] - c[i]) for i in range(3)]
        if min(lens) < 1e-12:
            continue
        sins = [2.0 * area / (lens[i] * lens[(i + 1) % 3]) for i in range(3)]
        if min(sins) > smin and max(lens) < 2.0 * max_diam:
            return c


def random_poly(rng, degree):
    """Random bivariate polynomial of total degree <= degree."""
    c = rng.standard_normal((degree + 1, degree + 1))
    for i in range(degree + 1):
        for j in range(degree + 1):
            if i + j > degree:
                c[i, j] = 0.0
    return Poly2D(c)


def random_sym_matrix_poly(rng, degree):
    """Random symmetric matrix polynomial as (Q11, Q12, Q22)."""
    return tuple(random_poly(rng, degree) for _ in range(3))
