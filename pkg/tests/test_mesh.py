"""Initial mesh construction, NVB refinement, conformity and classification."""

import numpy as np
import pytest

from dpgnondiv.mesh import (CORNER, INTERIOR, STRAIGHT, Mesh,
                            initial_square_mesh, refine_nvb, uniform_refine)


@pytest.fixture(scope="module")
def mesh0():
    return initial_square_mesh()


class TestInitialMesh:
    def test_counts(self, mesh0):
        assert mesh0.n_triangles == 16
        assert mesh0.n_vertices == 13

    def test_total_area(self, mesh0):
        assert mesh0.areas().sum() == pytest.approx(4.0, abs=1e-14)

    def test_boundary_classification(self, mesh0):
        cls = mesh0.boundary_class
        # 4 square corners, 4 edge midpoints on straight boundary pieces,
        # 5 interior vertices (domain center + 4 cell centers)
        assert (cls == CORNER).sum() == 4
        assert (cls == STRAIGHT).sum() == 4
        assert (cls == INTERIOR).sum() == 5
        corners = {tuple(v) for v in mesh0.vertices[cls == CORNER]}
        assert corners == {(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)}

    def test_axes_are_mesh_edges(self, mesh0):
        # every edge either avoids the axes or lies entirely on one of them
        for i, j in mesh0.edges:
            a, b = mesh0.vertices[i], mesh0.vertices[j]
            crosses_x = a[0] * b[0] < -1e-15
            crosses_y = a[1] * b[1] < -1e-15
            assert not crosses_x and not crosses_y

    def test_ccw_positive_area(self, mesh0):
        assert np.all(mesh0.signed_areas() > 0.0)

    def test_conforming(self, mesh0):
        assert mesh0.check_conforming()


class TestRefineNVB:
    def test_empty_marking_identity(self, mesh0):
        assert refine_nvb(mesh0, []) is mesh0

    def test_unknown_id_raises(self, mesh0):
        with pytest.raises(ValueError):
            refine_nvb(mesh0, [99])

    def test_marked_triangles_bisected(self, mesh0):
        m = refine_nvb(mesh0, [0])
        assert m.n_triangles > mesh0.n_triangles
        assert m.check_conforming()

    def test_random_sequences_conforming_and_shape_regular(self, mesh0):
        rng = np.random.default_rng(2024)
        min0 = mesh0.min_angle()
        for _ in range(10):
            m = mesh0
            for _ in range(4):
                k = rng.integers(1, max(2, m.n_triangles // 3))
                marked = rng.choice(m.n_triangles, size=k, replace=False)
                m = refine_nvb(m, marked)
                assert m.check_conforming()
                assert np.all(m.signed_areas() > 0.0)
            # criss-cross NVB keeps all triangles right isosceles
            assert m.min_angle() >= min0 - 1e-12

    def test_generation_increases(self, mesh0):
        m = refine_nvb(mesh0, range(16))
        assert m.generations.min() >= 1
        assert m.generations.max() <= mesh0.generations.max() + 2

    def test_boundary_midpoints_classified_straight(self, mesh0):
        m = uniform_refine(mesh0)
        new = np.arange(mesh0.n_vertices, m.n_vertices)
        onb = []
        for v in new:
            x, y = m.vertices[v]
            if abs(abs(x) - 1.0) < 1e-14 or abs(abs(y) - 1.0) < 1e-14:
                onb.append(v)
        assert len(onb) > 0
        assert np.all(m.boundary_class[onb] == STRAIGHT)


class TestUniformRefine:
    def test_element_counts(self, mesh0):
        m1 = uniform_refine(mesh0)
        assert m1.n_triangles == 64
        m2 = uniform_refine(m1)
        assert m2.n_triangles == 256

    def test_area_conserved(self, mesh0):
        m = uniform_refine(uniform_refine(mesh0))
        assert m.areas().sum() == pytest.approx(4.0, abs=1e-13)

    def test_conforming_and_angles(self, mesh0):
        m = uniform_refine(mesh0)
        assert m.check_conforming()
        assert m.min_angle() == pytest.approx(mesh0.min_angle(), abs=1e-12)

    def test_generation_increment(self, mesh0):
        m = uniform_refine(mesh0)
        assert np.all(m.generations == 2)


class TestDump:
    def test_format_and_determinism(self, mesh0):
        text = mesh0.dump_text()
        lines = text.strip().split("\n")
        assert len(lines) == 13 + 16
        assert lines[0].startswith("v ")
        assert lines[-1].startswith("t ")
        parts = lines[0].split()
        assert parts[3] in ("interior", "straight", "corner")
        assert text == initial_square_mesh().dump_text()

    def test_write(self, mesh0, tmp_path):
        path = tmp_path / "mesh.txt"
        mesh0.write_text(path)
        assert path.read_text() == mesh0.dump_text()
