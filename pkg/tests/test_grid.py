import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qlfem.grid import (
    FeFunction,
    Mesh,
    MeshError,
    build_radial_mesh,
    build_square_mesh,
    grad_p_norm,
    integrate,
    interpolate,
    read_mesh,
    read_solution,
    refine,
    write_mesh,
    write_solution,
)


def test_square_mesh_n1_counts():
    m = build_square_mesh(1)
    assert (m.n_nodes, m.n_cells, m.boundary_nodes.size) == (4, 2, 4)


def test_square_mesh_n2_counts():
    m = build_square_mesh(2)
    assert (m.n_nodes, m.n_cells, m.boundary_nodes.size) == (9, 8, 8)
    assert m.interior_nodes.tolist() == [4]


@pytest.mark.parametrize("n", [0, -3])
def test_square_mesh_rejects_nonpositive_n(n):
    with pytest.raises(MeshError):
        build_square_mesh(n)


@pytest.mark.parametrize("args", [(1, 1.0, 8), (2, 0.0, 8), (2, 1.0, 1)])
def test_radial_mesh_rejects_bad_arguments(args):
    with pytest.raises(MeshError):
        build_radial_mesh(*args)


def test_square_cells_are_right_triangles():
    m = build_square_mesh(4)
    x = m.nodes[m.cells]
    for i in range(3):
        a, b = x[:, (i + 1) % 3] - x[:, i], x[:, (i + 2) % 3] - x[:, i]
        cos = np.sum(a * b, axis=1)
        assert np.all(cos >= -1e-14)  # no obtuse angle


def test_inverted_cell_rejected():
    with pytest.raises(MeshError):
        Mesh(2, [[0, 0], [1, 0], [0, 1]], [[0, 2, 1]], [0, 1, 2])


def test_repeated_vertex_rejected():
    with pytest.raises(MeshError):
        Mesh(2, [[0, 0], [1, 0], [0, 1]], [[0, 1, 1]], [0, 1, 2])


def test_disk_area_from_radial_mesh():
    m = build_radial_mesh(2, 1.0, 8)
    assert integrate(lambda x: np.ones(x.shape[:-1]), m) == pytest.approx(np.pi, rel=1e-14)


def test_ball_volume_in_three_dimensions():
    m = build_radial_mesh(3, 2.0, 16)
    assert integrate(lambda x: np.ones(x.shape[:-1]), m) == pytest.approx(4 / 3 * np.pi * 8, rel=1e-12)


def test_radial_gradient_norm_of_cone():
    # u = 1 - r on the unit disk: int |u'|^2 = pi, so the 2-norm is sqrt(pi)
    m = build_radial_mesh(2, 1.0, 10)
    u = interpolate(m, lambda x: 1 - x[:, 0])
    assert grad_p_norm(u, 2.0) == pytest.approx(np.sqrt(np.pi), rel=1e-13)


def test_grad_norm_requires_finite_p():
    u = FeFunction.zeros(build_square_mesh(2))
    with pytest.raises(ValueError):
        grad_p_norm(u, 1.0)


def test_mass_matrix_partition_of_unity():
    m = build_square_mesh(5)
    assert m.mass_matrix.sum() == pytest.approx(1.0, rel=1e-13)


def test_stiffness_annihilates_constants():
    m = build_square_mesh(4)
    assert np.abs(m.stiffness_matrix @ np.ones(m.n_nodes)).max() < 1e-12


def test_refine_quadruples_cells_and_keeps_area():
    m = build_square_mesh(3)
    r = refine(m)
    assert r.n_cells == 4 * m.n_cells
    assert r.cell_volumes.sum() == pytest.approx(1.0)
    assert r.boundary_nodes.size == 2 * m.boundary_nodes.size


def test_refine_radial_doubles():
    m = refine(build_radial_mesh(2, 1.0, 8))
    assert m.n_cells == 16 and m.boundary_nodes.tolist() == [16]


def test_fefunction_is_immutable():
    u = FeFunction.zeros(build_square_mesh(2))
    with pytest.raises(ValueError):
        u.values[0] = 1.0


def test_mesh_and_solution_round_trip(tmp_path):
    m = build_radial_mesh(3, 1.5, 6)
    write_mesh(m, tmp_path / "m.txt", header="hello")
    m2 = read_mesh(tmp_path / "m.txt")
    assert m2.ambient_dim == 3
    np.testing.assert_array_equal(m2.nodes, m.nodes)
    np.testing.assert_array_equal(m2.cells, m.cells)
    u = interpolate(m, lambda x: np.cos(x[:, 0]))
    write_solution(u, tmp_path / "u.txt")
    np.testing.assert_array_equal(read_solution(m, tmp_path / "u.txt").values, u.values)


@given(st.integers(1, 6), st.floats(1.1, 4.0))
def test_gradient_norm_homogeneous(n, p):
    m = build_square_mesh(n + 1)
    rng = np.random.default_rng(n)
    u = FeFunction(m, rng.standard_normal(m.n_nodes))
    assert grad_p_norm(3.0 * u, p) == pytest.approx(3.0 * grad_p_norm(u, p), rel=1e-12)


@given(st.integers(2, 6))
def test_quadrature_exact_for_quadratics(n):
    m = build_square_mesh(n)
    val = integrate(lambda x: x[..., 0] ** 2 + x[..., 0] * x[..., 1], m)
    assert val == pytest.approx(1 / 3 + 1 / 4, rel=1e-13)
