import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qlfem.continuation import dirichlet_eigen
from qlfem.degree import (
    BoundarySolution,
    DegenerateJacobian,
    DegreeOptions,
    DiscreteMap,
    NodalBox,
    PhiBall,
    UnionRegion,
    brouwer_degree,
    stabilized_degree,
    truncated_map,
)
from qlfem.grid import build_square_mesh
from qlfem.measures import constant_density
from qlfem.structural import linear_diffusion

OPTS = DegreeOptions(n_starts=32)
CUBIC = DiscreteMap(lambda x: x**3 - x, lambda x: np.diag(3 * x**2 - 1), 1, "x^3-x")


def _complex_map(conj=False):
    # z^2 - 1 (holomorphic, zeros +-1 with positive sign) or its conjugate
    def F(x):
        z = complex(x[0], -x[1] if conj else x[1]) ** 2 - 1
        return np.array([z.real, z.imag])

    def J(x):
        a, b = x[0], (-x[1] if conj else x[1])
        s = -1.0 if conj else 1.0
        return np.array([[2 * a, -2 * b * s], [2 * b, 2 * a * s]])

    return DiscreteMap(F, J, 2)


def test_cubic_degree_on_covering_box():
    assert brouwer_degree(CUBIC, NodalBox([-2.0], [2.0]), OPTS).value == 1


def test_additivity_over_disjoint_boxes():
    parts = [NodalBox([-2.0], [-0.5]), NodalBox([-0.5], [0.5]), NodalBox([0.5], [2.0])]
    vals = [brouwer_degree(CUBIC, r, OPTS).value for r in parts]
    assert vals == [1, -1, 1]
    assert brouwer_degree(CUBIC, UnionRegion(tuple(parts)), OPTS).value == sum(vals)
    assert brouwer_degree(CUBIC, UnionRegion(tuple(parts[:2])), OPTS).value == 0


def test_excision_of_zero_free_set():
    full = brouwer_degree(CUBIC, NodalBox([-0.5], [0.5]), OPTS).value
    assert brouwer_degree(CUBIC, NodalBox([-0.5], [0.9]), OPTS).value == full
    assert brouwer_degree(CUBIC, NodalBox([0.1], [0.9]), OPTS).value == 0


def test_complex_square_has_degree_two_and_conjugate_minus_two():
    box = NodalBox([-2.0, -2.0], [2.0, 2.0])
    assert brouwer_degree(_complex_map(), box, OPTS).value == 2
    assert brouwer_degree(_complex_map(conj=True), box, OPTS).value == -2


def test_boundary_zero_is_rejected():
    with pytest.raises(BoundarySolution):
        brouwer_degree(CUBIC, NodalBox([-1.0], [0.5]), OPTS)


def test_degenerate_zero_is_rejected():
    m = DiscreteMap(lambda x: x**2, lambda x: np.diag(2 * x), 1)
    with pytest.raises(DegenerateJacobian):
        brouwer_degree(m, NodalBox([-1.0], [1.0]), OPTS)


@pytest.mark.parametrize("t", [0.0, 0.25, 0.5, 0.75, 1.0])
def test_homotopy_invariance_of_bounded_perturbation(t):
    mesh = build_square_mesh(3)
    I = mesh.interior_nodes
    A = (mesh.stiffness_matrix - 48.688 * mesh.mass_matrix)[I][:, I].toarray()
    c = np.linspace(1.0, 2.0, I.size)

    def F(x):
        return A @ x + t * np.tanh(x) - c

    def J(x):
        return A + t * np.diag(1 / np.cosh(x) ** 2)

    rep = brouwer_degree(DiscreteMap(F, J, I.size), NodalBox(-50 * np.ones(I.size), 50 * np.ones(I.size)), OPTS)
    assert rep.value == int(np.sign(np.linalg.det(A)))


def _expected_linear_degree(lam, mesh):
    vals = dirichlet_eigen(mesh, mesh.interior_nodes.size)[0]
    return (-1) ** int(np.sum(vals < lam))


@pytest.mark.parametrize("lam", [12.7, 48.688, 80.0, 108.6])
def test_stabilised_degree_of_linear_map_matches_eigenvalue_count(lam):
    mesh = build_square_mesh(3)
    rep = stabilized_degree(linear_diffusion(lam=lam), None, mesh, PhiBall(1.0, mesh, 2.0), OPTS)
    assert rep.value == _expected_linear_degree(lam, mesh)
    assert rep.confidence == "certified-small-n"
    assert rep.tau_bar is not None


@settings(max_examples=8)
@given(st.floats(1.0, 140.0).filter(lambda l: min(abs(l - e) for e in (25.38, 72.0, 86.4)) > 2.0))
def test_odd_map_has_odd_degree(lam):
    mesh = build_square_mesh(3)
    rep = stabilized_degree(linear_diffusion(lam=lam), None, mesh, PhiBall(1.0, mesh, 2.0), OPTS)
    assert rep.value % 2 == 1


def test_degree_report_is_deterministic_and_textual():
    mesh = build_square_mesh(3)
    fld = linear_diffusion(lam=0.5 * float(dirichlet_eigen(mesh, 1)[0][0]))
    m = truncated_map(fld, constant_density(1.0, 1.0), mesh, 1.0)
    a = brouwer_degree(m, PhiBall(50.0, mesh, 2.0), OPTS)
    b = brouwer_degree(m, PhiBall(50.0, mesh, 2.0), OPTS)
    assert a.value == b.value == 1
    assert a.text() == b.text()
    assert "value: 1" in a.text()


def test_region_validation():
    with pytest.raises(ValueError):
        NodalBox([1.0], [0.0])
    with pytest.raises(ValueError):
        PhiBall(0.0, build_square_mesh(2), 2.0)
