import numpy as np
import pytest

from qlfem.benchmarks import BENCHMARKS, benchmark, radial_exact
from qlfem.grid import FeFunction, build_radial_mesh, build_square_mesh
from qlfem.measures import Density, WeakForm, constant_density, mollify, radial_power_density
from qlfem.solve import energy_identity_residual, solve_entropy
from qlfem.structural import linear_diffusion, p_laplacian
from qlfem.verify import (
    check_comparison,
    check_energy_identity,
    check_entropy_inequality,
    check_estimate,
    check_weak_identity_bounded_tests,
    convergence_study,
    data_distance,
    default_dictionary,
    regularity_sweep,
    study_passes,
)


@pytest.fixture(scope="module")
def radial_solution():
    b = benchmark("radial_p2_const4")
    mesh = b.mesh(32)
    fld, mu = b.field(), b.measure()
    return solve_entropy(fld, mu, mesh), fld, mu


def test_benchmark_registry():
    assert len(BENCHMARKS) == 8
    assert all(len(b.sizes) == 3 for b in BENCHMARKS)
    with pytest.raises(KeyError):
        benchmark("nope")


def test_radial_exact_closed_form():
    # -div(|u'|^{p-2}u' r) = f r with u(R)=0; for p=2, f=4: u = 1 - r^2
    u = radial_exact(2.0, 4.0)
    assert u(0.0) == pytest.approx(1.0) and u(0.5) == pytest.approx(0.75)


def test_dictionary_is_bounded_and_vanishes_on_boundary():
    mesh = build_square_mesh(8)
    for _, v in default_dictionary(mesh, amplitude=100.0):
        assert np.all(v[mesh.boundary_nodes] == 0.0)
        assert np.abs(v).max() <= 8.0


def test_checks_pass_on_radial_benchmark(radial_solution):
    sol, fld, mu = radial_solution
    for rep in (
        check_estimate(sol, fld, mu),
        check_entropy_inequality(sol, fld, mu),
        check_weak_identity_bounded_tests(sol, fld, mu),
        check_energy_identity(sol, fld, mu),
    ):
        assert rep.passed, rep.line()
        assert rep.name in rep.line()


def test_entropy_check_detects_a_wrong_solution(radial_solution):
    sol, fld, mu = radial_solution
    wrong = FeFunction(sol.u.mesh, 0.5 * sol.u.values)
    rep = check_entropy_inequality(wrong, fld, mu, tol=1e-8)
    assert not rep.passed and rep.witness


def test_estimate_skipped_for_weak_form():
    mesh = build_square_mesh(4)
    mu = WeakForm(lambda x: np.ones(x.shape[:-1]), w0_l1=1.0)
    sol = solve_entropy(linear_diffusion(), mu, mesh)
    assert check_estimate(sol, linear_diffusion(), mu).skipped


def test_energy_identity_of_zero_solution_is_zero():
    mesh = build_square_mesh(4)
    assert energy_identity_residual(FeFunction.zeros(mesh), linear_diffusion(), constant_density(0.0, 1.0)) == 0.0


def test_energy_lhs_bounded_below(radial_solution):
    sol, fld, mu = radial_solution
    assert energy_identity_residual(sol, fld, mu) >= 0.0


@pytest.mark.parametrize("fld", [linear_diffusion(), p_laplacian(1.5)], ids=["p2", "p1.5"])
def test_comparison_for_ordered_data(fld):
    mesh = build_square_mesh(8)
    rep = check_comparison(fld, constant_density(1.0, 1.0), constant_density(2.0, 1.0), mesh)
    assert rep.passed and rep.worst_margin == 0.0


def test_comparison_skips_unordered_data():
    rep = check_comparison(linear_diffusion(), constant_density(2.0), constant_density(1.0), build_square_mesh(4))
    assert rep.skipped


def test_data_distance_of_truncated_inverse_radius():
    mesh = build_radial_mesh(2, 1.0, 16)
    mu = radial_power_density(1.0, ball=(2, 1.0))
    for n in (4.0, 16.0):
        assert data_distance(mollify(mu, n), mu, mesh) == pytest.approx(np.pi / n, rel=1e-6)


def test_constant_sequence_study_has_zero_distances():
    mesh = build_square_mesh(6)
    mu = constant_density(1.0, 1.0)
    rows = convergence_study(linear_diffusion(), [mu, mu], mu, mesh, data_distances=[0.0, 0.0])
    assert all(r.phi_distance == 0.0 for r in rows)
    assert study_passes(rows)


def test_study_passes_counts_bumps():
    from qlfem.verify import StudyRow

    rows = [StudyRow(i, dd, d, ()) for i, (dd, d) in enumerate([(1, 1.0), (0.5, 2.0), (0.1, 0.5), (0.0, 0.8)])]
    assert not study_passes(rows, allowed_bumps=1)
    assert study_passes(rows[:3], allowed_bumps=1)


def test_regularity_sweep_window():
    mu = Density(lambda x: np.ones(x.shape[:-1]), lm_tag=1.5)
    meshes = [build_radial_mesh(2, 1.0, 8)]
    with pytest.raises(ValueError):
        regularity_sweep(linear_diffusion(), mu, meshes)  # p = N = 2 leaves no admissible m
    with pytest.raises(ValueError):
        regularity_sweep(linear_diffusion(), mu, meshes, q=2.5)
    rows = regularity_sweep(p_laplacian(1.8), mu, meshes, q=1.3)
    assert rows[0].grad_norm > 0
