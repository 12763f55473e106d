import dataclasses

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qlfem.benchmarks import radial_exact
from qlfem.grid import FeFunction, build_radial_mesh, build_square_mesh
from qlfem.measures import LineCharge, WeakForm, constant_density, discretize_load
from qlfem.solve import (
    EvaluationError,
    NonConvergence,
    Schedule,
    ScheduleExhausted,
    SolverOptions,
    assemble_jacobian,
    assemble_residual,
    estimate_rhs,
    solve_discrete,
    solve_entropy,
    solve_truncated,
    tol_h,
)
from qlfem.structural import absorption_lower, linear_diffusion, p_laplacian, phi_metric, with_lower_order


def _fd_jacobian(fld, mesh, load, x, h=1e-7):
    J = np.zeros((x.size, x.size))
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        J[:, j] = (assemble_residual(fld, None, x + e, mesh, load) - assemble_residual(fld, None, x - e, mesh, load)) / (2 * h)
    return J


@pytest.mark.parametrize("fld", [p_laplacian(1.5, eps=1e-6), p_laplacian(1.9, eps=1e-6)], ids=["p1.5", "p1.9"])
def test_jacobian_matches_finite_differences(fld):
    mesh = build_square_mesh(5)
    load = discretize_load(constant_density(1.0), mesh)
    x = np.random.default_rng(4).normal(size=mesh.interior_nodes.size)
    J = assemble_jacobian(fld, x, mesh).toarray()
    Jfd = _fd_jacobian(fld, mesh, load, x)
    assert np.abs(J - Jfd).max() / np.abs(Jfd).max() <= 1e-5


def test_jacobian_with_lower_order_matches_finite_differences():
    (b, db), (bi, dbi) = absorption_lower(2.0)
    fld = with_lower_order(p_laplacian(1.8, eps=1e-4), lambda x, s, xi: np.tanh(s) + 0.1 * xi[..., 0], lambda x, s, xi: (1 / np.cosh(s) ** 2, np.stack([0.1 + 0 * s, 0 * s], -1)), bi, dbi)
    mesh = build_square_mesh(4)
    x = np.random.default_rng(1).normal(size=mesh.interior_nodes.size)
    J = assemble_jacobian(fld, x, mesh).toarray()
    Jfd = _fd_jacobian(fld, mesh, np.zeros(mesh.n_nodes), x)
    assert np.abs(J - Jfd).max() / np.abs(Jfd).max() <= 1e-5


def test_linear_jacobian_is_stiffness_matrix():
    mesh = build_square_mesh(6)
    I = mesh.interior_nodes
    K = mesh.stiffness_matrix[I][:, I].toarray()
    for x in (np.zeros(I.size), np.ones(I.size)):
        np.testing.assert_allclose(assemble_jacobian(linear_diffusion(), x, mesh).toarray(), K, atol=1e-12)


def test_zero_data_returns_zero_without_iterating():
    mesh = build_square_mesh(8)
    u, info = solve_discrete(p_laplacian(1.5), mesh, np.zeros(mesh.n_nodes), return_info=True)
    assert info.iterations <= 1
    assert np.all(u.values == 0.0)


def test_linear_problem_matches_direct_solve():
    mesh = build_square_mesh(10)
    load = discretize_load(constant_density(1.0), mesh)
    I = mesh.interior_nodes
    ref = np.linalg.solve(mesh.stiffness_matrix[I][:, I].toarray(), load[I])
    u = solve_discrete(linear_diffusion(), mesh, load)
    np.testing.assert_allclose(u.values[I], ref, atol=1e-12)


def test_radial_p_laplacian_matches_closed_form():
    mesh = build_radial_mesh(2, 1.0, 128)
    u = solve_discrete(p_laplacian(1.5), mesh, discretize_load(constant_density(1.0, np.pi), mesh))
    exact = radial_exact(1.5, 1.0)(mesh.nodes[:, 0])
    assert np.abs(u.values - exact).max() <= 1e-4


@given(st.integers(0, 2**31 - 1))
def test_solution_independent_of_initial_guess(seed):
    mesh = build_square_mesh(5)
    fld = p_laplacian(1.5, eps=1e-6)
    load = discretize_load(constant_density(1.0), mesh)
    ref = solve_discrete(fld, mesh, load)
    u0 = np.random.default_rng(seed).normal(scale=3.0, size=mesh.interior_nodes.size)
    u = solve_discrete(fld, mesh, load, u0=u0)
    assert np.abs(u.values - ref.values).max() <= 1e-8


def test_solver_options_validation():
    with pytest.raises(ValueError):
        SolverOptions(newton_tol=0.0)
    with pytest.raises(ValueError):
        SolverOptions(max_iter=0)
    with pytest.raises(ValueError):
        Schedule(n_max=0)


def test_truncated_solve_rejects_bad_tau():
    with pytest.raises(ValueError):
        solve_truncated(linear_diffusion(), constant_density(1.0), build_square_mesh(3), tau=0.0)


def test_nonfinite_flux_is_reported():
    fld = linear_diffusion()
    bad = dataclasses.replace(fld, a=lambda x, xi: np.full_like(xi, np.nan), name="nan")
    mesh = build_square_mesh(3)
    with pytest.raises(EvaluationError, match="x="):
        solve_discrete(bad, mesh, discretize_load(constant_density(1.0), mesh))


def test_nonconvergence_carries_best_iterate():
    mesh = build_square_mesh(6)
    with pytest.raises(NonConvergence) as exc:
        solve_discrete(p_laplacian(1.5, eps=1e-6), mesh, discretize_load(constant_density(50.0), mesh), SolverOptions(max_iter=1))
    assert exc.value.best is not None and exc.value.last is not None


def test_truncation_has_no_effect_once_b_is_small():
    (b, db), (bi, dbi) = absorption_lower(1.0)
    fld = with_lower_order(linear_diffusion(), b, db, bi, dbi, beta=1.0)
    mesh = build_square_mesh(8)
    load = discretize_load(constant_density(1.0), mesh)
    u1 = solve_truncated(fld, None, mesh, 0.5, load=load)
    u2 = solve_truncated(fld, None, mesh, 0.25, load=load)
    assert np.abs(u1.values).max() < 1.0
    assert np.abs(u1.values - u2.values).max() <= 1e-12


def test_entropy_solution_report_and_estimate():
    mesh = build_radial_mesh(2, 1.0, 32)
    fld, mu = linear_diffusion(), constant_density(4.0, np.pi)
    sol = solve_entropy(fld, mu, mesh)
    assert sol.estimate_slack > 0
    assert sol.estimate_rhs == pytest.approx(estimate_rhs(fld, mu, mesh))
    assert max(sol.entropy_residuals.values()) <= 1e-10
    assert "phi_norm" in sol.report()


def test_entropy_solution_converges_in_phi_metric_for_line_charge():
    mesh = build_square_mesh(16)
    sol = solve_entropy(linear_diffusion(), LineCharge((0.25, 0.5), (0.75, 0.5)), mesh)
    direct = solve_discrete(linear_diffusion(), mesh, discretize_load(LineCharge((0.25, 0.5), (0.75, 0.5)), mesh))
    assert phi_metric(sol.u, direct, 2.0) <= 1e-2


def test_schedule_exhaustion_is_raised_with_trace():
    mesh = build_square_mesh(8)
    with pytest.raises(ScheduleExhausted) as exc:
        solve_entropy(linear_diffusion(), LineCharge((0.25, 0.5), (0.75, 0.5)), mesh, Schedule(n_max=2, tol=1e-12))
    assert len(exc.value.trace) == 3


def test_estimate_rhs_is_none_for_weak_form_data():
    mesh = build_square_mesh(4)
    assert estimate_rhs(linear_diffusion(), WeakForm(), mesh) is None


def test_tol_h_scales_with_mesh():
    assert tol_h(build_square_mesh(8), 2.0) == pytest.approx(2 * build_square_mesh(8).h)
