import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qlfem.continuation import (
    BlowUp,
    PathOptions,
    Reached,
    blowup_tau,
    dirichlet_eigen,
    eigen_alignment,
    normalize_blowup,
    richardson,
    run_fredholm_path,
    solve_limit_kernel,
)
from qlfem.grid import FeFunction, build_square_mesh
from qlfem.measures import constant_density, discretize_load
from qlfem.structural import linear_diffusion, p_laplacian

MESH = build_square_mesh(8)
LAM1 = float(dirichlet_eigen(MESH, 1)[0][0])


def test_discrete_eigenvalue_converges_to_continuum():
    vals = [float(dirichlet_eigen(build_square_mesh(n), 1)[0][0]) for n in (8, 16, 32)]
    errs = [v - 2 * np.pi**2 for v in vals]
    assert all(e > 0 for e in errs)  # P1 eigenvalues approximate from above
    assert np.log2(errs[0] / errs[1]) == pytest.approx(2.0, abs=0.1)
    assert abs(richardson(vals) - 2 * np.pi**2) < 0.1 * errs[-1]


def test_eigenvectors_are_mass_orthonormal():
    vals, vecs = dirichlet_eigen(MESH, 3)
    G = vecs.T @ (MESH.mass_matrix @ vecs)
    np.testing.assert_allclose(G, np.eye(3), atol=1e-10)
    assert np.all(np.diff(vals) >= 0)


def test_richardson_is_exact_for_quadratic_error():
    h = np.array([0.1, 0.05])
    assert richardson(list(3.0 + 7.0 * h**2)) == pytest.approx(3.0)
    with pytest.raises(ValueError):
        richardson([1.0])


def test_path_below_resonance_matches_linear_solve():
    fld = linear_diffusion(lam=0.5 * LAM1)
    mu = constant_density(1.0, 1.0)
    rep = run_fredholm_path(fld, mu, MESH, PathOptions(R_max=1e6))
    assert isinstance(rep.status, Reached)
    I = MESH.interior_nodes
    A = (MESH.stiffness_matrix - 0.5 * LAM1 * MESH.mass_matrix)[I][:, I].toarray()
    ref = np.linalg.solve(A, discretize_load(mu, MESH)[I])
    np.testing.assert_allclose(rep.status.u.values[I], ref, atol=1e-10)
    assert rep.samples[0].t == 0.0 and rep.samples[-1].t == 1.0


def test_path_at_resonance_blows_up_along_eigenfunction():
    fld = linear_diffusion(lam=LAM1)
    rep = run_fredholm_path(fld, constant_density(1.0, 1.0), MESH, PathOptions(R_max=1e6))
    assert isinstance(rep.status, BlowUp)
    e = dirichlet_eigen(MESH, 1)[1][:, 0]
    assert eigen_alignment(rep.status.candidate, e) >= 0.99
    assert rep.status.limit_residual <= 1e-8
    assert blowup_tau(rep.status.candidate, 2.0) == pytest.approx(1.0)


def test_csv_rows_header():
    rep = run_fredholm_path(linear_diffusion(lam=0.5 * LAM1), constant_density(1.0, 1.0), MESH, PathOptions(R_max=1e6))
    rows = list(rep.csv_rows())
    assert rows[0] == ("t", "phi_norm", "newton_iters", "status")
    assert len(rows) == len(rep.samples) + 1


def test_limit_kernel_found_only_at_eigenvalue():
    assert solve_limit_kernel(linear_diffusion(lam=LAM1), MESH).found
    assert not solve_limit_kernel(linear_diffusion(lam=0.5 * LAM1), MESH, attempts=8).found
    assert not solve_limit_kernel(linear_diffusion(), MESH, attempts=8).found


@given(st.floats(0.1, 100.0), st.floats(1.2, 2.0))
def test_blowup_tau_homogeneity_and_normalisation(c, p):
    rng = np.random.default_rng(0)
    v = np.zeros(MESH.n_nodes)
    v[MESH.interior_nodes] = rng.normal(size=MESH.interior_nodes.size)
    u = FeFunction(MESH, v)
    assert blowup_tau(c * u, p) == pytest.approx(c ** (p - 1) * blowup_tau(u, p), rel=1e-10)
    assert blowup_tau(normalize_blowup([u, c * u], p), p) == pytest.approx(1.0, rel=1e-10)


def test_normalize_rejects_zero():
    with pytest.raises(ValueError):
        normalize_blowup(FeFunction.zeros(MESH), 2.0)


@pytest.mark.parametrize("kw", [dict(dt=0.0), dict(dt=0.5, dt_max=0.25), dict(R_max=-1.0), dict(max_steps=0)])
def test_path_options_validation(kw):
    with pytest.raises(ValueError):
        PathOptions(**kw)


def test_path_for_homogeneous_field_without_lower_order_reaches_one():
    rep = run_fredholm_path(p_laplacian(1.5, eps=1e-6), constant_density(1.0, 1.0), MESH)
    assert isinstance(rep.status, Reached)
