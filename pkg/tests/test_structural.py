import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qlfem.grid import build_square_mesh, interpolate
from qlfem.structural import (
    AuditPlan,
    GrowthData,
    StructureError,
    absorption_lower,
    audit_structure,
    linear_diffusion,
    p_laplacian,
    perturbed_p_laplacian,
    phi_metric,
    phi_norm,
    phi_p,
    phi_p_exact,
    phi_p_prime,
    psi,
    psi_exact,
    psi_prime,
    psi_sup,
    saturating_ratio_field,
    scaling_homotopy,
    table_field,
    truncate_Thk,
    truncate_Tk,
    truncation_homotopy,
    with_lower_order,
)
from scipy import integrate


def test_truncations_examples():
    assert truncate_Tk(3.0, 2.0) == 2.0
    assert truncate_Tk(-0.5, 2.0) == -0.5
    assert truncate_Thk(5.0, 1.0, 2.0) == 2.0
    assert truncate_Thk(-1.5, 1.0, 2.0) == -0.5
    assert truncate_Thk(0.3, 1.0, 2.0) == 0.0


@given(st.floats(-1e6, 1e6), st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
def test_truncation_identities(s, k, h):
    assert abs(truncate_Tk(s, k)) <= k
    # T_{h,k} = T_{h+k} - T_h
    assert truncate_Thk(s, h, k) == pytest.approx(truncate_Tk(s, h + k) - truncate_Tk(s, h), abs=1e-9 * (1 + abs(s)))


def test_phi_prime_at_zero_and_psi_relation():
    assert phi_p_prime(0.0, 3.0) == pytest.approx(1.0)
    s = np.linspace(-50, 50, 101)
    for p in (1.3, 2.0, 3.0):
        np.testing.assert_allclose(phi_p_prime(s, p) ** p, psi_prime(s), rtol=1e-13)


@pytest.mark.parametrize("p", [1.5, 2.0, 3.0])
@pytest.mark.parametrize("s", [0.3, 1.0, 7.0, 1e4])
def test_phi_p_against_direct_quadrature(p, s):
    def f(t):
        return ((1 + t * t) * np.log(np.e + t * t) ** 4) ** (-1 / (2 * p))

    ref, _ = integrate.quad(f, 0, s, limit=500, epsabs=0, epsrel=1e-13)
    assert phi_p(s, p) == pytest.approx(ref, rel=1e-10)
    assert phi_p(-s, p) == pytest.approx(-ref, rel=1e-10)


def test_cached_tables_agree_with_exact_primitives():
    s = np.array([0.0, 1e-3, 0.5, 2.0, 30.0, 1e3, 1e7])
    np.testing.assert_allclose(phi_p(s, 1.5), [phi_p_exact(v, 1.5) for v in s], rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(psi(s), [psi_exact(v) for v in s], rtol=1e-12, atol=1e-15)


def test_psi_sup_is_limit_of_psi():
    # t = sinh(y) gives int_0^inf dy / log(e + sinh^2 y)^2; tail past Y is 1 / (2(2Y - 2 log 2))
    Y = 50.0
    head, _ = integrate.quad(lambda y: 1 / np.log(np.e + np.sinh(y) ** 2) ** 2, 0, Y, limit=500, epsabs=0, epsrel=1e-13)
    ref = head + 1 / (2 * (2 * Y - 2 * np.log(2)))
    assert psi_sup() == pytest.approx(ref, rel=1e-12)
    assert psi(1e11) < psi_sup()


@given(st.floats(-1e5, 1e5), st.floats(-1e5, 1e5))
def test_phi_is_odd_and_increasing(a, b):
    lo, hi = min(a, b), max(a, b)
    assert phi_p(lo, 2.0) <= phi_p(hi, 2.0)
    assert phi_p(-a, 2.0) == pytest.approx(-phi_p(a, 2.0), abs=1e-12)


def test_phi_metric_is_a_metric_on_samples():
    m = build_square_mesh(4)
    rng = np.random.default_rng(1)
    us = [interpolate(m, lambda x, c=c: c * np.sin(np.pi * x[:, 0]) * x[:, 1] * (1 - x[:, 1])) for c in rng.normal(0, 5, 3)]
    a, b, c = us
    assert phi_metric(a, a, 2.0) == 0.0
    assert phi_metric(a, b, 2.0) == pytest.approx(phi_metric(b, a, 2.0))
    assert phi_metric(a, c, 2.0) <= phi_metric(a, b, 2.0) + phi_metric(b, c, 2.0) + 1e-14
    assert phi_norm(a, 2.0) == pytest.approx(phi_metric(a, 0 * a, 2.0) ** 2)


def test_growth_data_validation():
    with pytest.raises(StructureError):
        GrowthData(p=2.5, N=2)
    with pytest.raises(StructureError):
        GrowthData(p=2.0, N=2, nu=0.0)
    with pytest.raises(StructureError):
        GrowthData(p=1.5, N=2, q=5.0)


@pytest.mark.parametrize(
    "fld",
    [p_laplacian(1.5, eps=1e-6), p_laplacian(2.0), linear_diffusion(), perturbed_p_laplacian(1.8), table_field(2.0, [0, 1, 2, 10], [0, 1, 2, 10])],
    ids=lambda f: f.name,
)
def test_builtin_fields_pass_audit(fld):
    rep = audit_structure(fld, AuditPlan(n_samples=256))
    assert rep.ok, rep.summary()


def test_saturating_field_fails_coercivity():
    rep = audit_structure(saturating_ratio_field(), AuditPlan(n_samples=256, xi_max=100.0))
    assert not rep.ok
    assert any(v[0] == "coercivity" for v in rep.violations)


def test_audit_is_deterministic():
    a = audit_structure(p_laplacian(1.5), AuditPlan(n_samples=64, seed=3))
    b = audit_structure(p_laplacian(1.5), AuditPlan(n_samples=64, seed=3))
    assert a.margins == b.margins


def test_analytic_flux_jacobian_matches_finite_differences():
    fld = p_laplacian(1.5, eps=1e-3)
    rng = np.random.default_rng(0)
    xi = rng.normal(size=(50, 2))
    x = rng.uniform(size=(50, 2))
    J = fld.flux_jacobian(x, xi)
    h = 1e-7
    for j in range(2):
        e = np.zeros(2)
        e[j] = h
        fd = (fld.flux(x, xi + e) - fld.flux(x, xi - e)) / (2 * h)
        np.testing.assert_allclose(J[:, :, j], fd, rtol=1e-5, atol=1e-7)


def test_scaling_homotopy_endpoints_and_homogeneous_invariance():
    fld = linear_diffusion(lam=3.0)
    x = np.zeros((4, 2))
    xi = np.arange(8.0).reshape(4, 2)
    s = np.arange(4.0)
    for t in (0.0, 0.3, 1.0):
        ft = scaling_homotopy(fld, t)
        np.testing.assert_allclose(ft.flux(x, xi), xi)
        np.testing.assert_allclose(ft.lower(x, s, xi), -3.0 * s)
    with pytest.raises(ValueError):
        scaling_homotopy(fld, 1.5)


def test_scaling_homotopy_reaches_limit_pair():
    b, binf = absorption_lower(2.0)
    fld = with_lower_order(linear_diffusion(), *b, *binf)
    ft = scaling_homotopy(fld, 1e-8)
    x, s, xi = np.zeros((3, 2)), np.array([1.0, -2.0, 5.0]), np.zeros((3, 2))
    np.testing.assert_allclose(ft.lower(x, s, xi), 2.0 * s, rtol=1e-6)
    np.testing.assert_allclose(scaling_homotopy(fld, 0.0).lower(x, s, xi), 2.0 * s)


def test_truncation_homotopy_bounds_lower_order_term():
    fld = linear_diffusion(lam=10.0)
    ft = truncation_homotopy(fld, 0.25)
    s = np.linspace(-5, 5, 11)
    b = ft.lower(np.zeros((11, 2)), s, np.zeros((11, 2)))
    assert np.abs(b).max() == pytest.approx(4.0)
    ds, _ = ft.lower_derivatives(np.zeros((11, 2)), s, np.zeros((11, 2)))
    assert np.all(ds[np.abs(10 * s) > 4] == 0.0)
