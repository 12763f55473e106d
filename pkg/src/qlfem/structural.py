"""Coefficient fields, structure audits, truncations and change of variables.

A coefficient field is the pair ``(a, b)`` of the operator
``u -> -div a(x, grad u) + b(x, u, grad u)`` together with the constants of
its growth/coercivity bounds.  All callables are vectorised:

* ``a(x, xi)``  with ``x`` of shape (m, d) and ``xi`` of shape (m, d) -> (m, d)
* ``b(x, s, xi)`` with ``s`` of shape (m,) -> (m,)
* ``da(x, xi)`` -> (m, d, d),  ``db(x, s, xi)`` -> ((m,), (m, d))

Derivatives are optional; missing ones are replaced by central differences.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Callable

import numpy as np
from scipy import integrate
from scipy.interpolate import CubicHermiteSpline
from scipy.stats import qmc

__all__ = [
    "GrowthData",
    "CoefficientField",
    "AuditPlan",
    "AuditReport",
    "StructureError",
    "truncate_Tk",
    "truncate_Thk",
    "phi_p",
    "phi_p_prime",
    "phi_p_exact",
    "psi",
    "psi_prime",
    "psi_exact",
    "psi_sup",
    "phi_metric",
    "phi_norm",
    "p_laplacian",
    "perturbed_p_laplacian",
    "linear_diffusion",
    "table_field",
    "saturating_ratio_field",
    "with_lower_order",
    "audit_structure",
    "scaling_homotopy",
    "truncation_homotopy",
]


class StructureError(ValueError):
    pass


# -- truncations -------------------------------------------------------------


def truncate_Tk(s, k: float):
    """Symmetric truncation at level ``k``."""
    if k <= 0:
        raise ValueError("truncation level must be positive")
    out = np.clip(s, -k, k)
    return float(out) if np.ndim(out) == 0 else out


def truncate_Thk(s, h: float, k: float):
    """Odd dead-zone truncation: 0 on [0, h], s - h on (h, h + k), k beyond."""
    if h < 0 or k < 0:
        raise ValueError("h and k must be nonnegative")
    s = np.asarray(s, dtype=float)
    out = np.sign(s) * np.clip(np.abs(s) - h, 0.0, k)
    return float(out) if out.ndim == 0 else out


# -- phi_p and psi -------------------------------------------------------------


def _log_e_sinh2(y):
    """log(e + sinh(y)^2), stable for large y."""
    y = np.asarray(y, dtype=float)
    small = y < 1.0
    ys = np.where(small, y, 0.0)
    yl = np.where(small, 1.0, y)
    direct = np.log(np.e + np.sinh(ys) ** 2)
    e2 = np.exp(-2.0 * yl)
    asym = 2.0 * yl - np.log(4.0) + np.log1p(4.0 * (np.e - 0.5) * e2 + e2 * e2)
    return np.where(small, direct, asym)


def phi_p_prime(s, p: float):
    """Derivative of the change of variable: ((1+s^2) log(e+s^2)^4)^(-1/(2p))."""
    s = np.asarray(s, dtype=float)
    out = ((1.0 + s * s) * np.log(np.e + s * s) ** 4) ** (-0.5 / p)
    return float(out) if out.ndim == 0 else out


def psi_prime(s):
    """Derivative of psi; equals phi_p_prime(s, p) ** p for every p."""
    s = np.asarray(s, dtype=float)
    out = 1.0 / (np.sqrt(1.0 + s * s) * np.log(np.e + s * s) ** 2)
    return float(out) if out.ndim == 0 else out


def _y_integrand(exponent: float):
    # g(sinh y) cosh y in the variable y = asinh(s), with g = phi_p'
    # (exponent = 1/p) or psi' (exponent = 1)
    def f(y):
        with np.errstate(over="ignore"):
            return np.cosh(y) ** (1.0 - exponent) * _log_e_sinh2(y) ** (-2.0 * exponent)

    return f


def phi_p_exact(s: float, p: float) -> float:
    """phi_p(s) by adaptive Gauss-Kronrod quadrature (no table)."""
    y = float(np.arcsinh(abs(s)))
    val, _ = integrate.quad(_y_integrand(1.0 / p), 0.0, y, epsabs=1e-14, epsrel=1e-13, limit=200)
    return float(np.sign(s) * val)


def psi_exact(s: float) -> float:
    y = float(np.arcsinh(abs(s)))
    val, _ = integrate.quad(_y_integrand(1.0), 0.0, y, epsabs=1e-14, epsrel=1e-13, limit=200)
    return float(np.sign(s) * val)


_S_TABLE = 1e12
_DT = 0.002
_GL_X, _GL_W = np.polynomial.legendre.leggauss(10)


class _OddPrimitive:
    """Hermite table of an odd primitive F(s) = int_0^s g, g even and positive.

    Nodes are uniform in asinh(s); node values come from 10-point
    Gauss-Legendre on every subinterval, node slopes are the exact g.
    """

    def __init__(self, exponent: float):
        self.exponent = exponent
        f = _y_integrand(exponent)
        y = np.arange(0.0, np.arcsinh(_S_TABLE) + _DT, _DT)
        a, b = y[:-1], y[1:]
        mid, half = 0.5 * (a + b), 0.5 * (b - a)
        pieces = (f(mid[:, None] + half[:, None] * _GL_X[None, :]) @ _GL_W) * half
        F = np.concatenate([[0.0], np.cumsum(pieces)])
        s = np.sinh(y)
        g = f(y) / np.cosh(y)
        self.s_max = float(s[-1])
        self.F_max = float(F[-1])
        self._spline = CubicHermiteSpline(s, F, g)

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        a = np.abs(s)
        inside = a <= self.s_max
        out = np.empty_like(a)
        out[inside] = self._spline(a[inside])
        if not np.all(inside):
            f = _y_integrand(self.exponent)
            for i in np.flatnonzero(~inside.ravel()):
                yi = float(np.arcsinh(a.flat[i]))
                tail, _ = integrate.quad(f, float(np.arcsinh(self.s_max)), yi, epsrel=1e-13)
                out.flat[i] = self.F_max + tail
        out = np.sign(s) * out
        return float(out) if out.ndim == 0 else out


_table_lock = threading.Lock()


@lru_cache(maxsize=16)
def _primitive(exponent: float) -> _OddPrimitive:
    return _OddPrimitive(exponent)


def _table(exponent: float) -> _OddPrimitive:
    with _table_lock:
        return _primitive(float(exponent))


def phi_p(s, p: float):
    """Odd increasing diffeomorphism with phi_p(0) = 0 and derivative phi_p_prime."""
    if p <= 1:
        raise ValueError("phi_p needs p > 1")
    return _table(1.0 / p)(s)


def psi(s):
    """Odd increasing bounded function with psi' = phi_p'^p, psi(0) = 0."""
    return _table(1.0)(s)


@lru_cache(maxsize=1)
def psi_sup() -> float:
    """sup |psi| = int_0^inf psi'(s) ds."""
    f = _y_integrand(1.0)
    head, _ = integrate.quad(f, 0.0, 40.0, epsabs=1e-14, epsrel=1e-13, limit=400)
    tail, _ = integrate.quad(f, 40.0, np.inf, epsabs=1e-14, epsrel=1e-12, limit=400)
    return float(head + tail)


def phi_norm(u, p: float) -> float:
    """int |grad phi_p(u)|^p for a P1 function (nodal composition)."""
    from .grid import FeFunction, grad_p_norm

    w = FeFunction(u.mesh, phi_p(u.values, p))
    return grad_p_norm(w, p) ** p


def phi_metric(u, v, p: float) -> float:
    """d(u, v) = ||grad phi_p(u) - grad phi_p(v)||_p with nodal compositions."""
    from .grid import FeFunction, MeshError, grad_p_norm

    if u.mesh is not v.mesh:
        raise MeshError("phi_metric needs both functions on the same mesh")
    return grad_p_norm(FeFunction(u.mesh, phi_p(u.values, p) - phi_p(v.values, p)), p)


# -- coefficient fields --------------------------------------------------------


DataFn = Callable[[np.ndarray], np.ndarray]


def _as_data(v) -> DataFn:
    if callable(v):
        return v
    c = float(v)
    return lambda x: np.full(np.shape(x)[:-1], c)


@dataclass(frozen=True, eq=False)
class GrowthData:
    """Constants of the coercivity and growth bounds.

    ``alpha0``, ``alpha1``, ``alpha2`` are nonnegative floats (constant
    data) or callables of x.  ``q``/``r`` are the gradient and zero-order
    growth exponents of ``b``; ``None`` picks an admissible default.
    """

    p: float
    N: int = 2
    nu: float = 1.0
    beta: float = 1.0
    alpha0: float | DataFn = 0.0
    alpha1: float | DataFn = 0.0
    alpha2: float | DataFn = 0.0
    q: float | None = None
    r: float | None = None

    def __post_init__(self):
        p, N = self.p, self.N
        if not 1.0 < p <= N:
            raise StructureError(f"need 1 < p <= N, got p={p}, N={N}")
        if self.nu <= 0:
            raise StructureError("nu must be positive")
        if self.beta < 0:
            raise StructureError("beta must be nonnegative")
        qmax = N * (p - 1) / (N - 1)
        rmax = np.inf if p == N else N * (p - 1) / (N - p)
        if self.q is None:
            object.__setattr__(self, "q", 0.5 * qmax)
        if self.r is None:
            object.__setattr__(self, "r", p - 1.0)
        if not 0 < self.q < qmax:
            raise StructureError(f"q must lie in (0, {qmax})")
        if not 0 < self.r < rmax:
            raise StructureError(f"r must lie in (0, {rmax})")

    def data(self, name: str) -> DataFn:
        return _as_data(getattr(self, name))

    def norms(self, mesh) -> tuple[float, float, float]:
        """(||alpha0||_1, ||alpha1||_{p'}, ||alpha2||_1) over the mesh domain."""
        from .grid import integrate as quad

        pp = self.p / (self.p - 1)
        n0 = quad(lambda x: np.abs(self.data("alpha0")(x)), mesh)
        n1 = quad(lambda x: np.abs(self.data("alpha1")(x)) ** pp, mesh) ** (1 / pp)
        n2 = quad(lambda x: np.abs(self.data("alpha2")(x)), mesh)
        for v in (n0, n1, n2):
            if not np.isfinite(v) or v < 0:
                raise StructureError("data norms must be finite")
        return n0, n1, n2


def _fd_jacobian(fun, x, xi, h=1e-6):
    d = xi.shape[1]
    J = np.empty(xi.shape + (d,))
    for j in range(d):
        step = h * (1.0 + np.abs(xi[:, j]))
        e = np.zeros_like(xi)
        e[:, j] = step
        J[:, :, j] = (fun(x, xi + e) - fun(x, xi - e)) / (2 * step[:, None])
    return J


def _fd_lower(fun, x, s, xi, h=1e-6):
    hs = h * (1.0 + np.abs(s))
    ds = (fun(x, s + hs, xi) - fun(x, s - hs, xi)) / (2 * hs)
    dxi = np.empty_like(xi)
    for j in range(xi.shape[1]):
        step = h * (1.0 + np.abs(xi[:, j]))
        e = np.zeros_like(xi)
        e[:, j] = step
        dxi[:, j] = (fun(x, s, xi + e) - fun(x, s, xi - e)) / (2 * step)
    return ds, dxi


@dataclass(frozen=True, eq=False)
class CoefficientField:
    growth: GrowthData
    a: Callable
    b: Callable | None = None
    da: Callable | None = None
    db: Callable | None = None
    asymptotic: "CoefficientField | None" = None
    odd_asymptotics: bool = False
    eps: float = 0.0
    name: str = "custom"
    # analytic derivatives are trusted only for built-in fields
    analytic: bool = False

    @property
    def p(self) -> float:
        return self.growth.p

    @property
    def has_lower_order(self) -> bool:
        return self.b is not None

    def flux(self, x, xi):
        return self.a(x, xi)

    def flux_jacobian(self, x, xi):
        if self.da is not None:
            return self.da(x, xi)
        return _fd_jacobian(self.a, x, xi)

    def lower(self, x, s, xi):
        if self.b is None:
            return np.zeros(np.shape(s))
        return self.b(x, s, xi)

    def lower_derivatives(self, x, s, xi):
        if self.b is None:
            return np.zeros(np.shape(s)), np.zeros(np.shape(xi))
        if self.db is not None:
            return self.db(x, s, xi)
        return _fd_lower(self.b, x, s, xi)

    def secant(self, x, xi):
        """Scalar frozen coefficient A with a(x, xi) ~ A xi (Kacanov)."""
        n2 = np.sum(xi * xi, axis=1)
        ax = np.sum(self.a(x, xi) * xi, axis=1)
        ref = np.einsum("mii->m", self.flux_jacobian(x, xi)) / xi.shape[1]
        return np.where(n2 > 1e-24, ax / np.maximum(n2, 1e-300), ref)


def _reg_norm(v, eps):
    return np.sqrt(eps * eps + np.sum(v * v, axis=-1))


def _plap_parts(p: float, eps: float, scale: float = 1.0):
    def a(x, xi):
        n = _reg_norm(xi, eps)
        with np.errstate(divide="ignore", invalid="ignore"):
            w = np.where(n > 0, n ** (p - 2), 0.0 if p > 2 else (1.0 if p == 2 else 0.0))
        return scale * w[:, None] * xi

    def da(x, xi):
        n = _reg_norm(xi, eps)
        d = xi.shape[1]
        eye = np.eye(d)[None]
        with np.errstate(divide="ignore", invalid="ignore"):
            w = np.where(n > 0, n ** (p - 2), 1.0 if p == 2 else (0.0 if p > 2 else np.inf))
            outer = np.where(n[:, None, None] > 0, xi[:, :, None] * xi[:, None, :] / (n * n)[:, None, None], 0.0)
        return scale * w[:, None, None] * (eye + (p - 2) * outer)

    return a, da


def _power_lower(p: float, lam: float, eps: float):
    """b(x, s, xi) = -lam |s|_eps^{p-2} s."""

    def b(x, s, xi):
        n = np.sqrt(eps * eps + s * s)
        with np.errstate(divide="ignore", invalid="ignore"):
            w = np.where(n > 0, n ** (p - 2), 1.0 if p == 2 else 0.0)
        return -lam * w * s

    def db(x, s, xi):
        n = np.sqrt(eps * eps + s * s)
        with np.errstate(divide="ignore", invalid="ignore"):
            w = np.where(n > 0, n ** (p - 2), 1.0 if p == 2 else np.inf)
            ratio = np.where(n > 0, s * s / (n * n), 0.0)
        return -lam * w * (1.0 + (p - 2) * ratio), np.zeros_like(xi)

    return b, db


@lru_cache(maxsize=64)
def _coercivity_defect(p: float) -> float:
    """sup_t t^p - t^2 (1 + t^2)^{(p-2)/2}; zero for p >= 2."""
    if p >= 2:
        return 0.0
    t = np.logspace(-4, 5, 200001)
    g = t**p - t * t * (1 + t * t) ** ((p - 2) / 2)
    return float(g.max()) * 1.01


def _plap_growth(p: float, eps: float, N: int, nu: float = 1.0, scale: float = 1.0, extra_beta: float = 0.0):
    alpha0 = scale * _coercivity_defect(p) * eps**p
    if p > 2:
        beta = scale * 2 ** ((p - 2) / 2)
        alpha1 = beta * eps ** (p - 1)
    else:
        beta, alpha1 = scale, 0.0
    return dict(p=p, N=N, nu=nu * scale, beta=beta + extra_beta, alpha0=alpha0, alpha1=alpha1)


def p_laplacian(p: float, eps: float = 1e-8, N: int = 2, lam: float = 0.0, scale: float = 1.0) -> CoefficientField:
    """a = scale |xi|_eps^{p-2} xi and, when lam != 0, b = -lam |s|_eps^{p-2} s.

    The asymptotic pair is the same field (homogeneous up to the
    regularisation); both parts are odd.
    """
    a, da = _plap_parts(p, eps, scale)
    b = db = None
    gkw = _plap_growth(p, eps, N, scale=scale, extra_beta=abs(lam))
    if lam != 0.0:
        b, db = _power_lower(p, lam, eps)
        if p < 2:
            gkw["alpha2"] = abs(lam) * eps ** (p - 1)
    growth = GrowthData(**gkw)
    asym = CoefficientField(growth, a, b, da, db, eps=eps, name="p_laplacian_limit", analytic=True)
    return CoefficientField(
        growth, a, b, da, db, asymptotic=asym, odd_asymptotics=True, eps=eps, name="p_laplacian", analytic=True
    )


def linear_diffusion(kappa: float = 1.0, lam: float = 0.0, N: int = 2) -> CoefficientField:
    """a = kappa xi, b = -lam s (p = 2)."""
    f = p_laplacian(2.0, eps=0.0, N=N, lam=lam, scale=kappa)
    asym = replace(f.asymptotic, name="linear_diffusion_limit")
    return replace(f, name="linear_diffusion", asymptotic=asym)


def perturbed_p_laplacian(p: float, c: float = 1.0, eps: float = 1e-8, N: int = 2, lam: float = 0.0) -> CoefficientField:
    """a = |xi|_eps^{p-2} xi + c xi / (1 + |xi|^2); asymptotics: the p-Laplacian."""
    base = p_laplacian(p, eps=eps, N=N, lam=lam)
    a0, da0 = base.a, base.da

    def a(x, xi):
        n2 = np.sum(xi * xi, axis=1)
        return a0(x, xi) + c * xi / (1 + n2)[:, None]

    def da(x, xi):
        n2 = np.sum(xi * xi, axis=1)
        d = xi.shape[1]
        pert = np.eye(d)[None] / (1 + n2)[:, None, None] - 2 * xi[:, :, None] * xi[:, None, :] / ((1 + n2) ** 2)[:, None, None]
        return da0(x, xi) + c * pert

    g = base.growth
    # |c xi/(1+|xi|^2)| <= c/2 goes into alpha1; its dot with xi is >= 0
    growth = replace(g, alpha1=(g.alpha1 if not callable(g.alpha1) else 0.0) + 0.5 * abs(c))
    return replace(base, growth=growth, a=a, da=da, name="perturbed_p_laplacian")


def table_field(p: float, knots, values, N: int = 2, nu: float = 1.0, beta: float = 1.0, alpha0=0.0, alpha1=0.0):
    """Isotropic field a = g(|xi|) xi / |xi| with g piecewise linear in the table.

    Beyond the last knot ``g`` grows like ``|xi|^{p-1}`` from the last value.
    Derivatives are taken by finite differences.
    """
    knots = np.asarray(knots, float)
    values = np.asarray(values, float)
    if knots[0] != 0.0 or values[0] != 0.0:
        raise StructureError("table must start at (0, 0)")
    if np.any(np.diff(knots) <= 0) or np.any(np.diff(values) <= 0):
        raise StructureError("table must be strictly increasing")
    kl, vl = knots[-1], values[-1]

    def g(t):
        inside = np.interp(t, knots, values)
        return np.where(t <= kl, inside, vl * (np.maximum(t, kl) / kl) ** (p - 1))

    def a(x, xi):
        n = np.linalg.norm(xi, axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            w = np.where(n > 0, g(n) / n, values[1] / knots[1])
        return w[:, None] * xi

    growth = GrowthData(p=p, N=N, nu=nu, beta=beta, alpha0=alpha0, alpha1=alpha1)
    return CoefficientField(growth, a, name="custom_table")


def saturating_ratio_field(c: float = 1.0, N: int = 2) -> CoefficientField:
    """a = xi / (1 + |xi|): bounded flux, not coercive of order 2."""

    def a(x, xi):
        return xi / (1 + np.linalg.norm(xi, axis=1))[:, None]

    return CoefficientField(GrowthData(p=2.0, N=N), a, name="saturating_ratio")


def absorption_lower(kappa: float = 1.0):
    """b = kappa s^3 / (1 + s^2): monotone, linear growth, limit kappa s."""

    def b(x, s, xi):
        return kappa * s**3 / (1 + s * s)

    def db(x, s, xi):
        s2 = s * s
        return kappa * (s2 * s2 + 3 * s2) / (1 + s2) ** 2, np.zeros_like(xi)

    def b_inf(x, s, xi):
        return kappa * s

    def db_inf(x, s, xi):
        return np.full_like(s, kappa), np.zeros_like(xi)

    return (b, db), (b_inf, db_inf)


def with_lower_order(field: CoefficientField, b, db=None, b_inf=None, db_inf=None, beta=None, name=None):
    """Attach a lower-order term (and its asymptotic limit) to a field."""
    growth = field.growth if beta is None else replace(field.growth, beta=max(field.growth.beta, beta))
    asym = None
    if field.asymptotic is not None and b_inf is not None:
        asym = replace(field.asymptotic, growth=growth, b=b_inf, db=db_inf)
    return replace(field, growth=growth, b=b, db=db, asymptotic=asym, name=name or field.name)


# -- audit ---------------------------------------------------------------------


@dataclass(frozen=True)
class AuditPlan:
    n_samples: int = 512
    x_low: tuple = (0.0, 0.0)
    x_high: tuple = (1.0, 1.0)
    s_max: float = 10.0
    xi_max: float = 10.0
    taus: tuple = (10.0, 100.0, 1000.0)
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("audit plan needs at least one sample")


@dataclass
class AuditReport:
    n_samples: int
    margins: dict = field(default_factory=dict)
    violations: list = field(default_factory=list)
    limit_residuals: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.violations

    def summary(self) -> str:
        lines = [f"samples: {self.n_samples}", f"violations: {len(self.violations)}"]
        lines += [f"  worst {k}: {v:.6g}" for k, v in self.margins.items()]
        lines += [f"  limit residual tau={t:g}: {r:.3e}" for t, r in self.limit_residuals.items()]
        return "\n".join(lines)


def _samples(plan: AuditPlan, d: int):
    n_dim = d + 1 + 2 * d
    lhs = qmc.LatinHypercube(d=n_dim, seed=plan.seed).random(plan.n_samples)
    xl = np.resize(np.asarray(plan.x_low, float), d)
    xh = np.resize(np.asarray(plan.x_high, float), d)
    x = xl + (xh - xl) * lhs[:, :d]
    s = plan.s_max * (2 * lhs[:, d] - 1)
    # log-uniform magnitudes so that both small and large gradients are probed
    def vec(cols):
        z = 2 * cols - 1
        mag = (1.0 + plan.xi_max) ** np.abs(z).max(axis=1, keepdims=True) - 1.0
        return np.sign(z) * np.abs(z) / np.maximum(np.abs(z).max(axis=1, keepdims=True), 1e-300) * mag

    xi = vec(lhs[:, d + 1 : 2 * d + 1])
    eta = vec(lhs[:, 2 * d + 1 :])
    return x, s, xi, eta


def audit_structure(fld: CoefficientField, plan: AuditPlan | None = None, dim: int = 2) -> AuditReport:
    """Sample the coercivity, growth, monotonicity and limit conditions.

    Violations are recorded in the report (with their sample point); the
    audit itself never raises for a failing field.
    """
    plan = plan or AuditPlan()
    g = fld.growth
    p = g.p
    x, s, xi, eta = _samples(plan, dim)
    # make sure xi = 0 is probed
    xi[0] = 0.0
    rep = AuditReport(plan.n_samples)
    a0, a1, a2 = g.data("alpha0")(x), g.data("alpha1")(x), g.data("alpha2")(x)
    nxi = np.linalg.norm(xi, axis=1)
    tol = 1e-12

    def record(name, margin, scale):
        rel = margin / np.maximum(scale, 1.0)
        i = int(np.argmin(rel))
        rep.margins[name] = float(margin[i])
        bad = np.flatnonzero(rel < -tol)
        for j in bad[:5]:
            rep.violations.append((name, float(margin[j]), {"x": x[j].tolist(), "s": float(s[j]), "xi": xi[j].tolist()}))

    A = fld.a(x, xi)
    lhs = np.sum(A * xi, axis=1)
    record("coercivity", lhs - g.nu * nxi**p + a0, np.abs(lhs))
    bound = a1 + g.beta * nxi ** (p - 1)
    record("flux_growth", bound - np.linalg.norm(A, axis=1), bound)
    if fld.b is not None:
        B = fld.b(x, s, xi)
        bb = a2 + g.beta * np.abs(s) ** (p - 1) + g.beta * nxi ** (p - 1)
        record("lower_growth", bb - np.abs(B), bb)
    diff = xi - eta
    mono = np.sum((A - fld.a(x, eta)) * diff, axis=1)
    nd = np.linalg.norm(diff, axis=1)
    distinct = nd > 1e-14
    # strict positivity, with relative slack for floating-point noise
    scale = np.linalg.norm(A, axis=1) * nd + 1e-300
    m = np.where(distinct, mono, np.inf)
    i = int(np.argmin(np.where(distinct, mono / scale, np.inf)))
    rep.margins["monotonicity"] = float(m[i])
    for j in np.flatnonzero(distinct & (mono <= -1e-12 * scale)):
        rep.violations.append(("monotonicity", float(mono[j]), {"xi": xi[j].tolist(), "eta": eta[j].tolist()}))
    if fld.asymptotic is not None:
        ai = fld.asymptotic
        Ainf = ai.a(x, xi)
        Binf = ai.lower(x, s, xi)
        pert = 0.5 * (eta / np.maximum(np.linalg.norm(eta, axis=1), 1e-300)[:, None])
        for t in plan.taus:
            xk = xi + pert / t
            sk = s + 0.5 / t
            ra = np.abs(fld.a(x, t * xk) / t ** (p - 1) - Ainf).max()
            rb = np.abs(fld.lower(x, t * sk, t * xk) / t ** (p - 1) - Binf).max()
            rep.limit_residuals[t] = float(max(ra, rb))
        for t in (0.5, 2.0, 7.0):
            hom = np.abs(ai.a(x, t * xi) - t ** (p - 1) * Ainf).max() / max(1.0, np.abs(Ainf).max() * t ** (p - 1))
            homb = np.abs(ai.lower(x, t * s, t * xi) - t ** (p - 1) * Binf).max() / max(1.0, np.abs(Binf).max() * t ** (p - 1))
            rep.margins[f"homogeneity_defect_{t:g}"] = float(max(hom, homb))
        if fld.odd_asymptotics:
            odd = np.abs(ai.a(x, -xi) + Ainf).max()
            oddb = np.abs(ai.lower(x, -s, -xi) + Binf).max()
            rep.margins["odd_defect"] = float(max(odd, oddb))
            if max(odd, oddb) > 1e-10 * max(1.0, np.abs(Ainf).max()):
                rep.violations.append(("oddness", float(max(odd, oddb)), {}))
        coer = np.sum(Ainf * xi, axis=1) - g.nu * nxi**p
        # the regularised limit may miss homogeneity by O(eps^p)
        rep.margins["limit_coercivity"] = float(coer.min())
        if coer.min() < -max(1e-10, 10 * fld.eps ** min(p, 2.0)) * max(1.0, nxi.max() ** p):
            rep.violations.append(("limit_coercivity", float(coer.min()), {}))
    return rep


# -- homotopies ------------------------------------------------------------------


def scaling_homotopy(fld: CoefficientField, t: float) -> CoefficientField:
    """a_t(x, xi) = t a(x, t^{-1/(p-1)} xi), same for b; the limit pair at t = 0."""
    if fld.asymptotic is None:
        raise StructureError("scaling homotopy needs an asymptotic pair")
    if not 0.0 <= t <= 1.0:
        raise ValueError("t must lie in [0, 1]")
    if t == 0.0:
        return replace(fld.asymptotic, asymptotic=fld.asymptotic, growth=fld.growth, name=f"{fld.name}@t=0")
    if t == 1.0:
        return fld
    p = fld.p
    c = t ** (-1.0 / (p - 1.0))
    a0, b0 = fld.a, fld.b

    def a(x, xi):
        return t * a0(x, c * xi)

    def da(x, xi):
        return t * c * fld.flux_jacobian(x, c * xi)

    b = db = None
    if b0 is not None:

        def b(x, s, xi):
            return t * b0(x, c * s, c * xi)

        def db(x, s, xi):
            ds, dxi = fld.lower_derivatives(x, c * s, c * xi)
            return t * c * ds, t * c * dxi

    return replace(fld, a=a, da=da, b=b, db=db, name=f"{fld.name}@t={t:g}")


def truncation_homotopy(fld: CoefficientField, tau: float) -> CoefficientField:
    """Replace b by T_{1/tau}(b); a is unchanged."""
    if not 0.0 < tau <= 1.0:
        raise ValueError("tau must lie in (0, 1]")
    if fld.b is None:
        return fld
    level = 1.0 / tau
    b0 = fld.b

    def b(x, s, xi):
        return np.clip(b0(x, s, xi), -level, level)

    def db(x, s, xi):
        active = np.abs(b0(x, s, xi)) < level
        ds, dxi = fld.lower_derivatives(x, s, xi)
        return np.where(active, ds, 0.0), np.where(active[:, None], dxi, 0.0)

    return replace(fld, b=b, db=db, name=f"{fld.name}|T_{level:g}")
