"""Executable checks on computed solutions.

Each check returns a CheckReport whose ``passed`` flag is decided by
comparing the worst margin with an explicit tolerance.  Tolerances default
to ``C h`` (see :func:`qlfem.solve.tol_h`).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import integrate as sint

from .grid import FeFunction, Mesh, grad_p_norm, lp_norm_at_quadrature
from .measures import Density, MeasureData, WeakForm, discretize_load, total_variation
from .solve import (
    EntropySolution,
    Schedule,
    SolverOptions,
    _pairing_terms,
    energy_identity_residual,
    entropy_defect,
    estimate_rhs,
    solve_entropy,
    tol_h,
)
from .structural import CoefficientField, phi_metric, truncate_Tk

__all__ = [
    "CheckReport",
    "default_dictionary",
    "check_entropy_inequality",
    "check_estimate",
    "check_comparison",
    "check_weak_identity_bounded_tests",
    "check_energy_identity",
    "regularity_sweep",
    "convergence_study",
    "data_distance",
    "RegularityRow",
    "StudyRow",
    "study_passes",
]


@dataclass
class CheckReport:
    name: str
    worst_margin: float
    witness: dict
    passed: bool
    tolerance: float
    skipped: bool = False
    note: str = ""

    def line(self) -> str:
        state = "SKIP" if self.skipped else ("PASS" if self.passed else "FAIL")
        wit = ", ".join(f"{k}={v}" for k, v in self.witness.items())
        note = f"  # {self.note}" if self.note else ""
        return f"{state} {self.name}: margin={self.worst_margin:.6e} tol={self.tolerance:.3e} [{wit}]{note}"


def _u_of(sol) -> FeFunction:
    return sol.u if isinstance(sol, EntropySolution) else sol


# -- test dictionary ---------------------------------------------------------------


def default_dictionary(mesh: Mesh, amplitude: float = 1.0, n_random: int = 16, seed: int = 0, n_scales: int = 5):
    """Interior bumps at ``n_scales`` widths plus seeded random P1 fields.

    Every entry vanishes on the Dirichlet nodes and satisfies |v| <= 8.
    Returns a list of (label, nodal values).
    """
    x = mesh.nodes
    lo, hi = x.min(axis=0), x.max(axis=0)
    out = []
    rng = np.random.default_rng(seed)
    amp = float(np.clip(amplitude, 1e-3, 8.0))
    for j in range(n_scales):
        width = 0.5 ** j
        if mesh.is_radial:
            centers = [np.array([0.0]), np.array([0.5 * hi[0]])]
        else:
            mid = 0.5 * (lo + hi)
            centers = [mid, lo + 0.3 * (hi - lo)]
        for c_idx, c in enumerate(centers):
            r = np.linalg.norm((x - c) / (hi - lo), axis=1) / width
            bump = np.where(r < 1, np.cos(0.5 * np.pi * np.minimum(r, 1)) ** 2, 0.0)
            sign = 1.0 if (j + c_idx) % 2 == 0 else -0.5
            v = np.clip(sign * amp * bump, -8, 8)
            v[mesh.boundary_nodes] = 0.0
            out.append((f"bump(scale={width:g},c={c_idx})", v))
    for i in range(n_random):
        v = np.clip(amp * rng.standard_normal(mesh.n_nodes), -8, 8)
        v[mesh.boundary_nodes] = 0.0
        out.append((f"random({i})", v))
    return out


# -- checks ----------------------------------------------------------------------


def check_entropy_inequality(
    sol,
    fld: CoefficientField,
    mu: MeasureData,
    dictionary=None,
    k_grid: Sequence[float] = (0.5, 1.0, 2.0, 4.0),
    tol: float | None = None,
) -> CheckReport:
    """Worst value of int a.grad T_k(u-v) + int b T_k(u-v) - <mu, T_k(u-v)> (should be <= 0).

    The check covers only the finite dictionary of bounded tests supplied.
    """
    u = _u_of(sol)
    mesh = u.mesh
    if dictionary is None:
        dictionary = default_dictionary(mesh, amplitude=max(np.max(np.abs(u.values)), 1e-3))
    tol = tol_h(mesh) if tol is None else tol
    load = discretize_load(mu, mesh)
    worst, witness = -np.inf, {}
    for label, v in dictionary:
        for k in k_grid:
            d = entropy_defect(fld, load, u, np.asarray(v), k)
            if d > worst:
                worst, witness = d, {"v": label, "k": k}
    return CheckReport("entropy_inequality", float(worst), witness, bool(worst <= tol), tol,
                       note="finite dictionary of bounded tests")


def check_estimate(sol: EntropySolution, fld: CoefficientField, mu: MeasureData, C: float = 1.0) -> CheckReport:
    """slack = psi_sup |mu| + ||alpha0||_1 - nu phi_norm, pass iff slack >= -C h."""
    u = _u_of(sol)
    mesh = u.mesh
    tol = tol_h(mesh, C)
    rhs = estimate_rhs(fld, mu, mesh)
    if rhs is None:
        return CheckReport("estimate", float("nan"), {}, True, tol, skipped=True,
                           note="total variation of a weak-form measure is not available")
    from .structural import phi_norm

    slack = rhs - fld.growth.nu * phi_norm(u, fld.p)
    return CheckReport("estimate", float(slack), {"rhs": float(rhs)}, bool(slack >= -tol), tol)


def check_comparison(
    fld: CoefficientField,
    mu1: MeasureData,
    mu2: MeasureData,
    mesh: Mesh,
    tol: float = 1e-10,
    schedule: Schedule | None = None,
    opts: SolverOptions | None = None,
) -> CheckReport:
    """Solve for mu1 <= mu2 and report max(0, max_i (u1 - u2)_i)."""
    L1, L2 = discretize_load(mu1, mesh), discretize_load(mu2, mesh)
    I = mesh.interior_nodes
    gap = L1[I] - L2[I]
    if np.max(gap, initial=-np.inf) > 1e-14 * max(1.0, np.max(np.abs(L2))):
        node = int(I[np.argmax(gap)])
        return CheckReport("comparison", float(np.max(gap)), {"node": node}, True, tol, skipped=True,
                           note="not applicable: mu1 <= mu2 fails on a nodal basis function")
    u1 = solve_entropy(fld, mu1, mesh, schedule, opts).u
    u2 = solve_entropy(fld, mu2, mesh, schedule, opts).u
    diff = u1.values[I] - u2.values[I]
    i = int(I[np.argmax(diff)])
    worst = max(0.0, float(np.max(diff)))
    return CheckReport("comparison", worst, {"node": i, "x": mesh.nodes[i].tolist()}, bool(worst <= tol), tol)


def check_weak_identity_bounded_tests(sol, fld: CoefficientField, mu: MeasureData, tests=None, tol=None) -> CheckReport:
    """|int a.grad v + int b v - <mu, v>| over bounded P1 tests (equality form)."""
    u = _u_of(sol)
    mesh = u.mesh
    tol = tol_h(mesh) if tol is None else tol
    if tests is None:
        tests = default_dictionary(mesh)
    load = discretize_load(mu, mesh)
    worst, witness = 0.0, {}
    for label, v in tests:
        v = np.asarray(v, float)
        ta, tb = _pairing_terms(fld, mesh, u.values, v)
        r = abs(ta + tb - float(load @ v))
        if r >= worst:
            worst, witness = r, {"v": label}
    return CheckReport("weak_identity_bounded_tests", float(worst), witness, bool(worst <= tol), tol,
                       note="bounded tests only")


def check_energy_identity(sol, fld: CoefficientField, mu: MeasureData, tol: float | None = None) -> CheckReport:
    u = _u_of(sol)
    tol = tol_h(u.mesh) if tol is None else tol
    r = energy_identity_residual(u, fld, mu, relative=True)
    return CheckReport("energy_identity", float(r), {}, bool(r <= tol), tol, note="relative residual")


# -- sweeps ----------------------------------------------------------------------


@dataclass(frozen=True)
class RegularityRow:
    n_cells: int
    h: float
    grad_norm: float
    u_norm: float
    grad_p_norm: float


def regularity_sweep(
    fld: CoefficientField,
    mu: Density,
    meshes: Sequence[Mesh],
    m: float | None = None,
    q: float | None = None,
    schedule: Schedule | None = None,
    opts: SolverOptions | None = None,
):
    """Tagged norms of |grad u_h|^{p-1} and |u_h|^{p-1} along a mesh sequence.

    With ``m`` (default: the density's L^m tag) the exponents are m* = Nm/(N-m)
    for the gradient and Nm/(N-pm) for u, valid for 1 < m < (p*)'.  An explicit
    ``q`` < N/(N-1) instead measures |grad u_h|^{p-1} in L^q (and |u_h|^{p-1} in
    L^{q N/(N-1)}, the matching Sobolev exponent).
    """
    p = fld.p
    N = fld.growth.N
    if q is not None:
        if not 0 < q < N / (N - 1):
            raise ValueError(f"q must lie in (0, {N / (N - 1):g})")
        qg, qu = q, q * N / (N - 1) if q < N else np.inf
    else:
        m = mu.lm_tag if m is None else m
        if m is None:
            raise ValueError("no integrability exponent: pass m or q")
        pstar = np.inf if p >= N else N * p / (N - p)
        pstar_conj = 1.0 if np.isinf(pstar) else pstar / (pstar - 1)
        if not 1 < m < pstar_conj:
            raise ValueError(f"m={m:g} outside the window (1, {pstar_conj:g})")
        qg, qu = N * m / (N - m), N * m / (N - p * m)
    rows = []
    for mesh in meshes:
        u = solve_entropy(fld, mu, mesh, schedule, opts).u
        g = np.linalg.norm(u.gradients(), axis=1)
        gn = float(np.dot(mesh.cell_volumes, g ** ((p - 1) * qg)) ** (1 / qg))
        un = lp_norm_at_quadrature(mesh, np.abs(mesh.at_quadrature(u.values)) ** (p - 1), qu)
        rows.append(RegularityRow(mesh.n_cells, mesh.h, gn, un, grad_p_norm(u, p)))
    return rows


@dataclass(frozen=True)
class StudyRow:
    index: int
    data_distance: float
    phi_distance: float
    truncation_distances: tuple


def data_distance(mu_n: MeasureData, mu: MeasureData, mesh: Mesh) -> float:
    """||f_n - f||_1 for densities (continuum quadrature on radial meshes)."""
    if not (isinstance(mu_n, Density) and isinstance(mu, Density)):
        raise ValueError("data distance is implemented for densities")
    if mesh.is_radial:
        from .grid import sphere_area

        N = mesh.ambient_dim
        R = float(mesh.nodes[:, 0].max())

        def g(r):
            x = np.array([[r]])
            return abs(float(mu_n.f(x)[0]) - float(mu.f(x)[0])) * sphere_area(N) * r ** (N - 1)

        val, _ = sint.quad(g, 0.0, R, limit=400, points=np.geomspace(1e-8, R, 40)[:-1])
        return float(val)
    from .grid import integrate, refine

    fine = refine(refine(mesh))
    return integrate(lambda x: np.abs(mu_n.f(x) - mu.f(x)), fine)


def convergence_study(
    fld: CoefficientField,
    mu_sequence: Sequence[MeasureData],
    mu: MeasureData,
    mesh: Mesh,
    ks: Sequence[float] = (1.0, 2.0),
    schedule: Schedule | None = None,
    opts: SolverOptions | None = None,
    data_distances: Sequence[float] | None = None,
):
    """Phi-distances d(u_n, u) and ||grad T_k(u_n) - grad T_k(u)||_p along a data sequence."""
    p = fld.p
    u = solve_entropy(fld, mu, mesh, schedule, opts).u
    rows = []
    for i, mu_n in enumerate(mu_sequence):
        un = solve_entropy(fld, mu_n, mesh, schedule, opts, u0=u).u
        dd = data_distances[i] if data_distances is not None else data_distance(mu_n, mu, mesh)
        tk = tuple(
            grad_p_norm(FeFunction(mesh, truncate_Tk(un.values, k) - truncate_Tk(u.values, k)), p) for k in ks
        )
        rows.append(StudyRow(i, float(dd), phi_metric(un, u, p), tk))
    return rows


def study_passes(rows, tol: float = 1e-2, data_tol: float = 1e-3, allowed_bumps: int = 1) -> bool:
    """Decreasing distances (up to ``allowed_bumps`` increases) reaching tol once data distance <= data_tol."""
    d = [r.phi_distance for r in rows]
    bumps = sum(1 for a, b in zip(d, d[1:]) if b > a * (1 + 1e-12) + 1e-15)
    small = [r.phi_distance for r in rows if r.data_distance <= data_tol]
    return bumps <= allowed_bumps and (not small or max(small) <= tol)
