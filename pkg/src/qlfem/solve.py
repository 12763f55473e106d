"""Nonlinear P1 solver and the truncation/mollification approximation driver.

The discrete problem is: find u_h vanishing on the Dirichlet nodes with

    R_i(u) = int a(x, grad u) . grad phi_i + int b(x, u, grad u) phi_i - <mu, phi_i> = 0

for every interior basis function phi_i.  The flux term is evaluated at cell
centroids (gradients are cellwise constant); the lower-order term and the
data use the mesh quadrature.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .grid import FeFunction, Mesh, assemble_matrix, assemble_vector
from .measures import MeasureData, Variation, discretize_load, mollify, total_variation
from .structural import (
    CoefficientField,
    phi_metric,
    phi_norm,
    psi,
    psi_prime,
    psi_sup,
    truncate_Tk,
    truncation_homotopy,
)

__all__ = [
    "SolverOptions",
    "Schedule",
    "SolveInfo",
    "EntropySolution",
    "NonConvergence",
    "SingularJacobian",
    "ScheduleExhausted",
    "EvaluationError",
    "assemble_residual",
    "assemble_jacobian",
    "solve_truncated",
    "solve_discrete",
    "solve_entropy",
    "energy_identity_residual",
    "estimate_rhs",
    "tol_h",
]


class EvaluationError(FloatingPointError):
    """A coefficient returned a non-finite value."""


class NonConvergence(RuntimeError):
    def __init__(self, msg, best=None, residual=np.inf, history=(), last=None):
        super().__init__(msg)
        self.best = best
        self.last = last
        self.residual = residual
        self.history = list(history)


class SingularJacobian(RuntimeError):
    def __init__(self, msg, damping_history=()):
        super().__init__(msg)
        self.damping_history = list(damping_history)


class ScheduleExhausted(RuntimeError):
    def __init__(self, msg, trace=()):
        super().__init__(msg)
        self.trace = list(trace)


@dataclass(frozen=True)
class SolverOptions:
    """Newton/Kacanov settings; ``newton_tol`` bounds the interior residual sup norm."""

    newton_tol: float = 1e-10
    max_iter: int = 100
    armijo_c: float = 1e-4
    min_damping: float = 2.0**-20
    kacanov_iters: int = 5
    polish_steps: int = 3
    linear_tol: float = 1e-12

    def __post_init__(self):
        if self.newton_tol <= 0 or self.linear_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if not 0 < self.armijo_c < 1 or not 0 < self.min_damping <= 1:
            raise ValueError("invalid damping parameters")


@dataclass(frozen=True)
class Schedule:
    """tau_n = 2^-n and mollification level 2^n for n = 0..n_max."""

    n_max: int = 12
    tol: float = 1e-4

    def __post_init__(self):
        if self.n_max < 1 or self.tol <= 0:
            raise ValueError("schedule needs n_max >= 1 and tol > 0")

    def levels(self):
        for n in range(self.n_max + 1):
            yield n, 2.0**-n, 2.0**n


@dataclass
class SolveInfo:
    iterations: int = 0
    residual: float = np.inf
    damping: list = field(default_factory=list)
    kacanov_steps: int = 0


# -- assembly --------------------------------------------------------------------


def _check_finite(name, vals, x, *args):
    bad = ~np.isfinite(vals)
    if np.any(bad):
        idx = np.argwhere(bad)[0][0]
        detail = ", ".join(f"{np.asarray(a)[idx]!r}" for a in args)
        raise EvaluationError(f"{name} not finite at row {idx} (x={np.asarray(x)[idx]!r}, args: {detail})")


def _full(mesh: Mesh, u) -> np.ndarray:
    if isinstance(u, FeFunction):
        return u.values
    v = np.asarray(u, float)
    if v.shape == (mesh.n_nodes,):
        return v
    if v.shape == (mesh.interior_nodes.size,):
        out = np.zeros(mesh.n_nodes)
        out[mesh.interior_nodes] = v
        return out
    raise ValueError(f"unexpected vector shape {v.shape}")


def _lower_args(mesh: Mesh, u: np.ndarray, grads: np.ndarray):
    pts, w, phi = mesh.quadrature
    m, q, d = pts.shape
    x = pts.reshape(m * q, d)
    s = (u[mesh.cells] @ phi.T).reshape(m * q)
    xi = np.repeat(grads, q, axis=0)
    return x, s, xi, w, phi


def _full_residual(
    fld: CoefficientField, mesh: Mesh, u: np.ndarray, load: np.ndarray, with_flux: bool = True
) -> np.ndarray:
    grads = mesh.cell_gradients(u)
    loc = np.zeros(mesh.cells.shape)
    if with_flux:
        flux = np.asarray(fld.flux(mesh.centroids, grads), float)
        _check_finite("flux a(x, xi)", flux.sum(axis=1), mesh.centroids, grads)
        loc += np.einsum("m,md,mkd->mk", mesh.cell_volumes, flux, mesh.basis_grads)
    if fld.has_lower_order:
        x, s, xi, w, phi = _lower_args(mesh, u, grads)
        bq = np.asarray(fld.lower(x, s, xi), float)
        _check_finite("lower-order term b(x, s, xi)", bq, x, s, xi)
        loc += np.einsum("mq,mq,qk->mk", w, bq.reshape(w.shape), phi)
    return assemble_vector(mesh, loc) - load


def assemble_residual(fld: CoefficientField, mu, u, mesh: Mesh | None = None, load=None) -> np.ndarray:
    """Residual on the interior nodes (``load`` may replace ``mu``)."""
    mesh = mesh or u.mesh
    if load is None:
        load = discretize_load(mu, mesh)
    return _full_residual(fld, mesh, _full(mesh, u), load)[mesh.interior_nodes]


def _full_jacobian(fld: CoefficientField, mesh: Mesh, u: np.ndarray) -> sp.csr_matrix:
    grads = mesh.cell_gradients(u)
    G = mesh.basis_grads
    Da = np.asarray(fld.flux_jacobian(mesh.centroids, grads), float)
    loc = np.einsum("m,mid,mde,mje->mij", mesh.cell_volumes, G, Da, G)
    if fld.has_lower_order:
        x, s, xi, w, phi = _lower_args(mesh, u, grads)
        ds, dxi = fld.lower_derivatives(x, s, xi)
        m, q = w.shape
        ds = np.asarray(ds, float).reshape(m, q)
        dxi = np.asarray(dxi, float).reshape(m, q, -1)
        loc = loc + np.einsum("mq,qi,mq,qj->mij", w, phi, ds, phi)
        loc = loc + np.einsum("mq,qi,mqd,mjd->mij", w, phi, dxi, G)
    J = assemble_matrix(mesh, loc)
    if not np.all(np.isfinite(J.data)):
        raise EvaluationError("non-finite Jacobian entry")
    return J


def assemble_jacobian(fld: CoefficientField, u, mesh: Mesh | None = None) -> sp.csr_matrix:
    """Interior-interior block of dR/du."""
    mesh = mesh or u.mesh
    I = mesh.interior_nodes
    return _full_jacobian(fld, mesh, _full(mesh, u))[I][:, I].tocsc()


def _kacanov_matrix(fld: CoefficientField, mesh: Mesh, u: np.ndarray) -> sp.csr_matrix:
    grads = mesh.cell_gradients(u)
    A = fld.secant(mesh.centroids, grads)
    G = mesh.basis_grads
    loc = np.einsum("m,m,mid,mjd->mij", mesh.cell_volumes, A, G, G)
    return assemble_matrix(mesh, loc)


# -- Newton ----------------------------------------------------------------------


def _linsolve(J, rhs):
    try:
        lu = spla.splu(J)
    except RuntimeError as exc:
        raise SingularJacobian(str(exc)) from exc
    x = lu.solve(rhs)
    if not np.all(np.isfinite(x)):
        raise SingularJacobian("linear solve produced non-finite values")
    return x


STALL_WINDOW = 10


def _newton(fld, mesh, load, u, opts: SolverOptions, info: SolveInfo) -> np.ndarray:
    I = mesh.interior_nodes
    u = u.copy()
    u[mesh.boundary_nodes] = 0.0

    def res(v):
        return _full_residual(fld, mesh, v, load)[I]

    r = res(u)
    best, best_r = u.copy(), np.max(np.abs(r), initial=0.0)
    polish = 0
    stall = 0
    hist: list = []
    for it in range(opts.max_iter):
        nr_inf = np.max(np.abs(r), initial=0.0)
        if nr_inf < best_r:
            best, best_r = u.copy(), nr_inf
        if nr_inf <= opts.newton_tol:
            if polish >= opts.polish_steps or nr_inf == 0.0:
                info.iterations, info.residual = it, nr_inf
                return u
            polish += 1
        nr = np.linalg.norm(r)
        step = None
        try:
            J = _full_jacobian(fld, mesh, u)[I][:, I].tocsc()
            step = _linsolve(J, -r)
        except SingularJacobian:
            if nr_inf <= opts.newton_tol:
                info.iterations, info.residual = it, nr_inf
                return u
            step = None
        accepted = False
        if step is not None:
            alpha = 1.0
            while alpha >= opts.min_damping:
                trial = u.copy()
                trial[I] += alpha * step
                try:
                    rt = res(trial)
                except EvaluationError:
                    rt = None
                if rt is not None and np.linalg.norm(rt) <= (1 - opts.armijo_c * alpha) * nr:
                    u, r = trial, rt
                    info.damping.append(alpha)
                    accepted = True
                    break
                alpha *= 0.5
        hist.append(nr_inf)
        if accepted and len(hist) > STALL_WINDOW and nr_inf > 0.5 * hist[-STALL_WINDOW - 1]:
            # slow Newton progress (degenerate p < 2 Jacobians): try frozen-coefficient sweeps
            ku, kr, ok = _kacanov(fld, mesh, load, u, r, opts, info)
            if ok:
                u, r = ku, kr
                hist.clear()
        if not accepted:
            if nr_inf <= opts.newton_tol:
                info.iterations, info.residual = it, nr_inf
                return u
            u, r, ok = _kacanov(fld, mesh, load, u, r, opts, info)
            info.damping.append(0.0)
            stall = 0 if ok else stall + 1
            if stall >= 3:
                break
    r_inf = np.max(np.abs(r), initial=0.0)
    if r_inf < best_r:
        best, best_r = u.copy(), r_inf
    info.iterations, info.residual = opts.max_iter, best_r
    if best_r <= opts.newton_tol:
        return best
    raise NonConvergence(
        f"Newton did not reach {opts.newton_tol:.1e} (best residual {best_r:.3e})",
        best=FeFunction(mesh, best),
        residual=best_r,
        history=info.damping,
        last=FeFunction(mesh, u),
    )


def _kacanov(fld, mesh, load, u, r, opts, info):
    """Frozen-coefficient iterations; returns (u, r, improved)."""
    I = mesh.interior_nodes
    nr0 = np.linalg.norm(r)
    cur, rc = u, r
    for _ in range(opts.kacanov_iters):
        K = _kacanov_matrix(fld, mesh, cur)[I][:, I].tocsc()
        lower = _full_residual(fld, mesh, cur, load, with_flux=False)
        try:
            nxt_i = _linsolve(K, -lower[I])
        except SingularJacobian:
            break
        nxt = cur.copy()
        nxt[I] = nxt_i
        try:
            rn = _full_residual(fld, mesh, nxt, load)[I]
        except EvaluationError:
            break
        info.kacanov_steps += 1
        if not np.all(np.isfinite(rn)):
            break
        cur, rc = nxt, rn
    return cur, rc, np.linalg.norm(rc) < nr0


def solve_truncated(
    fld: CoefficientField,
    mu: MeasureData | None,
    mesh: Mesh,
    tau: float = 1.0,
    opts: SolverOptions | None = None,
    u0=None,
    return_info: bool = False,
    load: np.ndarray | None = None,
):
    """Solve H_tau(u) = 0, i.e. the problem with b replaced by T_{1/tau}(b).

    ``mu`` should be bounded (a Density or a measure with an exact discrete
    load); ``load`` overrides it with a precomputed nodal vector.
    """
    opts = opts or SolverOptions()
    if not 0.0 < tau <= 1.0:
        raise ValueError("tau must lie in (0, 1]")
    if load is None:
        load = discretize_load(mu, mesh)
    return solve_discrete(truncation_homotopy(fld, tau), mesh, load, opts, u0, return_info)


def solve_discrete(
    fld: CoefficientField,
    mesh: Mesh,
    load: np.ndarray,
    opts: SolverOptions | None = None,
    u0=None,
    return_info: bool = False,
):
    """Solve R(u) = 0 for the field as given (no truncation of b)."""
    opts = opts or SolverOptions()
    u = np.zeros(mesh.n_nodes) if u0 is None else _full(mesh, u0).copy()
    info = SolveInfo()
    u = _newton(fld, mesh, np.asarray(load, float), u, opts, info)
    out = FeFunction(mesh, u)
    return (out, info) if return_info else out


# -- approximation driver ----------------------------------------------------------


@dataclass
class EntropySolution:
    u: FeFunction
    phi_norm: float
    trace: list
    estimate_slack: float | None
    energy_residual: float
    entropy_residuals: dict
    estimate_rhs: float | None = None
    accepted_level: int = 0

    def report(self) -> str:
        lines = ["schedule:", f"  {'n':>3} {'tau':>12} {'level':>8} {'iters':>6} {'residual':>11} {'d(u_n,u_n+1)':>13}"]
        for row in self.trace:
            d = "-" if row["distance"] is None else f"{row['distance']:.4e}"
            lines.append(
                f"  {row['n']:>3d} {row['tau']:>12.6g} {row['level']:>8g} {row['iters']:>6d} {row['residual']:>11.3e} {d:>13}"
            )
        lines.append(f"phi_norm: {self.phi_norm:.10g}")
        lines.append(f"estimate_rhs: {self.estimate_rhs if self.estimate_rhs is None else format(self.estimate_rhs, '.10g')}")
        lines.append(f"estimate_slack: {self.estimate_slack if self.estimate_slack is None else format(self.estimate_slack, '.6e')}")
        lines.append(f"energy_residual: {self.energy_residual:.6e}")
        for k, v in sorted(self.entropy_residuals.items()):
            lines.append(f"entropy_residual[k={k:g}]: {v:.6e}")
        return "\n".join(lines)


def tol_h(mesh: Mesh, C: float = 1.0) -> float:
    """Mesh-aware tolerance C h."""
    return C * mesh.h


def estimate_rhs(fld: CoefficientField, mu: MeasureData, mesh: Mesh) -> float | None:
    """psi_sup |mu|(Omega) + ||alpha0||_1, or None when |mu| is only bounded."""
    tv: Variation = total_variation(mu, mesh)
    if tv.is_bound:
        return None
    a0, _, _ = fld.growth.norms(mesh)
    return psi_sup() * tv.value + a0


def _level_measure(mu: MeasureData, level: float) -> MeasureData:
    return mollify(mu, level)


def solve_entropy(
    fld: CoefficientField,
    mu: MeasureData,
    mesh: Mesh,
    schedule: Schedule | None = None,
    opts: SolverOptions | None = None,
    u0=None,
    k_grid: Sequence[float] = (0.5, 1.0, 2.0, 4.0),
) -> EntropySolution:
    """Drive tau_n down and the mollification level up until d(u_n, u_{n+1}) <= tol."""
    schedule = schedule or Schedule()
    opts = opts or SolverOptions()
    p = fld.p
    trace = []
    prev = None if u0 is None else FeFunction(mesh, _full(mesh, u0))
    for n, tau, level in schedule.levels():
        load = discretize_load(_level_measure(mu, level), mesh)
        u, info = solve_truncated(fld, None, mesh, tau, opts, u0=prev, return_info=True, load=load)
        d = phi_metric(u, prev, p) if n > 0 else None
        trace.append(dict(n=n, tau=tau, level=level, iters=info.iterations, residual=info.residual, distance=d))
        if d is not None and d <= schedule.tol:
            return _certify(fld, mu, mesh, u, trace, n, k_grid)
        prev = u
    raise ScheduleExhausted(
        f"Phi-distances did not fall below {schedule.tol:g} within {schedule.n_max + 1} levels",
        trace=trace,
    )


def _certify(fld, mu, mesh, u, trace, n, k_grid) -> EntropySolution:
    pn = phi_norm(u, fld.p)
    rhs = estimate_rhs(fld, mu, mesh)
    slack = None if rhs is None else rhs - fld.growth.nu * pn
    load = discretize_load(mu, mesh)
    ent = {float(k): entropy_defect(fld, load, u, np.zeros(mesh.n_nodes), k) for k in k_grid}
    sol = EntropySolution(
        u=u,
        phi_norm=pn,
        trace=trace,
        estimate_slack=slack,
        energy_residual=0.0,
        entropy_residuals=ent,
        estimate_rhs=rhs,
        accepted_level=n,
    )
    sol.energy_residual = energy_identity_residual(sol, fld, mu, relative=True)
    return sol


def _pairing_terms(fld: CoefficientField, mesh: Mesh, u: np.ndarray, test: np.ndarray):
    """(int a . grad test, int b test) for nodal test values."""
    grads = mesh.cell_gradients(u)
    flux = fld.flux(mesh.centroids, grads)
    gt = mesh.cell_gradients(test)
    ta = float(np.sum(mesh.cell_volumes * np.sum(flux * gt, axis=1)))
    tb = 0.0
    if fld.has_lower_order:
        x, s, xi, w, phi = _lower_args(mesh, u, grads)
        bq = np.asarray(fld.lower(x, s, xi)).reshape(w.shape)
        tb = float(np.sum(w * bq * (test[mesh.cells] @ phi.T)))
    return ta, tb


def entropy_defect(fld: CoefficientField, load: np.ndarray, u: FeFunction, v: np.ndarray, k: float) -> float:
    """int a.grad T_k(u-v) + int b T_k(u-v) - <mu, T_k(u-v)> (nodal composition)."""
    mesh = u.mesh
    t = truncate_Tk(u.values - v, k)
    ta, tb = _pairing_terms(fld, mesh, u.values, t)
    return ta + tb - float(load @ t)


def energy_identity_residual(sol, fld: CoefficientField, mu: MeasureData, relative: bool = False) -> float:
    """|int psi'(u) a . grad u + int b psi(u) - <mu, I_h psi(u)>|.

    The left side uses the chain-rule form with psi'(u_h) at quadrature
    points; the right side pairs mu with the nodal interpolant of psi(u_h).
    The mismatch is a consistency error that vanishes under refinement.
    """
    u = sol.u if hasattr(sol, "u") else sol
    mesh = u.mesh
    vals = u.values
    grads = mesh.cell_gradients(vals)
    flux = fld.flux(mesh.centroids, grads)
    adotg = np.sum(flux * grads, axis=1)
    _, w, phi = mesh.quadrature
    dpsi = psi_prime(vals[mesh.cells] @ phi.T)
    lhs = float(np.sum(w * dpsi * adotg[:, None]))
    ps = psi(vals)
    if fld.has_lower_order:
        lhs += _pairing_terms(fld, mesh, vals, ps)[1]
    rhs = float(discretize_load(mu, mesh) @ ps)
    res = abs(lhs - rhs)
    if relative:
        scale = max(abs(lhs), abs(rhs))
        return res / scale if scale > 0 else 0.0
    return res
