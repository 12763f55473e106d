"""Continuation along the scaling homotopy and blow-up analysis.

The path problem at t in [0, 1] is

    -div a_t(x, grad u) + b_t(x, u, grad u) = t mu,   a_t(x, xi) = t a(x, t^{-1/(p-1)} xi),

which at t = 0 is the homogeneous limit problem (solved by u = 0) and at
t = 1 the target problem.  A path either reaches t = 1, or its solutions
escape every Phi-ball, in which case the normalised iterates give a
candidate kernel element of the limit problem.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.stats import qmc

from .grid import FeFunction, Mesh, assemble_matrix, assemble_vector
from .measures import MeasureData, discretize_load
from .solve import (
    EvaluationError,
    NonConvergence,
    SingularJacobian,
    SolverOptions,
    _full_jacobian,
    _full_residual,
    estimate_rhs,
    solve_discrete,
)
from .structural import CoefficientField, StructureError, phi_norm, scaling_homotopy

__all__ = [
    "PathOptions",
    "PathSample",
    "Reached",
    "BlowUp",
    "Stalled",
    "PathReport",
    "KernelResult",
    "run_fredholm_path",
    "blowup_tau",
    "normalize_blowup",
    "solve_limit_kernel",
    "dirichlet_eigen",
    "richardson",
    "eigen_alignment",
]


@dataclass(frozen=True)
class PathOptions:
    """Adaptive step control; ``R_max=None`` means ten times the a-priori ceiling."""

    dt: float = 0.125
    dt_max: float = 0.25
    dt_floor: float = 1e-6
    R_max: float | None = None
    max_steps: int = 400
    solver: SolverOptions = field(default_factory=SolverOptions)

    def __post_init__(self):
        if not 0 < self.dt_floor <= self.dt <= self.dt_max <= 1:
            raise ValueError("need 0 < dt_floor <= dt <= dt_max <= 1")
        if self.R_max is not None and self.R_max <= 0:
            raise ValueError("R_max must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")


@dataclass(frozen=True)
class PathSample:
    t: float
    phi_norm: float
    newton_iters: int
    status: str


@dataclass
class Reached:
    u: FeFunction
    name: str = "Reached"


@dataclass
class BlowUp:
    t_star: float
    candidate: FeFunction
    tau_trace: list
    limit_residual: float
    name: str = "BlowUp"


@dataclass
class Stalled:
    diagnostics: str
    name: str = "Stalled"


@dataclass
class PathReport:
    samples: list
    status: Reached | BlowUp | Stalled
    R_max: float

    def csv_rows(self):
        yield ("t", "phi_norm", "newton_iters", "status")
        for s in self.samples:
            yield (repr(float(s.t)), repr(float(s.phi_norm)), str(s.newton_iters), s.status)


def blowup_tau(u: FeFunction, p: float) -> float:
    """int |u|^{p-1} + |grad u|^{p-1}."""
    mesh = u.mesh
    _, w, _ = mesh.quadrature
    vq = mesh.at_quadrature(u.values)
    g = np.linalg.norm(u.gradients(), axis=1)
    return float(np.sum(w * np.abs(vq) ** (p - 1)) + np.dot(mesh.cell_volumes, g ** (p - 1)))


def normalize_blowup(u_sequence: Sequence[FeFunction] | FeFunction, p: float) -> FeFunction:
    """v = u / tau^{1/(p-1)} for the last iterate, so that blowup_tau(v) = 1."""
    if isinstance(u_sequence, FeFunction):
        u_sequence = [u_sequence]
    if not u_sequence:
        raise ValueError("need at least one iterate")
    u = u_sequence[-1]
    tau = blowup_tau(u, p)
    if not tau > 0:
        raise ValueError("cannot normalise the zero function")
    return u * (tau ** (-1.0 / (p - 1)))


def _limit_residual(fld: CoefficientField, v: FeFunction) -> float:
    lim = scaling_homotopy(fld, 0.0)
    mesh = v.mesh
    r = _full_residual(lim, mesh, v.values, np.zeros(mesh.n_nodes))[mesh.interior_nodes]
    return float(np.max(np.abs(r), initial=0.0))


def run_fredholm_path(
    fld: CoefficientField,
    mu: MeasureData,
    mesh: Mesh,
    opts: PathOptions | None = None,
    load: np.ndarray | None = None,
) -> PathReport:
    """Continue from (t=0, u=0) to t=1 with adaptive steps."""
    opts = opts or PathOptions()
    if fld.asymptotic is None:
        raise StructureError("the path needs a field with an asymptotic pair")
    p = fld.p
    if load is None:
        load = discretize_load(mu, mesh)
    R_max = opts.R_max
    if R_max is None:
        rhs = estimate_rhs(fld, mu, mesh)
        if rhs is None or rhs <= 0:
            raise ValueError("no a-priori ceiling available; set R_max explicitly")
        R_max = 10.0 * rhs / fld.growth.nu

    u = FeFunction.zeros(mesh)
    lim = scaling_homotopy(fld, 0.0)
    r0 = _full_residual(lim, mesh, u.values, np.zeros(mesh.n_nodes))[mesh.interior_nodes]
    samples = [PathSample(0.0, 0.0, 0, "ok" if np.max(np.abs(r0), initial=0.0) <= 1e-12 else "residual")]
    t, dt, streak = 0.0, opts.dt, 0
    iterates: list[FeFunction] = []

    def blow(t_star, seq):
        v = normalize_blowup(seq, p)
        taus = [blowup_tau(w, p) for w in seq]
        return PathReport(samples, BlowUp(t_star, v, taus, _limit_residual(fld, v)), R_max)

    for _ in range(opts.max_steps):
        if t >= 1.0:
            return PathReport(samples, Reached(u), R_max)
        t_new = min(1.0, t + dt)
        ft = scaling_homotopy(fld, t_new)
        try:
            u_new, info = solve_discrete(ft, mesh, t_new * load, opts.solver, u0=u, return_info=True)
        except (NonConvergence, SingularJacobian, EvaluationError) as exc:
            last = getattr(exc, "last", None)
            if last is not None and np.any(last.values):
                iterates.append(last)
                pn_last = phi_norm(last, p)
                if pn_last > R_max:
                    samples.append(PathSample(t_new, pn_last, opts.solver.max_iter, "blowup"))
                    return blow(t_new, iterates)
            samples.append(PathSample(t_new, float("nan"), opts.solver.max_iter, "failed"))
            dt *= 0.5
            streak = 0
            if dt < opts.dt_floor:
                seq = iterates or [u]
                if not np.any(seq[-1].values):
                    return PathReport(samples, Stalled(f"step floor reached at t={t:g} with u = 0"), R_max)
                return blow(t, seq)
            continue
        pn = phi_norm(u_new, p)
        iterates.append(u_new)
        if pn > R_max:
            samples.append(PathSample(t_new, pn, info.iterations, "blowup"))
            return blow(t_new, iterates)
        samples.append(PathSample(t_new, pn, info.iterations, "ok"))
        t, u = t_new, u_new
        streak += 1
        if streak >= 2:
            dt = min(2 * dt, opts.dt_max)
            streak = 0
    if t >= 1.0:
        return PathReport(samples, Reached(u), R_max)
    return PathReport(samples, Stalled(f"step budget {opts.max_steps} exhausted at t={t:g}"), R_max)


# -- limit problem kernel --------------------------------------------------------


@dataclass
class KernelResult:
    v: FeFunction | None
    residual: float
    attempts: list

    @property
    def found(self) -> bool:
        return self.v is not None


def _power_terms(mesh: Mesh, v: np.ndarray, p: float, eps: float = 1e-12):
    """B_i = int |v|^{p-2} v phi_i and its Jacobian, plus int |v|^p."""
    _, w, phi = mesh.quadrature
    vq = v[mesh.cells] @ phi.T
    n = np.sqrt(eps * eps + vq * vq)
    wq = n ** (p - 2)
    B = assemble_vector(mesh, np.einsum("mq,mq,qk->mk", w, wq * vq, phi))
    dB = assemble_matrix(mesh, np.einsum("mq,mq,qi,qj->mij", w, wq * (1 + (p - 2) * vq * vq / (n * n)), phi, phi))
    return B, dB, float(np.sum(w * np.abs(vq) ** p))


def solve_limit_kernel(
    fld: CoefficientField,
    mesh: Mesh,
    attempts: int = 32,
    seed: int = 0,
    tol: float = 1e-8,
    max_iter: int = 60,
) -> KernelResult:
    """Search for a nontrivial solution of the limit problem.

    Newton is run on the augmented system R_inf(v) = sigma B(v), int |v|^p = 1
    from quasi-random starts; a start succeeds only when the solution,
    rescaled to blowup_tau(v) = 1, has limit residual <= tol.
    """
    p = fld.p
    lim = scaling_homotopy(fld, 0.0)
    I = mesh.interior_nodes
    nI = I.size
    zero_load = np.zeros(mesh.n_nodes)
    m = int(np.ceil(np.log2(max(attempts, 2))))
    starts = 2 * qmc.Sobol(d=nI, scramble=True, seed=seed).random_base2(m) - 1
    bump = np.zeros(mesh.n_nodes)
    x = mesh.nodes
    if mesh.is_radial:
        bump = 1 - (x[:, 0] / x[:, 0].max()) ** 2
    else:
        lo, hi = x.min(axis=0), x.max(axis=0)
        z = (x - lo) / (hi - lo)
        bump = np.prod(z * (1 - z), axis=1)
    starts = np.vstack([bump[I], starts])[:attempts]

    log = []
    best_v, best_res = None, np.inf
    for k, s0 in enumerate(starts):
        v = np.zeros(mesh.n_nodes)
        v[I] = s0
        _, _, nrm = _power_terms(mesh, v, p)
        if nrm <= 0:
            continue
        v *= nrm ** (-1 / p)
        sigma = 0.0
        ok = False
        for _ in range(max_iter):
            try:
                R = _full_residual(lim, mesh, v, zero_load)[I]
                J = _full_jacobian(lim, mesh, v)[I][:, I]
            except EvaluationError:
                break
            B, dB, nrm = _power_terms(mesh, v, p)
            F = np.concatenate([R - sigma * B[I], [nrm - 1.0]])
            if np.max(np.abs(F)) <= 1e-13:
                ok = True
                break
            A = sp.bmat([[J - sigma * dB[I][:, I], -B[I][:, None]], [p * B[I][None, :], None]], format="csc")
            try:
                step = spla.splu(A).solve(-F)
            except RuntimeError:
                break
            if not np.all(np.isfinite(step)):
                break
            alpha, f0 = 1.0, np.linalg.norm(F)
            while alpha > 1e-6:
                vt = v.copy()
                vt[I] += alpha * step[:-1]
                st = sigma + alpha * step[-1]
                Bt, _, nt = _power_terms(mesh, vt, p)
                Ft = np.concatenate([_full_residual(lim, mesh, vt, zero_load)[I] - st * Bt[I], [nt - 1.0]])
                if np.linalg.norm(Ft) < (1 - 1e-4 * alpha) * f0:
                    break
                alpha *= 0.5
            v, sigma = vt, st
            if np.linalg.norm(step) * alpha <= 1e-14 * (1 + np.linalg.norm(v)):
                ok = True
                break
        cand = normalize_blowup(FeFunction(mesh, v), p) if np.any(v) else None
        res = _limit_residual(fld, cand) if cand is not None else np.inf
        log.append(dict(start=k, newton_ok=ok, sigma=float(sigma), residual=float(res)))
        if res <= tol and res < best_res:
            best_v, best_res = cand, res
    return KernelResult(best_v, best_res, log)


# -- eigen oracle ------------------------------------------------------------------


def dirichlet_eigen(mesh: Mesh, k: int = 1):
    """Smallest k discrete Dirichlet eigenpairs (values, M-orthonormal nodal vectors)."""
    I = mesh.interior_nodes
    K = mesh.stiffness_matrix[I][:, I].tocsc()
    M = mesh.mass_matrix[I][:, I].tocsc()
    if I.size <= k + 1:
        import scipy.linalg as la

        vals, vecs = la.eigh(K.toarray(), M.toarray())
    else:
        # fixed start vector: ARPACK otherwise draws a random one
        vals, vecs = spla.eigsh(K, k=k, M=M, sigma=0.0, which="LM", v0=np.ones(I.size))
    order = np.argsort(vals)[:k]
    full = np.zeros((mesh.n_nodes, k))
    full[I] = vecs[:, order]
    # fix signs so the vectors have positive sum
    full *= np.where(full.sum(axis=0) < 0, -1.0, 1.0)
    return vals[order], full


def richardson(values: Sequence[float], ratio: float = 2.0, order: float = 2.0) -> float:
    """Richardson extrapolation of the last two values of a refinement sequence."""
    if len(values) < 2:
        raise ValueError("need at least two values")
    f = ratio**order
    return float((f * values[-1] - values[-2]) / (f - 1))


def eigen_alignment(v: FeFunction, e: np.ndarray) -> float:
    """|<v, e>_M| / (||v||_M ||e||_M)."""
    M = v.mesh.mass_matrix
    a = v.values
    num = abs(a @ (M @ e))
    den = np.sqrt((a @ (M @ a)) * (e @ (M @ e)))
    return float(num / den) if den > 0 else 0.0
