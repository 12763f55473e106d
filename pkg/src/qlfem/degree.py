"""Brouwer degree of discretised truncated maps.

The degree of a C^1 map F on a bounded open region U without zeros on the
boundary is the sum of sign det F'(x) over its zeros in U (all regular).
Zeros are enumerated by multistart Newton from quasi-random starts covering
U; on small problems (few dofs) this is labelled ``certified-small-n``,
otherwise ``heuristic``.  Only a finite-dimensional shadow of the degree
for the continuum problem is computed here.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.stats import qmc

from .grid import FeFunction, Mesh
from .measures import MeasureData, discretize_load
from .solve import EvaluationError, _full_jacobian, _full_residual
from .structural import CoefficientField, phi_norm, truncation_homotopy

__all__ = [
    "BoundarySolution",
    "DegenerateJacobian",
    "NoStabilization",
    "PhiBall",
    "NodalBox",
    "UnionRegion",
    "DegreeOptions",
    "DegreeReport",
    "DiscreteMap",
    "truncated_map",
    "brouwer_degree",
    "stabilized_degree",
]


class BoundarySolution(RuntimeError):
    """A zero lies within the boundary buffer; the degree is undefined."""

    def __init__(self, msg, point=None):
        super().__init__(msg)
        self.point = point


class DegenerateJacobian(RuntimeError):
    def __init__(self, msg, point=None):
        super().__init__(msg)
        self.point = point


class NoStabilization(RuntimeError):
    def __init__(self, msg, trace=()):
        super().__init__(msg)
        self.trace = list(trace)


# -- regions ---------------------------------------------------------------------


class Region:
    """Open set of interior-dof vectors; ``margin`` > 0 inside, < 0 outside."""

    def margin(self, x: np.ndarray) -> float:
        raise NotImplementedError

    def contains(self, x: np.ndarray) -> bool:
        return self.margin(x) > 0

    def sample(self, n_points: int, dim: int, seed: int) -> np.ndarray:
        raise NotImplementedError

    def describe(self) -> str:
        return type(self).__name__


def _sobol(n_points: int, dim: int, seed: int) -> np.ndarray:
    m = int(np.ceil(np.log2(max(n_points, 2))))
    return qmc.Sobol(d=dim, scramble=True, seed=seed).random_base2(m)[:n_points]


@dataclass(frozen=True, eq=False)
class PhiBall(Region):
    """{u : int |grad phi_p(u)|^p < R} on the interior dofs of ``mesh``."""

    R: float
    mesh: Mesh
    p: float

    def __post_init__(self):
        if not self.R > 0:
            raise ValueError("ball radius must be positive")

    def _fe(self, x):
        v = np.zeros(self.mesh.n_nodes)
        v[self.mesh.interior_nodes] = x
        return FeFunction(self.mesh, v)

    def value(self, x) -> float:
        return phi_norm(self._fe(x), self.p)

    def margin(self, x) -> float:
        return self.R - self.value(x)

    def _scale_to(self, z, target):
        lo, hi = 0.0, 1.0
        while self.value(hi * z) < target:
            hi *= 2.0
            if hi > 1e12:
                return hi * z
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if self.value(mid * z) < target:
                lo = mid
            else:
                hi = mid
        return lo * z

    def sample(self, n_points, dim, seed):
        pts = _sobol(n_points, dim + 1, seed)
        out = [np.zeros(dim)]
        for row in pts[: n_points - 1]:
            z = 2 * row[:dim] - 1
            if not np.any(z):
                continue
            out.append(self._scale_to(z, self.R * (0.02 + 0.96 * row[dim])))
        return np.array(out)

    def describe(self):
        return f"PhiBall(R={self.R:g}, p={self.p:g})"


@dataclass(frozen=True, eq=False)
class NodalBox(Region):
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, float))
        hi = np.atleast_1d(np.asarray(self.upper, float))
        if lo.shape != hi.shape or np.any(hi <= lo):
            raise ValueError("box needs lower < upper componentwise")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    def margin(self, x) -> float:
        x = np.atleast_1d(x)
        return float(np.min(np.minimum(x - self.lower, self.upper - x)))

    def sample(self, n_points, dim, seed):
        return self.lower + (self.upper - self.lower) * _sobol(n_points, dim, seed)

    def describe(self):
        return f"NodalBox({self.lower.tolist()}, {self.upper.tolist()})"


@dataclass(frozen=True, eq=False)
class UnionRegion(Region):
    """Union of pairwise disjoint regions."""

    parts: tuple

    def margin(self, x) -> float:
        return max(r.margin(x) for r in self.parts)

    def sample(self, n_points, dim, seed):
        k = len(self.parts)
        return np.vstack([r.sample(max(n_points // k, 2), dim, seed + i) for i, r in enumerate(self.parts)])

    def describe(self):
        return " u ".join(r.describe() for r in self.parts)


# -- maps and degree ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DiscreteMap:
    F: Callable[[np.ndarray], np.ndarray]
    J: Callable[[np.ndarray], np.ndarray]
    n: int
    name: str = "map"


def truncated_map(fld: CoefficientField, mu: MeasureData | None, mesh: Mesh, tau: float, load=None) -> DiscreteMap:
    """x -> residual of the problem with b replaced by T_{1/tau}(b)."""
    ft = truncation_homotopy(fld, tau)
    I = mesh.interior_nodes
    if load is None:
        load = np.zeros(mesh.n_nodes) if mu is None else discretize_load(mu, mesh)

    def full(x):
        u = np.zeros(mesh.n_nodes)
        u[I] = x
        return u

    def F(x):
        return _full_residual(ft, mesh, full(x), load)[I]

    def J(x):
        return _full_jacobian(ft, mesh, full(x))[I][:, I].toarray()

    return DiscreteMap(F, J, I.size, f"H_tau(tau={tau:g})")


@dataclass(frozen=True)
class DegreeOptions:
    n_starts: int = 64
    seed: int = 0
    dedup_tol: float = 1e-6
    boundary_buffer: float = 1e-4
    certified_cap: int = 12
    newton_tol: float = 1e-10
    max_iter: int = 60
    degenerate_cond: float = 1e12
    tau_min: float = 2.0**-30


@dataclass
class DegreeReport:
    value: int
    tau_bar: float | None
    trace: list
    solutions: list
    confidence: str
    region: str = ""

    def text(self) -> str:
        lines = [
            "finite-dimensional shadow of the degree",
            f"region: {self.region}",
            f"value: {self.value}",
            f"confidence: {self.confidence}",
            f"tau_bar: {self.tau_bar if self.tau_bar is None else format(self.tau_bar, '.6g')}",
        ]
        if self.trace:
            lines.append("tau trace:")
            lines.extend(f"  tau={row['tau']:.6g} value={row['value']} n_solutions={row['n_solutions']}" for row in self.trace)
        lines.append("solutions:")
        for x, s in self.solutions:
            coords = " ".join(f"{c:.8g}" for c in np.atleast_1d(x))
            lines.append(f"  sign={s:+d} x=[{coords}]")
        return "\n".join(lines)


def _newton_zero(m: DiscreteMap, x0, opts: DegreeOptions):
    x = np.array(x0, float)
    try:
        f = m.F(x)
    except EvaluationError:
        return None
    for _ in range(opts.max_iter):
        if np.max(np.abs(f), initial=0.0) <= opts.newton_tol:
            return x
        try:
            step = np.linalg.solve(m.J(x), -f)
        except (np.linalg.LinAlgError, EvaluationError):
            return None
        if not np.all(np.isfinite(step)):
            return None
        nf, alpha = np.linalg.norm(f), 1.0
        while alpha > 1e-8:
            xt = x + alpha * step
            try:
                ft = m.F(xt)
            except EvaluationError:
                ft = None
            if ft is not None and np.linalg.norm(ft) <= (1 - 1e-4 * alpha) * nf:
                break
            alpha *= 0.5
        else:
            return None
        x, f = xt, ft
    return x if np.max(np.abs(f), initial=0.0) <= opts.newton_tol else None


def brouwer_degree(m: DiscreteMap, region: Region, opts: DegreeOptions | None = None, extra_starts=()) -> DegreeReport:
    """Sum of sign det J over the enumerated zeros of ``m`` inside ``region``."""
    opts = opts or DegreeOptions()
    starts = list(region.sample(opts.n_starts, m.n, opts.seed)) + [np.asarray(s, float) for s in extra_starts]
    zeros: list[np.ndarray] = []
    for s in starts:
        z = _newton_zero(m, s, opts)
        if z is None:
            continue
        if any(np.max(np.abs(z - w)) <= opts.dedup_tol for w in zeros):
            continue
        zeros.append(z)
    inside = []
    for z in zeros:
        mg = region.margin(z)
        if abs(mg) <= opts.boundary_buffer:
            raise BoundarySolution(f"zero within {opts.boundary_buffer:g} of the region boundary", point=z)
        if mg > 0:
            inside.append(z)
    sols = []
    for z in sorted(inside, key=lambda v: tuple(np.round(v, 12))):
        Jz = m.J(z)
        sign, _ = np.linalg.slogdet(Jz)
        smin = np.linalg.svd(Jz, compute_uv=False).min()
        # the zero is located only to within newton_tol / smin
        unresolved = smin == 0 or opts.newton_tol / smin > opts.dedup_tol
        if sign == 0 or unresolved or np.linalg.cond(Jz) > opts.degenerate_cond:
            raise DegenerateJacobian("singular Jacobian at a zero", point=z)
        sols.append((z, int(sign)))
    conf = "certified-small-n" if m.n <= opts.certified_cap else "heuristic"
    return DegreeReport(int(sum(s for _, s in sols)), None, [], sols, conf, region.describe())


def _same(a: DegreeReport, b: DegreeReport, tol: float) -> bool:
    if a.value != b.value or len(a.solutions) != len(b.solutions):
        return False
    return all(np.max(np.abs(x - y)) <= tol and s == t for (x, s), (y, t) in zip(a.solutions, b.solutions))


def stabilized_degree(
    fld: CoefficientField,
    mu: MeasureData | None,
    mesh: Mesh,
    region: Region,
    opts: DegreeOptions | None = None,
    load=None,
) -> DegreeReport:
    """Halve tau until two consecutive halvings leave the report unchanged."""
    opts = opts or DegreeOptions()
    if load is None:
        load = np.zeros(mesh.n_nodes) if mu is None else discretize_load(mu, mesh)
    trace = []
    history: list[DegreeReport] = []
    tau = 1.0
    carry: list = []
    while tau >= opts.tau_min:
        rep = brouwer_degree(truncated_map(fld, None, mesh, tau, load=load), region, opts, extra_starts=carry)
        carry = [x for x, _ in rep.solutions]
        trace.append(dict(tau=tau, value=rep.value, n_solutions=len(rep.solutions)))
        history.append(rep)
        if len(history) >= 3 and _same(history[-3], history[-2], opts.dedup_tol) and _same(history[-2], history[-1], opts.dedup_tol):
            out = history[-3]
            out.tau_bar = trace[-3]["tau"]
            out.trace = trace
            return out
        tau *= 0.5
    raise NoStabilization(f"degree did not stabilise for tau >= {opts.tau_min:g}", trace=trace)
