"""Right-hand side measures: densities, line charges and weak-form pairs.

Every measure acts on test functions through a pairing.  Discrete load
vectors are ``L_i = <mu, phi_i>`` for all nodal basis functions (boundary
nodes included; solvers restrict to the interior).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
from scipy.special import j0, jn_zeros

from .grid import Mesh, assemble_vector, integrate, sphere_area

__all__ = [
    "MeasureError",
    "InadmissibleMeasure",
    "MeasureData",
    "Density",
    "LineCharge",
    "WeakForm",
    "PointMass",
    "Variation",
    "check_admissible",
    "decompose",
    "discretize_load",
    "pairing",
    "mollify",
    "total_variation",
    "constant_density",
    "radial_power_density",
    "first_eigenmode_density",
    "scaled",
]


# a line charge at level n is spread over a band of half-width 1 / (BAND_SCALE n);
# a narrow band keeps the O(width) load defect of mesh-aligned segments small
BAND_SCALE = 8.0


class MeasureError(ValueError):
    pass


class InadmissibleMeasure(MeasureError):
    pass


class MeasureData:
    """Base class of all right-hand sides."""

    name: str = "measure"


def _zero_scalar(x):
    return np.zeros(np.shape(x)[:-1])


def _zero_vector(x):
    return np.zeros(np.shape(x))


@dataclass(frozen=True, eq=False)
class Density(MeasureData):
    """mu = f dx.

    ``l1_norm`` may carry the exact ``||f||_1`` over the intended domain; it is
    otherwise computed by quadrature.  ``lm_tag`` records an exponent m with
    f in L^m (used by regularity sweeps).
    """

    f: Callable
    l1_norm: float | None = None
    lm_tag: float | None = None
    sup: float | None = None
    name: str = "density"

    def _load(self, mesh: Mesh) -> np.ndarray:
        pts, w, phi = mesh.quadrature
        fq = np.asarray(self.f(pts), dtype=float)
        return assemble_vector(mesh, np.einsum("mq,mq,qk->mk", w, fq, phi))


@dataclass(frozen=True, eq=False)
class LineCharge(MeasureData):
    """Charge on the segment [start, end] with density linear from g0 to g1."""

    start: tuple
    end: tuple
    g0: float = 1.0
    g1: float | None = None
    name: str = "line_charge"

    def __post_init__(self):
        object.__setattr__(self, "start", tuple(float(v) for v in self.start))
        object.__setattr__(self, "end", tuple(float(v) for v in self.end))
        if self.g1 is None:
            object.__setattr__(self, "g1", self.g0)
        if self.length <= 0:
            raise MeasureError("line charge needs a segment of positive length")

    @property
    def length(self) -> float:
        return float(np.hypot(self.end[0] - self.start[0], self.end[1] - self.start[1]))

    @property
    def tangent(self) -> np.ndarray:
        d = np.subtract(self.end, self.start)
        return d / np.linalg.norm(d)

    @property
    def normal(self) -> np.ndarray:
        t = self.tangent
        return np.array([-t[1], t[0]])

    def density_at(self, sigma):
        """Linear density at arclength fraction sigma in [0, 1]."""
        return self.g0 + (self.g1 - self.g0) * np.asarray(sigma)

    def _load(self, mesh: Mesh) -> np.ndarray:
        if mesh.is_radial:
            raise MeasureError("line charges need a planar mesh")
        return _segment_load(mesh, np.asarray(self.start), np.asarray(self.end), self.g0, self.g1)


@dataclass(frozen=True, eq=False)
class WeakForm(MeasureData):
    """mu = w0 - div w1, acting as v -> int v w0 + int grad v . w1."""

    w0: Callable = _zero_scalar
    w1: Callable = _zero_vector
    w0_l1: float | None = None
    w1_lpp: float | None = None
    name: str = "weak_form"

    def _load(self, mesh: Mesh) -> np.ndarray:
        pts, w, phi = mesh.quadrature
        f0 = np.asarray(self.w0(pts), dtype=float)
        f1 = np.asarray(self.w1(pts), dtype=float)
        loc = np.einsum("mq,mq,qk->mk", w, f0, phi)
        loc += np.einsum("mq,mqd,mkd->mk", w, f1, mesh.basis_grads)
        return assemble_vector(mesh, loc)


@dataclass(frozen=True, eq=False)
class PointMass(MeasureData):
    """Dirac mass; only admissible when points have positive p-capacity (p > N)."""

    x0: tuple
    mass: float
    p: float
    N: int = 2
    name: str = "point_mass"

    def __post_init__(self):
        if self.p <= self.N:
            raise InadmissibleMeasure(
                f"point mass rejected: for p={self.p} <= N={self.N} points have zero p-capacity, "
                "so a Dirac mass is not absolutely continuous with respect to the p-capacity"
            )

    def _load(self, mesh: Mesh) -> np.ndarray:
        x0 = np.atleast_1d(np.asarray(self.x0, float))
        lam = _barycentric(mesh, x0)
        inside = np.all(lam >= -1e-12, axis=1)
        c = int(np.flatnonzero(inside)[0])
        out = np.zeros(mesh.n_nodes)
        out[mesh.cells[c]] = self.mass * lam[c]
        return out


def _barycentric(mesh: Mesh, x: np.ndarray) -> np.ndarray:
    """Barycentric coordinates of point x in every cell, shape (m, dim+1)."""
    k = mesh.dim + 1
    return 1.0 / k + np.einsum("mkd,md->mk", mesh.basis_grads, x[None, :] - mesh.centroids)


def _segment_load(mesh: Mesh, A: np.ndarray, B: np.ndarray, g0: float, g1: float) -> np.ndarray:
    """Exact int_seg g phi_i ds for P1 basis functions, any mesh-segment position."""
    lamA = _barycentric(mesh, A)
    lamB = _barycentric(mesh, B)
    slope = lamB - lamA
    lo = np.zeros(mesh.n_cells)
    hi = np.ones(mesh.n_cells)
    tiny = 1e-14
    with np.errstate(divide="ignore", invalid="ignore"):
        cut = -lamA / slope
    for i in range(3):
        pos = slope[:, i] > tiny
        neg = slope[:, i] < -tiny
        flat = ~(pos | neg)
        lo = np.where(pos, np.maximum(lo, cut[:, i]), lo)
        hi = np.where(neg, np.minimum(hi, cut[:, i]), hi)
        # parallel to an edge: keep only if on the inner side
        hi = np.where(flat & (lamA[:, i] < -1e-12), -1.0, hi)
    L = float(np.linalg.norm(B - A))
    keep = (hi - lo) * L > 1e-13
    cells = np.flatnonzero(keep)
    out = np.zeros(mesh.n_nodes)
    if cells.size == 0:
        return out
    lo, hi = lo[cells], hi[cells]
    # pieces lying on an interior edge are seen by both neighbours
    weight = np.ones(cells.size)
    tmid = 0.5 * (lo + hi)
    lam_mid = lamA[cells] + tmid[:, None] * slope[cells]
    on_edge = np.any(np.abs(lam_mid) < 1e-10, axis=1)
    if np.any(on_edge):
        edge_count = _edge_counts(mesh)
        for j in np.flatnonzero(on_edge):
            i = int(np.argmin(np.abs(lam_mid[j])))
            verts = np.delete(mesh.cells[cells[j]], i)
            weight[j] = 1.0 / edge_count[tuple(sorted(verts.tolist()))]
    gx = np.array([0.5 - 0.5 / np.sqrt(3), 0.5 + 0.5 / np.sqrt(3)])
    for gq in gx:
        t = lo + gq * (hi - lo)
        lam = lamA[cells] + t[:, None] * slope[cells]
        g = g0 + (g1 - g0) * t
        wq = 0.5 * (hi - lo) * L * g * weight
        np.add.at(out, mesh.cells[cells].ravel(), (wq[:, None] * lam).ravel())
    return out


def _edge_counts(mesh: Mesh) -> dict:
    c = mesh.cells
    counts: dict = {}
    for a, b in np.concatenate([c[:, [0, 1]], c[:, [1, 2]], c[:, [2, 0]]]).tolist():
        key = (a, b) if a < b else (b, a)
        counts[key] = counts.get(key, 0) + 1
    return counts


# -- mollified variants (bounded densities with exact loads) ----------------------


@dataclass(frozen=True, eq=False)
class _BandDensity(Density):
    """Line charge spread uniformly over a band of half-width ``delta``."""

    source: LineCharge | None = None
    delta: float = 0.0

    def _load(self, mesh: Mesh) -> np.ndarray:
        src = self.source
        A0, B0, nrm = np.asarray(src.start), np.asarray(src.end), src.normal
        gx, gw = np.polynomial.legendre.leggauss(4)
        out = np.zeros(mesh.n_nodes)
        # split at 0, where the load is only piecewise smooth in the offset
        for a, b in ((-self.delta, 0.0), (0.0, self.delta)):
            for x, w in zip(gx, gw):
                t = 0.5 * (a + b) + 0.5 * (b - a) * x
                wt = 0.5 * (b - a) * w / (2 * self.delta)
                out += wt * _segment_load(mesh, A0 + t * nrm, B0 + t * nrm, src.g0, src.g1)
        return out


@dataclass(frozen=True, eq=False)
class _SmoothedWeakForm(Density):
    """T_n(w0) plus -div of w1 averaged over a box of half-width ``delta``."""

    source: WeakForm | None = None
    delta: float = 0.0
    level: float = 1.0

    def _smoothed_w1(self, pts):
        gx, gw = np.polynomial.legendre.leggauss(2)
        d = pts.shape[-1]
        acc = 0.0
        for idx in np.ndindex(*(2,) * d):
            off = np.array([self.delta * gx[i] for i in idx])
            wt = np.prod([0.5 * gw[i] for i in idx])
            acc = acc + wt * np.asarray(self.source.w1(pts + off), float)
        return acc

    def _load(self, mesh: Mesh) -> np.ndarray:
        pts, w, phi = mesh.quadrature
        f0 = np.clip(np.asarray(self.source.w0(pts), float), -self.level, self.level)
        loc = np.einsum("mq,mq,qk->mk", w, f0, phi)
        loc += np.einsum("mq,mqd,mkd->mk", w, self._smoothed_w1(pts), mesh.basis_grads)
        return assemble_vector(mesh, loc)


# -- operations ------------------------------------------------------------------


def check_admissible(mu: MeasureData, p: float, N: int) -> None:
    """Raise InadmissibleMeasure unless mu is absolutely continuous w.r.t. cap_p."""
    if isinstance(mu, LineCharge) and not (1 > N - p):
        raise InadmissibleMeasure(
            f"line charge rejected: segments have zero p-capacity when p={p} <= N-1={N - 1}"
        )
    if isinstance(mu, PointMass) and p <= N:
        raise InadmissibleMeasure("point mass rejected: points have zero p-capacity for p <= N")


def decompose(mu: MeasureData) -> tuple[Callable, Callable]:
    """Return (w0, w1) with <mu, v> = int v w0 + int grad v . w1.

    For a line charge, w1 is the single-layer field -g n on the half-strip
    swept from the segment along its normal n; the pairing reproduces the
    line integral exactly for test functions vanishing on the boundary of a
    convex domain.
    """
    if isinstance(mu, WeakForm):
        return mu.w0, mu.w1
    if isinstance(mu, (_BandDensity, _SmoothedWeakForm)):
        return mu.f, _zero_vector
    if isinstance(mu, Density):
        return mu.f, _zero_vector
    if isinstance(mu, LineCharge):
        A = np.asarray(mu.start)
        t, n, L = mu.tangent, mu.normal, mu.length

        def w1(x):
            rel = np.asarray(x, float) - A
            sig = (rel @ t) / L
            off = rel @ n
            inside = (sig >= 0) & (sig <= 1) & (off > 0)
            g = mu.density_at(np.clip(sig, 0, 1))
            return np.where(inside[..., None], -g[..., None] * n, 0.0)

        return _zero_scalar, w1
    raise InadmissibleMeasure(f"{type(mu).__name__} has no weak-form decomposition")


def pairing(mu: MeasureData, v, mesh: Mesh | None = None) -> float:
    """<mu, v> for a P1 function v, computed through the (w0, w1) decomposition."""
    mesh = mesh or v.mesh
    w0, w1 = decompose(mu)
    vq = mesh.at_quadrature(v.values)
    gv = mesh.cell_gradients(v.values)
    pts, w, _ = mesh.quadrature
    return float(np.sum(w * np.asarray(w0(pts)) * vq) + np.sum(w * np.einsum("mqd,md->mq", np.asarray(w1(pts)), gv)))


def discretize_load(mu: MeasureData, mesh: Mesh) -> np.ndarray:
    """Nodal load vector L_i = <mu, phi_i> (all nodes)."""
    if not hasattr(mu, "_load"):
        raise InadmissibleMeasure(f"cannot discretise {type(mu).__name__}")
    return mu._load(mesh)


def mollify(mu: MeasureData, n: float) -> Density:
    """Bounded density approximating mu at level n (sup norm <= C n)."""
    if n < 1:
        raise ValueError("mollification level must be >= 1")
    if isinstance(mu, (_BandDensity, _SmoothedWeakForm)):
        return mu
    if isinstance(mu, Density):
        f = mu.f
        if mu.sup is not None and mu.sup <= n:
            return mu
        return Density(lambda x: np.clip(f(x), -n, n), lm_tag=mu.lm_tag, sup=float(n), name=f"T_{n:g}({mu.name})")
    if isinstance(mu, LineCharge):
        delta = 1.0 / (BAND_SCALE * n)
        A = np.asarray(mu.start)
        t, nrm, L = mu.tangent, mu.normal, mu.length

        def f(x):
            rel = np.asarray(x, float) - A
            sig = (rel @ t) / L
            inside = (sig >= 0) & (sig <= 1) & (np.abs(rel @ nrm) < delta)
            return np.where(inside, mu.density_at(np.clip(sig, 0, 1)) / (2 * delta), 0.0)

        gmax = max(abs(mu.g0), abs(mu.g1))
        return _BandDensity(f, l1_norm=None, sup=gmax / (2 * delta), name=f"band_{n:g}({mu.name})", source=mu, delta=delta)
    if isinstance(mu, WeakForm):
        sm = _SmoothedWeakForm(lambda x: np.zeros(np.shape(x)[:-1]), name=f"smooth_{n:g}({mu.name})", source=mu, delta=1.0 / n, level=float(n))
        h = 0.5 / n

        def f(x, sm=sm):
            x = np.asarray(x, float)
            div = 0.0
            for j in range(x.shape[-1]):
                e = np.zeros(x.shape[-1])
                e[j] = h
                div = div + (sm._smoothed_w1(x + e)[..., j] - sm._smoothed_w1(x - e)[..., j]) / (2 * h)
            return np.clip(mu.w0(x), -n, n) - div

        object.__setattr__(sm, "f", f)
        return sm
    raise InadmissibleMeasure(f"cannot mollify {type(mu).__name__}")


class Variation(NamedTuple):
    value: float
    is_bound: bool


def total_variation(mu: MeasureData, mesh: Mesh | None = None) -> Variation:
    """|mu|(Omega).  For weak-form data only ||w0||_1 + ||w1||_{p'} (a bound) is known."""
    if isinstance(mu, _BandDensity):
        src = mu.source
        return Variation(_line_mass(src), False)
    if isinstance(mu, Density):
        if mu.l1_norm is not None:
            return Variation(float(mu.l1_norm), False)
        if mesh is None:
            raise MeasureError("density without stored L1 norm needs a mesh for quadrature")
        return Variation(integrate(lambda x: np.abs(mu.f(x)), mesh), False)
    if isinstance(mu, LineCharge):
        return Variation(_line_mass(mu), False)
    if isinstance(mu, PointMass):
        return Variation(abs(mu.mass), False)
    if isinstance(mu, WeakForm):
        n0 = mu.w0_l1 if mu.w0_l1 is not None else (integrate(lambda x: np.abs(mu.w0(x)), mesh) if mesh else np.inf)
        n1 = mu.w1_lpp if mu.w1_lpp is not None else np.inf
        return Variation(float(n0 + n1), True)
    raise MeasureError(f"unknown measure {type(mu).__name__}")


def _line_mass(mu: LineCharge) -> float:
    g0, g1, L = mu.g0, mu.g1, mu.length
    if g0 * g1 >= 0:
        return 0.5 * (abs(g0) + abs(g1)) * L
    z = g0 / (g0 - g1)
    return 0.5 * L * (abs(g0) * z + abs(g1) * (1 - z))


# -- built-in data ---------------------------------------------------------------


def constant_density(c: float, domain_measure: float | None = None) -> Density:
    l1 = abs(c) * domain_measure if domain_measure is not None else None
    return Density(lambda x: np.full(np.shape(x)[:-1], float(c)), l1_norm=l1, sup=abs(c), lm_tag=np.inf, name=f"const({c:g})")


def radial_power_density(s: float, center=None, c: float = 1.0, ball: tuple | None = None) -> Density:
    """c |x - center|^{-s}; ``ball=(N, R)`` gives the exact L1 norm on B_R in R^N."""

    def f(x):
        x = np.asarray(x, float)
        z = x if center is None else x - np.asarray(center, float)
        r = np.linalg.norm(z, axis=-1)
        with np.errstate(divide="ignore"):
            return c * r ** (-s)

    l1 = None
    lm = None
    if ball is not None:
        N, R = ball
        if s >= N:
            raise MeasureError("|x|^{-s} is not integrable for s >= N")
        l1 = abs(c) * sphere_area(N) * R ** (N - s) / (N - s)
        lm = N / s if s > 0 else np.inf  # f in L^m for every m < N/s
    return Density(f, l1_norm=l1, lm_tag=lm, name=f"|x|^-{s:g}")


def first_eigenmode_density(radial: bool = False, N: int = 2, R: float = 1.0, c: float = 1.0) -> Density:
    """First Dirichlet eigenfunction of the unit square (or of the 2D disk)."""
    if radial:
        if N != 2:
            raise MeasureError("radial eigenmode built-in is for N = 2")
        z = jn_zeros(0, 1)[0]
        return Density(lambda x: c * j0(z * np.asarray(x)[..., 0] / R), sup=abs(c), name="eigenmode_disk")

    def f(x):
        x = np.asarray(x, float)
        return c * np.sin(np.pi * x[..., 0]) * np.sin(np.pi * x[..., 1])

    return Density(f, l1_norm=abs(c) * 4 / np.pi**2, sup=abs(c), lm_tag=np.inf, name="eigenmode_square")


def scaled(mu: MeasureData, c: float) -> MeasureData:
    """The measure c * mu."""
    if isinstance(mu, (_BandDensity, _SmoothedWeakForm)):
        raise MeasureError("scale the source measure before mollifying")
    if isinstance(mu, Density):
        f = mu.f
        return Density(
            lambda x: c * f(x),
            l1_norm=None if mu.l1_norm is None else abs(c) * mu.l1_norm,
            lm_tag=mu.lm_tag,
            sup=None if mu.sup is None else abs(c) * mu.sup,
            name=f"{c:g}*{mu.name}",
        )
    if isinstance(mu, LineCharge):
        return LineCharge(mu.start, mu.end, c * mu.g0, c * mu.g1)
    if isinstance(mu, WeakForm):
        return WeakForm(lambda x: c * mu.w0(x), lambda x: c * mu.w1(x))
    raise MeasureError(f"cannot scale {type(mu).__name__}")
