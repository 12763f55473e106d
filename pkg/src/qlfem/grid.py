"""Meshes, P1 spaces and quadrature.

Two kinds of meshes are supported: structured/red-refined triangulations of
planar domains (``dim == 2``) and a one-dimensional radial reduction
(``dim == 1``) that represents radially symmetric functions on a ball of
``R^N``.  For the radial mesh every integral carries the weight
``|S^{N-1}| r^{N-1}``, so that integrals over the interval equal integrals
over the ball.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from math import gamma, pi
from pathlib import Path

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Mesh",
    "FeFunction",
    "MeshError",
    "build_square_mesh",
    "build_radial_mesh",
    "refine",
    "grad_p_norm",
    "integrate",
    "interpolate",
    "read_mesh",
    "write_mesh",
    "write_solution",
    "read_solution",
]


class MeshError(ValueError):
    pass


def _frozen(a, dtype=None):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


def sphere_area(N: int) -> float:
    """Surface measure of the unit sphere in R^N."""
    return 2.0 * pi ** (N / 2.0) / gamma(N / 2.0)


# 3-point interior rule on the reference triangle, exact for quadratics.
_TRI_BARY = np.array([[2 / 3, 1 / 6, 1 / 6], [1 / 6, 2 / 3, 1 / 6], [1 / 6, 1 / 6, 2 / 3]])
_TRI_W = np.full(3, 1 / 3)
_GAUSS2 = np.array([0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0)])


@dataclass(frozen=True, eq=False)
class Mesh:
    """Immutable simplicial mesh.

    ``nodes`` has shape ``(n_nodes, dim)``; ``cells`` has shape
    ``(n_cells, dim + 1)``.  For radial meshes the single coordinate is the
    radius and ``ambient_dim`` is the dimension N of the ball.
    """

    dim: int
    nodes: np.ndarray
    cells: np.ndarray
    boundary_nodes: np.ndarray
    ambient_dim: int = 2

    def __post_init__(self):
        object.__setattr__(self, "nodes", _frozen(np.atleast_2d(self.nodes).reshape(-1, self.dim), float))
        object.__setattr__(self, "cells", _frozen(self.cells, np.int64))
        object.__setattr__(self, "boundary_nodes", _frozen(np.unique(self.boundary_nodes), np.int64))
        if self.dim not in (1, 2):
            raise MeshError(f"dim must be 1 (radial) or 2, got {self.dim}")
        if self.dim == 1 and self.ambient_dim < 2:
            raise MeshError("radial meshes need ambient dimension N >= 2")
        if self.dim == 2:
            object.__setattr__(self, "ambient_dim", 2)
        c = self.cells
        if c.ndim != 2 or c.shape[1] != self.dim + 1:
            raise MeshError("cells must have dim+1 vertices")
        if c.min() < 0 or c.max() >= self.n_nodes:
            raise MeshError("cell references a missing node")
        if any(len(set(row)) != len(row) for row in c.tolist()):
            raise MeshError("cell with repeated vertex")
        if np.any(self.cell_volumes <= 0):
            raise MeshError("degenerate or inverted cell")

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_cells(self) -> int:
        return self.cells.shape[0]

    @property
    def is_radial(self) -> bool:
        return self.dim == 1

    @cached_property
    def interior_nodes(self) -> np.ndarray:
        mask = np.ones(self.n_nodes, bool)
        mask[self.boundary_nodes] = False
        return _frozen(np.flatnonzero(mask))

    @cached_property
    def h(self) -> float:
        """Largest edge length."""
        x = self.nodes[self.cells]
        if self.is_radial:
            return float(np.max(np.abs(x[:, 1, 0] - x[:, 0, 0])))
        e = np.concatenate([x[:, 1] - x[:, 0], x[:, 2] - x[:, 1], x[:, 0] - x[:, 2]])
        return float(np.max(np.linalg.norm(e, axis=1)))

    @cached_property
    def _signed_area(self) -> np.ndarray:
        x = self.nodes[self.cells]
        d1 = x[:, 1] - x[:, 0]
        d2 = x[:, 2] - x[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    @cached_property
    def cell_volumes(self) -> np.ndarray:
        """Cell measures (weighted by |S^{N-1}| r^{N-1} for radial meshes)."""
        if self.is_radial:
            r = self.nodes[self.cells, 0]
            N = self.ambient_dim
            vol = sphere_area(N) * (r[:, 1] ** N - r[:, 0] ** N) / N
            return _frozen(vol)
        return _frozen(self._signed_area)

    @cached_property
    def centroids(self) -> np.ndarray:
        return _frozen(self.nodes[self.cells].mean(axis=1))

    @cached_property
    def basis_grads(self) -> np.ndarray:
        """Gradients of the local basis functions, shape (n_cells, dim+1, dim)."""
        x = self.nodes[self.cells]
        if self.is_radial:
            h = x[:, 1, 0] - x[:, 0, 0]
            g = np.stack([-1.0 / h, 1.0 / h], axis=1)[:, :, None]
            return _frozen(g)
        area2 = 2.0 * self._signed_area
        # gradient of barycentric lambda_i is rot(x_k - x_j) / (2 area)
        g = np.empty((self.n_cells, 3, 2))
        for i, (j, k) in enumerate(((1, 2), (2, 0), (0, 1))):
            e = x[:, k] - x[:, j]
            g[:, i, 0] = -e[:, 1] / area2
            g[:, i, 1] = e[:, 0] / area2
        return _frozen(g)

    @cached_property
    def quadrature(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(points (m, q, dim), weights (m, q), basis values (q, dim+1)).

        Triangles use the 3-point interior rule; radial cells use 2-point
        Gauss with the r^{N-1} weight folded into ``weights``.
        """
        x = self.nodes[self.cells]
        if self.is_radial:
            phi = np.stack([1.0 - _GAUSS2, _GAUSS2], axis=1)
            pts = np.einsum("qk,mkd->mqd", phi, x)
            h = x[:, 1, 0] - x[:, 0, 0]
            r = pts[:, :, 0]
            w = 0.5 * h[:, None] * sphere_area(self.ambient_dim) * r ** (self.ambient_dim - 1)
            return _frozen(pts), _frozen(w), _frozen(phi)
        pts = np.einsum("qk,mkd->mqd", _TRI_BARY, x)
        w = self.cell_volumes[:, None] * _TRI_W[None, :]
        return _frozen(pts), _frozen(w), _frozen(_TRI_BARY)

    @cached_property
    def mass_matrix(self) -> sp.csr_matrix:
        """Consistent mass matrix assembled with the mesh quadrature."""
        _, w, phi = self.quadrature
        loc = np.einsum("mq,qi,qj->mij", w, phi, phi)
        return assemble_matrix(self, loc)

    @cached_property
    def stiffness_matrix(self) -> sp.csr_matrix:
        g = self.basis_grads
        loc = np.einsum("m,mid,mjd->mij", self.cell_volumes, g, g)
        return assemble_matrix(self, loc)

    def cell_gradients(self, values: np.ndarray) -> np.ndarray:
        """Constant gradient per cell of the P1 function with nodal ``values``."""
        return np.einsum("mk,mkd->md", np.asarray(values)[self.cells], self.basis_grads)

    def at_quadrature(self, values: np.ndarray) -> np.ndarray:
        """Values of a P1 function at the quadrature points, shape (m, q)."""
        _, _, phi = self.quadrature
        return np.asarray(values)[self.cells] @ phi.T

    def vertex_test(self, predicate) -> np.ndarray:
        """Indices of nodes whose coordinates satisfy ``predicate``."""
        return np.flatnonzero(predicate(self.nodes))


def assemble_matrix(mesh: Mesh, local: np.ndarray) -> sp.csr_matrix:
    """Sum cellwise (m, k, k) blocks into a global CSR matrix."""
    c = mesh.cells
    k = c.shape[1]
    rows = np.repeat(c, k, axis=1).ravel()
    cols = np.tile(c, (1, k)).ravel()
    A = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(mesh.n_nodes,) * 2)
    return A.tocsr()


def assemble_vector(mesh: Mesh, local: np.ndarray) -> np.ndarray:
    """Sum cellwise (m, k) contributions into a nodal vector."""
    return np.bincount(mesh.cells.ravel(), weights=np.asarray(local).ravel(), minlength=mesh.n_nodes)


@dataclass(frozen=True, eq=False)
class FeFunction:
    """P1 function given by its nodal values on ``mesh``."""

    mesh: Mesh
    values: np.ndarray

    def __post_init__(self):
        v = _frozen(self.values, float)
        if v.shape != (self.mesh.n_nodes,):
            raise MeshError(f"expected {self.mesh.n_nodes} nodal values, got shape {v.shape}")
        object.__setattr__(self, "values", v)

    def gradients(self) -> np.ndarray:
        return self.mesh.cell_gradients(self.values)

    def __mul__(self, c: float) -> "FeFunction":
        return FeFunction(self.mesh, c * self.values)

    __rmul__ = __mul__

    def __neg__(self) -> "FeFunction":
        return FeFunction(self.mesh, -self.values)

    def boundary_max(self) -> float:
        return float(np.max(np.abs(self.values[self.mesh.boundary_nodes]), initial=0.0))

    @classmethod
    def zeros(cls, mesh: Mesh) -> "FeFunction":
        return cls(mesh, np.zeros(mesh.n_nodes))


def build_square_mesh(n: int, length: float = 1.0) -> Mesh:
    """Structured triangulation of [0, length]^2 with ``2 n^2`` cells.

    Every square is cut along the same diagonal, so all triangles are
    right-angled (nonobtuse).
    """
    if n < 1:
        raise MeshError("square mesh needs n >= 1")
    t = np.linspace(0.0, length, n + 1)
    X, Y = np.meshgrid(t, t, indexing="xy")
    nodes = np.column_stack([X.ravel(), Y.ravel()])
    idx = np.arange((n + 1) ** 2).reshape(n + 1, n + 1)
    a = idx[:-1, :-1].ravel()
    b = idx[:-1, 1:].ravel()
    c = idx[1:, 1:].ravel()
    d = idx[1:, :-1].ravel()
    cells = np.concatenate([np.column_stack([a, b, c]), np.column_stack([a, c, d])])
    tol = 1e-12 * length
    on_bdry = (
        (nodes[:, 0] < tol) | (nodes[:, 0] > length - tol) | (nodes[:, 1] < tol) | (nodes[:, 1] > length - tol)
    )
    return Mesh(2, nodes, cells, np.flatnonzero(on_bdry))


def build_radial_mesh(N: int, r_out: float, n: int) -> Mesh:
    """Uniform radial grid on [0, r_out] for the ball of R^N.

    Only the outer node carries a Dirichlet condition; r = 0 is free.
    """
    if N < 2:
        raise MeshError("ambient dimension N must be >= 2")
    if r_out <= 0:
        raise MeshError("r_out must be positive")
    if n < 2:
        raise MeshError("radial mesh needs n >= 2")
    r = np.linspace(0.0, r_out, n + 1)
    cells = np.column_stack([np.arange(n), np.arange(1, n + 1)])
    return Mesh(1, r[:, None], cells, [n], ambient_dim=N)


def refine(mesh: Mesh) -> Mesh:
    """Uniform refinement: midpoint split (radial) or red refinement (triangles)."""
    if mesh.is_radial:
        r = mesh.nodes[:, 0]
        n = mesh.n_cells
        return build_radial_mesh(mesh.ambient_dim, float(r.max()), 2 * n)
    c = mesh.cells
    edges = np.concatenate([c[:, [0, 1]], c[:, [1, 2]], c[:, [2, 0]]])
    key = np.sort(edges, axis=1)
    uniq, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    inv = inv.ravel()
    mid = mesh.n_nodes + np.arange(len(uniq))
    nodes = np.concatenate([mesh.nodes, 0.5 * (mesh.nodes[uniq[:, 0]] + mesh.nodes[uniq[:, 1]])])
    m = mesh.n_cells
    m01, m12, m20 = mid[inv[:m]], mid[inv[m : 2 * m]], mid[inv[2 * m :]]
    v0, v1, v2 = c[:, 0], c[:, 1], c[:, 2]
    cells = np.concatenate(
        [
            np.column_stack([v0, m01, m20]),
            np.column_stack([m01, v1, m12]),
            np.column_stack([m20, m12, v2]),
            np.column_stack([m01, m12, m20]),
        ]
    )
    bmask = np.zeros(mesh.n_nodes, bool)
    bmask[mesh.boundary_nodes] = True
    # an edge is on the boundary iff it belongs to exactly one cell
    bedge = counts == 1
    new_bdry = np.concatenate([np.flatnonzero(bmask), mid[bedge]])
    return Mesh(2, nodes, cells, new_bdry)


def interpolate(mesh: Mesh, f, zero_boundary: bool = True) -> FeFunction:
    """Nodal P1 interpolant of the callable ``f(x)`` with x of shape (n, dim)."""
    v = np.asarray(f(mesh.nodes), dtype=float).reshape(mesh.n_nodes)
    if zero_boundary:
        v = v.copy()
        v[mesh.boundary_nodes] = 0.0
    return FeFunction(mesh, v)


def grad_p_norm(u: FeFunction, p: float) -> float:
    """``||grad u||_p``; exact for P1 since the gradient is cellwise constant."""
    if not 1.0 < p < np.inf:
        raise ValueError("need 1 < p < inf")
    g = np.linalg.norm(u.gradients(), axis=1)
    return float(np.dot(u.mesh.cell_volumes, g**p) ** (1.0 / p))


def integrate(f, mesh: Mesh) -> float:
    """Integrate ``f(x)`` over the mesh with its quadrature rule.

    ``f`` receives the quadrature points with shape (m, q, dim) and must
    return an array of shape (m, q) (or something broadcastable to it).
    """
    pts, w, _ = mesh.quadrature
    vals = np.broadcast_to(np.asarray(f(pts), dtype=float), w.shape)
    return float(np.sum(w * vals))


def lp_norm_at_quadrature(mesh: Mesh, vals: np.ndarray, q: float) -> float:
    _, w, _ = mesh.quadrature
    return float(np.sum(w * np.abs(vals) ** q) ** (1.0 / q))


# -- plain text dumps ------------------------------------------------------------


def write_mesh(mesh: Mesh, path, header: str | None = None) -> None:
    """Mesh dump: "dim n_nodes n_cells [N]", nodes, cells, boundary indices."""
    lines = []
    if header:
        lines.extend("# " + h for h in header.splitlines())
    extra = f" {mesh.ambient_dim}" if mesh.is_radial else ""
    lines.append(f"{mesh.dim} {mesh.n_nodes} {mesh.n_cells}{extra}")
    lines.extend(" ".join(repr(float(c)) for c in row) for row in mesh.nodes)
    lines.extend(" ".join(str(int(i)) for i in row) for row in mesh.cells)
    lines.append(" ".join(str(int(i)) for i in mesh.boundary_nodes))
    Path(path).write_text("\n".join(lines) + "\n")


def read_mesh(path) -> Mesh:
    rows = [ln.split() for ln in Path(path).read_text().splitlines() if ln.strip() and not ln.startswith("#")]
    head = [int(t) for t in rows[0]]
    dim, nn, nc = head[:3]
    N = head[3] if len(head) > 3 else 2
    nodes = np.array([[float(t) for t in r] for r in rows[1 : 1 + nn]])
    cells = np.array([[int(t) for t in r] for r in rows[1 + nn : 1 + nn + nc]])
    bdry = [int(t) for r in rows[1 + nn + nc :] for t in r]
    return Mesh(dim, nodes, cells, bdry, ambient_dim=N)


def write_solution(u: FeFunction, path, header: str | None = None) -> None:
    lines = []
    if header:
        lines.extend("# " + h for h in header.splitlines())
    lines.extend(f"{i} {v!r}" for i, v in enumerate(u.values.tolist()))
    Path(path).write_text("\n".join(lines) + "\n")


def read_solution(mesh: Mesh, path) -> FeFunction:
    vals = np.zeros(mesh.n_nodes)
    for ln in Path(path).read_text().splitlines():
        if not ln.strip() or ln.startswith("#"):
            continue
        i, v = ln.split()
        vals[int(i)] = float(v)
    return FeFunction(mesh, vals)
