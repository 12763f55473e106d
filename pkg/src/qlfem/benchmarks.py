"""Built-in benchmark problems (8 problems, 3 meshes each)."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .grid import Mesh, build_radial_mesh, build_square_mesh
from .measures import LineCharge, MeasureData, constant_density, radial_power_density
from .structural import CoefficientField, absorption_lower, linear_diffusion, p_laplacian, with_lower_order

__all__ = ["Benchmark", "BENCHMARKS", "benchmark", "radial_exact"]


@dataclass(frozen=True)
class Benchmark:
    name: str
    field: Callable[[], CoefficientField]
    measure: Callable[[], MeasureData]
    mesh: Callable[[int], Mesh]
    sizes: tuple

    def meshes(self):
        return [self.mesh(n) for n in self.sizes]


def _radial(n):
    return build_radial_mesh(2, 1.0, n)


def _absorbing():
    b, b_inf = absorption_lower(1.0)
    return with_lower_order(linear_diffusion(), *b, *b_inf, beta=1.0, name="diffusion+absorption")


BENCHMARKS = (
    Benchmark("radial_p2_const4", linear_diffusion, lambda: constant_density(4.0, np.pi), _radial, (16, 32, 64)),
    Benchmark("radial_p1.5_const1", lambda: p_laplacian(1.5), lambda: constant_density(1.0, np.pi), _radial, (32, 64, 128)),
    Benchmark("radial_p2_inv_r", linear_diffusion, lambda: radial_power_density(1.0, ball=(2, 1.0)), _radial, (16, 32, 64)),
    Benchmark("radial_p1.8_inv_r", lambda: p_laplacian(1.8), lambda: radial_power_density(1.0, ball=(2, 1.0)), _radial, (16, 32, 64)),
    Benchmark("square_p2_const1", linear_diffusion, lambda: constant_density(1.0, 1.0), build_square_mesh, (8, 16, 32)),
    Benchmark("square_p1.5_const1", lambda: p_laplacian(1.5), lambda: constant_density(1.0, 1.0), build_square_mesh, (8, 16, 32)),
    Benchmark("square_p2_line", linear_diffusion, lambda: LineCharge((0.25, 0.5), (0.75, 0.5)), build_square_mesh, (8, 16, 32)),
    Benchmark("square_p2_absorption", _absorbing, lambda: constant_density(10.0, 1.0), build_square_mesh, (8, 16, 32)),
)


def benchmark(name: str) -> Benchmark:
    for b in BENCHMARKS:
        if b.name == name:
            return b
    raise KeyError(f"unknown benchmark {name!r}; available: {', '.join(b.name for b in BENCHMARKS)}")


def radial_exact(p: float, f: float, N: int = 2, R: float = 1.0):
    """Exact radial solution for constant f: u(r) = (p-1)/p (f/N)^{1/(p-1)} (R^{p'} - r^{p'})."""
    pp = p / (p - 1)

    def u(r):
        r = np.asarray(r, float)
        return (p - 1) / p * (f / N) ** (1 / (p - 1)) * (R**pp - r**pp)

    return u
