"""INI run configuration: parsing, validation, canonical emission and builders.

Schema (all sections optional; unknown sections or keys are errors)::

    [run]      seed = 0
    [problem]  field = p_laplacian | linear_diffusion | perturbed_p_laplacian
               p = 2   eps = 1e-8   lam = 0   lam_rel = <multiple of discrete lambda_1>
               absorption = 0   perturbation = 1
    [measure]  kind = density | line_charge | weak_form | point_mass | zero
               expr = constant | radial_power | first_eigenmode | sign_changing
               value = 1   s = 1   scale = 1
               endpoints = x0 y0 x1 y1   g0 = 1   g1 = 1
               w0 = 0   w1 = 0 0   x0 = 0.5 0.5   mass = 1
    [mesh]     kind = square | radial   n = 16   N = 2   r_out = 1
    [solver]   newton_tol   max_iter
    [schedule] n_max = 12   tol = 1e-4
    [path]     dt   dt_max   dt_floor   R_max   max_steps
    [degree]   R   n_starts   certified_cap
    [verify]   benchmarks = all | name,name   C = 1
    [study]    kind = truncation | constant | regularity   levels = 1 2 4 ...   q   sizes
"""
from __future__ import annotations

import configparser
import hashlib
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .grid import Mesh, build_radial_mesh, build_square_mesh
from .measures import (
    Density,
    InadmissibleMeasure,
    LineCharge,
    MeasureData,
    PointMass,
    WeakForm,
    check_admissible,
    constant_density,
    first_eigenmode_density,
    radial_power_density,
)
from .structural import (
    CoefficientField,
    StructureError,
    absorption_lower,
    linear_diffusion,
    p_laplacian,
    perturbed_p_laplacian,
    with_lower_order,
)

__all__ = ["ConfigError", "RunConfig", "SCHEMA", "parse_config", "load_config"]


class ConfigError(ValueError):
    pass


_float = float


def _int(v):
    return int(v)


def _floats(v):
    return [float(t) for t in v.replace(",", " ").split()]


def _choice(*opts):
    def f(v):
        if v not in opts:
            raise ValueError(f"expected one of {', '.join(opts)}")
        return v

    return f


def _text(v):
    return v


SCHEMA = {
    "run": {"seed": _int},
    "problem": {
        "field": _choice("p_laplacian", "linear_diffusion", "perturbed_p_laplacian"),
        "p": _float,
        "eps": _float,
        "lam": _float,
        "lam_rel": _float,
        "absorption": _float,
        "perturbation": _float,
    },
    "measure": {
        "kind": _choice("density", "line_charge", "weak_form", "point_mass", "zero"),
        "expr": _choice("constant", "radial_power", "first_eigenmode", "sign_changing"),
        "value": _float,
        "s": _float,
        "scale": _float,
        "endpoints": _floats,
        "g0": _float,
        "g1": _float,
        "w0": _float,
        "w1": _floats,
        "x0": _floats,
        "mass": _float,
    },
    "mesh": {"kind": _choice("square", "radial"), "n": _int, "N": _int, "r_out": _float},
    "solver": {"newton_tol": _float, "max_iter": _int},
    "schedule": {"n_max": _int, "tol": _float},
    "path": {"dt": _float, "dt_max": _float, "dt_floor": _float, "R_max": _float, "max_steps": _int},
    "degree": {"R": _float, "n_starts": _int, "certified_cap": _int},
    "verify": {"benchmarks": _text, "C": _float},
    "study": {"kind": _choice("truncation", "constant", "regularity"), "levels": _floats, "q": _float, "sizes": _floats},
}


def _locate(text: str, section: str, key: str | None) -> int | None:
    cur = None
    for i, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        m = re.match(r"\[(.+)\]", s)
        if m:
            cur = m.group(1).strip()
            if key is None and cur == section:
                return i
            continue
        if cur == section and key is not None and re.match(rf"{re.escape(key)}\s*[=:]", s):
            return i
    return None


@dataclass
class RunConfig:
    """Validated configuration: ``raw`` holds the string values, ``values`` the parsed ones."""

    raw: dict = field(default_factory=dict)
    values: dict = field(default_factory=dict)

    def get(self, section: str, key: str, default=None):
        return self.values.get(section, {}).get(key, default)

    def set(self, section: str, key: str, value) -> None:
        text = " ".join(repr(float(v)) if isinstance(v, float) else str(v) for v in value) if isinstance(value, (list, tuple)) else str(value)
        self.raw.setdefault(section, {})[key] = text
        self.values.setdefault(section, {})[key] = SCHEMA[section][key](text)

    def emit(self) -> str:
        parts = []
        for sec in SCHEMA:
            if sec not in self.raw:
                continue
            parts.append(f"[{sec}]")
            parts.extend(f"{k} = {self.raw[sec][k]}" for k in SCHEMA[sec] if k in self.raw[sec])
            parts.append("")
        return "\n".join(parts)

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.emit().encode()).hexdigest()[:16]

    def header(self) -> str:
        return f"qlfem {__version__} config {self.digest}"

    # -- builders --------------------------------------------------------------------

    def seed(self) -> int:
        return self.get("run", "seed", 0)

    def mesh(self) -> Mesh:
        kind = self.get("mesh", "kind", "square")
        n = self.get("mesh", "n", 16)
        if kind == "radial":
            return build_radial_mesh(self.get("mesh", "N", 2), self.get("mesh", "r_out", 1.0), n)
        return build_square_mesh(n)

    def ambient_dim(self) -> int:
        return self.get("mesh", "N", 2) if self.get("mesh", "kind", "square") == "radial" else 2

    def field(self, mesh: Mesh | None = None) -> CoefficientField:
        kind = self.get("problem", "field", "p_laplacian")
        p = self.get("problem", "p", 2.0)
        N = self.ambient_dim()
        eps = self.get("problem", "eps", 1e-8)
        lam = self.get("problem", "lam", 0.0)
        rel = self.get("problem", "lam_rel")
        if rel is not None:
            from .continuation import dirichlet_eigen

            lam = rel * float(dirichlet_eigen(mesh or self.mesh(), 1)[0][0])
        try:
            if kind == "linear_diffusion" or (kind == "p_laplacian" and p == 2.0 and eps == 0.0):
                fld = linear_diffusion(lam=lam, N=N)
            elif kind == "p_laplacian":
                fld = p_laplacian(p, eps=eps, N=N, lam=lam)
            else:
                fld = perturbed_p_laplacian(p, c=self.get("problem", "perturbation", 1.0), eps=eps, N=N, lam=lam)
            kappa = self.get("problem", "absorption", 0.0)
            if kappa:
                if lam:
                    raise ConfigError("problem: absorption and lam cannot be combined")
                (b, db), (bi, dbi) = absorption_lower(kappa)
                fld = with_lower_order(fld, b, db, bi, dbi, beta=abs(kappa), name=f"{fld.name}+absorption")
        except StructureError as exc:
            raise ConfigError(f"problem: {exc}") from exc
        return fld

    def measure(self) -> MeasureData | None:
        kind = self.get("measure", "kind", "density")
        p = self.get("problem", "p", 2.0)
        N = self.ambient_dim()
        radial = self.get("mesh", "kind", "square") == "radial"
        R = self.get("mesh", "r_out", 1.0)
        area = np.pi * R**2 if radial and N == 2 else (None if radial else 1.0)
        if kind == "zero":
            return constant_density(0.0, area)
        if kind == "point_mass":
            x0 = self.get("measure", "x0", [0.5, 0.5])
            return PointMass(tuple(x0), self.get("measure", "mass", 1.0), p, N)
        if kind == "line_charge":
            e = self.get("measure", "endpoints", [0.25, 0.5, 0.75, 0.5])
            if len(e) != 4:
                raise ConfigError("measure.endpoints needs four numbers")
            g0 = self.get("measure", "g0", 1.0)
            mu = LineCharge((e[0], e[1]), (e[2], e[3]), g0, self.get("measure", "g1", g0))
            check_admissible(mu, p, N)
            return mu
        if kind == "weak_form":
            c0 = self.get("measure", "w0", 0.0)
            c1 = np.asarray(self.get("measure", "w1", [0.0] * (1 if radial else 2)), float)
            return WeakForm(
                lambda x: np.full(np.shape(x)[:-1], c0),
                lambda x: np.broadcast_to(c1, np.shape(x)).copy(),
                w0_l1=abs(c0) * (area or 1.0),
            )
        expr = self.get("measure", "expr", "constant")
        scale = self.get("measure", "scale", 1.0)
        if expr == "constant":
            return constant_density(self.get("measure", "value", 1.0), area)
        if expr == "radial_power":
            s = self.get("measure", "s", 1.0)
            center = None if radial else (0.5, 0.5)
            ball = (N, R) if radial else None
            return radial_power_density(s, center=center, c=scale, ball=ball)
        if expr == "first_eigenmode":
            return first_eigenmode_density(radial=radial, N=N, R=R, c=scale)
        return Density(
            lambda x: scale * np.sin(2 * np.pi * x[..., 0]) * np.sin(np.pi * x[..., -1]),
            name="sign_changing",
        )


def parse_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed configuration: {exc}") from exc
    cfg = RunConfig()
    for sec in cp.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"line {_locate(text, sec, None)}: unknown section [{sec}]")
        for key, val in cp.items(sec):
            line = _locate(text, sec, key)
            if key not in SCHEMA[sec]:
                raise ConfigError(f"line {line}: unknown key {sec}.{key}")
            try:
                parsed = SCHEMA[sec][key](val.strip())
            except ValueError as exc:
                raise ConfigError(f"line {line}: invalid value for {sec}.{key}: {exc}") from exc
            cfg.raw.setdefault(sec, {})[key] = val.strip()
            cfg.values.setdefault(sec, {})[key] = parsed
    return cfg


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read configuration {path}: {exc}") from exc
    return parse_config(text)


def validate(cfg: RunConfig) -> None:
    """Build every object once so that errors surface as ConfigError."""
    try:
        mesh = cfg.mesh()
        cfg.field(mesh)
        cfg.measure()
    except InadmissibleMeasure as exc:
        raise ConfigError(f"measure: {exc}") from exc
    except (ValueError, StructureError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
