"""Command-line entry point: ``qlfem {solve,continue,verify,degree,study}``.

Exit codes: 0 success, 1 configuration error, 2 schedule exhausted,
3 Newton non-convergence, 4 blow-up along the path, 5 stalled path,
6 failed check (verify/degree/study).
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load_config, parse_config, validate
from .grid import write_mesh, write_solution
from .measures import mollify
from .solve import (
    NonConvergence,
    Schedule,
    ScheduleExhausted,
    SingularJacobian,
    SolverOptions,
    solve_entropy,
    tol_h,
)

log = logging.getLogger("qlfem")

EXIT_OK, EXIT_CONFIG, EXIT_SCHEDULE, EXIT_NEWTON, EXIT_BLOWUP, EXIT_STALLED, EXIT_CHECK = range(7)


def _solver_opts(cfg: RunConfig) -> SolverOptions:
    kw = {k: v for k, v in cfg.values.get("solver", {}).items()}
    return SolverOptions(**kw)


def _schedule(cfg: RunConfig) -> Schedule:
    return Schedule(**cfg.values.get("schedule", {}))


def _write(path: Path, header: str, body: str) -> None:
    path.write_text(f"# {header}\n{body}" + ("" if body.endswith("\n") else "\n"))


def _write_csv(path: Path, header: str, rows) -> None:
    buf = io.StringIO()
    buf.write(f"# {header}\n")
    w = csv.writer(buf, lineterminator="\n")
    for row in rows:
        w.writerow(row)
    path.write_text(buf.getvalue())


# -- commands --------------------------------------------------------------------


def cmd_solve(cfg: RunConfig, out: Path) -> int:
    mesh = cfg.mesh()
    fld, mu = cfg.field(mesh), cfg.measure()
    try:
        sol = solve_entropy(fld, mu, mesh, _schedule(cfg), _solver_opts(cfg))
    except ScheduleExhausted as exc:
        _write(out / "report.txt", cfg.header(), f"status: ScheduleExhausted\n{exc}\n" + "\n".join(map(str, exc.trace)))
        log.error("%s", exc)
        return EXIT_SCHEDULE
    except (NonConvergence, SingularJacobian) as exc:
        _write(out / "report.txt", cfg.header(), f"status: {type(exc).__name__}\n{exc}")
        log.error("%s", exc)
        return EXIT_NEWTON
    tol = tol_h(mesh, cfg.get("verify", "C", 1.0))
    write_solution(sol.u, out / "solution.txt", header=cfg.header())
    write_mesh(mesh, out / "mesh.txt", header=cfg.header())
    body = f"status: accepted\nfield: {fld.name}\nmeasure: {getattr(mu, 'name', type(mu).__name__)}\ntol_h: {tol:.6e}\n{sol.report()}\n"
    _write(out / "report.txt", cfg.header(), body)
    log.info("accepted at level %d, phi_norm %.6g, slack %s", sol.accepted_level, sol.phi_norm, sol.estimate_slack)
    return EXIT_OK


def cmd_continue(cfg: RunConfig, out: Path) -> int:
    from .continuation import BlowUp, PathOptions, Reached, run_fredholm_path

    mesh = cfg.mesh()
    fld, mu = cfg.field(mesh), cfg.measure()
    popts = PathOptions(solver=_solver_opts(cfg), **cfg.values.get("path", {}))
    rep = run_fredholm_path(fld, mu, mesh, popts)
    _write_csv(out / "path.csv", cfg.header(), rep.csv_rows())
    st = rep.status
    lines = [f"status: {st.name}", f"R_max: {rep.R_max:.10g}"]
    if isinstance(st, BlowUp):
        write_solution(st.candidate, out / "candidate.txt", header=cfg.header())
        lines += [f"t_star: {st.t_star:.10g}", f"limit_residual: {st.limit_residual:.6e}"]
        code = EXIT_BLOWUP
    elif isinstance(st, Reached):
        write_solution(st.u, out / "solution.txt", header=cfg.header())
        code = EXIT_OK
    else:
        lines.append(f"diagnostics: {st.diagnostics}")
        code = EXIT_STALLED
    _write(out / "report.txt", cfg.header(), "\n".join(lines))
    log.info("path status %s", st.name)
    return code


def cmd_verify(cfg: RunConfig, out: Path) -> int:
    from .benchmarks import BENCHMARKS, benchmark
    from .verify import check_energy_identity, check_entropy_inequality, check_estimate, check_weak_identity_bounded_tests

    names = cfg.get("verify", "benchmarks", "all")
    C = cfg.get("verify", "C", 1.0)
    chosen = BENCHMARKS if names == "all" else [benchmark(n.strip()) for n in names.split(",") if n.strip()]
    override = cfg.get("mesh", "n")
    rows, text, ok = [("benchmark", "cells", "check", "margin", "tolerance", "pass")], [], True
    for b in chosen:
        meshes = [b.mesh(override)] if override and "n" in cfg.raw.get("mesh", {}) else b.meshes()
        for mesh in meshes:
            fld, mu = b.field(), b.measure()
            try:
                sol = solve_entropy(fld, mu, mesh, _schedule(cfg), _solver_opts(cfg))
            except (ScheduleExhausted, NonConvergence, SingularJacobian) as exc:
                text.append(f"FAIL {b.name} cells={mesh.n_cells}: {exc}")
                rows.append((b.name, mesh.n_cells, "solve", "nan", "nan", "False"))
                ok = False
                continue
            reports = [
                check_estimate(sol, fld, mu, C),
                check_entropy_inequality(sol, fld, mu, tol=tol_h(mesh, C)),
                check_weak_identity_bounded_tests(sol, fld, mu, tol=tol_h(mesh, C)),
                check_energy_identity(sol, fld, mu, tol=tol_h(mesh, C)),
            ]
            for r in reports:
                ok &= r.passed
                text.append(f"{b.name} cells={mesh.n_cells} {r.line()}")
                rows.append((b.name, mesh.n_cells, r.name, repr(float(r.worst_margin)), repr(float(r.tolerance)), str(r.passed)))
    _write_csv(out / "verify_summary.csv", cfg.header(), rows)
    _write(out / "verify.txt", cfg.header(), "\n".join(text))
    for line in text:
        log.info("%s", line)
    return EXIT_OK if ok else EXIT_CHECK


def cmd_degree(cfg: RunConfig, out: Path) -> int:
    from .degree import BoundarySolution, DegenerateJacobian, DegreeOptions, NoStabilization, PhiBall, stabilized_degree
    from .measures import discretize_load

    mesh = cfg.mesh()
    fld, mu = cfg.field(mesh), cfg.measure()
    dopts = DegreeOptions(
        n_starts=cfg.get("degree", "n_starts", 64),
        seed=cfg.seed(),
        certified_cap=cfg.get("degree", "certified_cap", 12),
    )
    region = PhiBall(cfg.get("degree", "R", 1.0), mesh, fld.p)
    try:
        rep = stabilized_degree(fld, None, mesh, region, dopts, load=discretize_load(mu, mesh))
    except (BoundarySolution, DegenerateJacobian, NoStabilization) as exc:
        _write(out / "degree.txt", cfg.header(), f"status: {type(exc).__name__}\n{exc}")
        log.error("%s", exc)
        return EXIT_CHECK
    _write(out / "degree.txt", cfg.header(), rep.text())
    log.info("degree %d (tau_bar %g, %s)", rep.value, rep.tau_bar, rep.confidence)
    return EXIT_OK


def cmd_study(cfg: RunConfig, out: Path) -> int:
    from .verify import convergence_study, regularity_sweep, study_passes

    mesh = cfg.mesh()
    fld, mu = cfg.field(mesh), cfg.measure()
    kind = cfg.get("study", "kind", "truncation")
    if kind == "regularity":
        from .grid import build_radial_mesh, build_square_mesh

        sizes = [int(s) for s in cfg.get("study", "sizes", [16, 32, 64])]
        radial = cfg.get("mesh", "kind", "square") == "radial"
        meshes = [build_radial_mesh(cfg.ambient_dim(), cfg.get("mesh", "r_out", 1.0), n) if radial else build_square_mesh(n) for n in sizes]
        rows = regularity_sweep(fld, mu, meshes, q=cfg.get("study", "q"), schedule=_schedule(cfg), opts=_solver_opts(cfg))
        table = [("cells", "h", "grad_norm", "u_norm", "grad_p_norm")]
        table += [(r.n_cells, repr(r.h), repr(r.grad_norm), repr(r.u_norm), repr(r.grad_p_norm)) for r in rows]
        _write_csv(out / "study.csv", cfg.header(), table)
        g = [r.grad_norm for r in rows]
        ok = (max(g) - min(g)) <= 0.1 * max(g)
        return EXIT_OK if ok else EXIT_CHECK
    levels = cfg.get("study", "levels", [2.0**k for k in range(1, 13)])
    if kind == "constant":
        seq = [mu for _ in levels]
        dds = [0.0 for _ in levels]
    else:
        seq = [mollify(mu, lv) for lv in levels]
        dds = None
    rows = convergence_study(fld, seq, mu, mesh, schedule=_schedule(cfg), opts=_solver_opts(cfg), data_distances=dds)
    table = [("index", "level", "data_distance", "phi_distance", "trunc_k1", "trunc_k2")]
    table += [(r.index, repr(float(lv)), repr(r.data_distance), repr(r.phi_distance), *map(repr, r.truncation_distances)) for r, lv in zip(rows, levels)]
    _write_csv(out / "study.csv", cfg.header(), table)
    if kind == "constant":
        ok = max(r.phi_distance for r in rows) <= 10 * _solver_opts(cfg).newton_tol
    else:
        ok = study_passes(rows)
    return EXIT_OK if ok else EXIT_CHECK


COMMANDS = {"solve": cmd_solve, "continue": cmd_continue, "verify": cmd_verify, "degree": cmd_degree, "study": cmd_study}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="qlfem", description="Quasilinear elliptic problems with measure data (P1 FEM).")
    ap.add_argument("--version", action="version", version=f"qlfem {__version__}")
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", type=Path, help="INI configuration file")
    ap.add_argument("--out", type=Path, default=Path("qlfem-out"), help="output directory")
    ap.add_argument("--seed", type=int, help="override run.seed")
    ap.add_argument("--mesh-n", type=int, help="override mesh.n")
    ap.add_argument("--quiet", action="store_true", help="only report errors")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.INFO, format="%(levelname)s: %(message)s")
    try:
        cfg = load_config(args.config) if args.config else parse_config("")
        if args.seed is not None:
            cfg.set("run", "seed", args.seed)
        if args.mesh_n is not None:
            cfg.set("mesh", "n", args.mesh_n)
        validate(cfg)
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "config.ini").write_text(cfg.emit())
    return COMMANDS[args.command](cfg, args.out)


if __name__ == "__main__":
    sys.exit(main())
