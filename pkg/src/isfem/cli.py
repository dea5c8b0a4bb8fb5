"""Command-line front end: ``isfem mesh|solve|converge``.

Exit codes: 0 success, 1 solver or study failure, 2 I/O, configuration or
mesh-generation failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .analysis import convergence_study, gradient_error, solution_error
from .cases import make_case
from .femcore import AssemblyError, BasisRule, solve
from .geometry import GeometryError
from .linalg import SolverError, SolverOptions
from .mesh import MeshError, MeshParseError, mesh_parameter, read_mesh, shape_regularity, write_mesh

EXIT_OK, EXIT_SOLVER, EXIT_CONFIG = 0, 1, 2


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    case: str = "tc1"
    r: float = 2.0
    a: float = 0.0
    k: float = 5.0
    level: int = 0
    levels: int = 5
    tol: float = 1e-10
    max_iterations: Optional[int] = None
    last_k: Optional[int] = None
    basis: str = BasisRule.CELL_PLANE.value
    mesh: Optional[str] = None
    out: Optional[str] = None

    def validate(self) -> None:
        if self.case not in ("tc1", "tc2", "flat"):
            raise ConfigError(f"unknown case {self.case!r} (expected tc1, tc2 or flat)")
        if self.level < 0:
            raise ConfigError("level must be nonnegative")
        if self.levels < 1:
            raise ConfigError("levels must be at least 1")
        if self.case == "tc1" and not (self.r > 0 and self.k > 0):
            raise ConfigError("tc1 needs r > 0 and k > 0")
        if not self.tol > 0:
            raise ConfigError("tol must be positive")
        if self.basis not in [b.value for b in BasisRule]:
            raise ConfigError(f"unknown basis rule {self.basis!r}")
        if self.last_k is not None and self.last_k < 2:
            raise ConfigError("last_k must be at least 2")

    def solver_options(self) -> SolverOptions:
        return SolverOptions(rel_tolerance=self.tol, max_iterations=self.max_iterations)


_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}
_CONVERTERS = {"float": float, "int": int, "str": str}


def _convert(key: str, value: str):
    kind = _FIELD_TYPES[key].replace("Optional[", "").rstrip("]")
    try:
        return _CONVERTERS[kind](value)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {value!r}") from None


def read_config(path: str) -> dict:
    """Parse ``key = value`` lines; '#' starts a comment."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = _convert(key, value)
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="isfem", description="Intrinsic surface finite elements")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("mesh", "generate a mesh file"),
        ("solve", "solve one level and write nodal values"),
        ("converge", "run a convergence study and write a CSV report"),
    ):
        p = sub.add_parser(name, help=help_text)
        # defaults are None so that config-file values survive unless a flag is given
        p.add_argument("--case", choices=["tc1", "tc2", "flat"])
        p.add_argument("--r", type=float)
        p.add_argument("--a", type=float)
        p.add_argument("--k", type=float)
        p.add_argument("--level", type=int)
        p.add_argument("--levels", type=int)
        p.add_argument("--tol", type=float)
        p.add_argument("--max-iterations", dest="max_iterations", type=int)
        p.add_argument("--last-k", dest="last_k", type=int)
        p.add_argument("--basis", choices=[b.value for b in BasisRule])
        p.add_argument("--mesh", help="read the mesh from this file instead of generating it")
        p.add_argument("--out", help="output path")
        p.add_argument("--config", help="file of 'key = value' lines; flags take precedence")
    return parser


def make_config(args: argparse.Namespace) -> ExperimentConfig:
    values = read_config(args.config) if args.config else {}
    for key in _FIELD_TYPES:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    cfg = ExperimentConfig(**values)
    cfg.validate()
    return cfg


def _case(cfg: ExperimentConfig):
    return make_case(cfg.case, r=cfg.r, a=cfg.a, k=cfg.k)


def _mesh_for(cfg: ExperimentConfig):
    if cfg.mesh is not None:
        return read_mesh(cfg.mesh)
    return _case(cfg).mesh_factory(cfg.level)


def _open_out(path: Optional[str]):
    if path is None or path == "-":
        return sys.stdout, False
    return open(path, "w", encoding="utf-8"), True


def cmd_mesh(cfg: ExperimentConfig) -> int:
    mesh = _mesh_for(cfg)
    out = cfg.out or f"{cfg.case}-level{cfg.level}.mesh"
    write_mesh(mesh, out)
    print(
        f"wrote {out}: vertices={mesh.n_vertices} cells={mesh.n_cells} "
        f"h={mesh_parameter(mesh):.6g} regularity={shape_regularity(mesh):.4f}"
    )
    return EXIT_OK


def cmd_solve(cfg: ExperimentConfig) -> int:
    case = _case(cfg)
    mesh = _mesh_for(cfg)
    try:
        u_h, result, system = solve(mesh, case.problem, cfg.solver_options(), BasisRule(cfg.basis))
    except SolverError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    out = cfg.out or f"{cfg.case}-level{cfg.level}.sol"
    fh, close = _open_out(out)
    try:
        fh.write("vertex_id value\n")
        for i, v in enumerate(u_h):
            fh.write(f"{i} {format(float(v), '.17g')}\n")
    finally:
        if close:
            fh.close()
    line = f"iterations={result.iterations} residual={result.residual:.3e} h={mesh_parameter(mesh):.6g}"
    if case.problem.exact is not None:
        line += f" err_sol={solution_error(u_h, case.problem.exact, mesh):.6e}"
    if case.problem.exact_gradient is not None:
        err = gradient_error(u_h, case.problem.exact_gradient, mesh, system.geometry)
        line += f" err_grad={err:.6e}"
    print(line, file=sys.stderr if fh is sys.stdout else sys.stdout)
    return EXIT_OK


def cmd_converge(cfg: ExperimentConfig) -> int:
    if cfg.levels < 2:
        raise ConfigError("converge needs at least 2 levels")
    if cfg.mesh is not None:
        raise ConfigError("converge generates its own meshes; --mesh is not supported")
    case = _case(cfg)
    report = convergence_study(case, cfg.levels, cfg.solver_options(), cfg.last_k, rule=BasisRule(cfg.basis))
    fh, close = _open_out(cfg.out)
    try:
        fh.write(report.to_csv())
    finally:
        if close:
            fh.close()
    if report.failed is not None:
        print(f"error: {report.failed}", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


COMMANDS = {"mesh": cmd_mesh, "solve": cmd_solve, "converge": cmd_converge}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = make_config(args)
        return COMMANDS[args.command](cfg)
    except (ConfigError, MeshParseError, MeshError, GeometryError, AssemblyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
