"""Batch driver: read an INI config, run a solve or a study, write CSV and field dumps.

Config sections::

    [grid]          dim, n
    [coefficients]  a11, a12, a22, ... (catalog specs, default identity), q,
                    f (catalog spec or "manufactured:<spec>"), b1, b2, ... (drift),
                    grad_bound (optional)
    [solver]        schedule_mode, safety_theta, picard_rtol, picard_max_iters,
                    inner_solve_rtol, max_stages, nested, inner, seed
    [study]         refinements, epsilons, h, scales

Exit codes: 0 success, 2 config error, 3 precondition failure, 4 divergence.
Failures print one line ``error <category>: <reason>`` to stderr.
"""
from __future__ import annotations

import argparse
import configparser
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .base_solver import SingularSystemError, solve_direct
from .catalog import CatalogError, Constant, parse_function
from .continuation import (
    ContinuationConfig,
    ContinuationError,
    ContinuationSolver,
    plan_schedule,
)
from .estimates import EstimatorError, estimate_constants
from .fredholm import FredholmAlternativeError, FredholmConfig, fredholm_check, solve_perturbed
from .grid import dump_field, make_grid, norm_h0
from .mollifier import MollifierError, mollification_error, orthogonality_probe
from .operators import (
    CoefficientField,
    EllipticityError,
    add,
    assemble,
    assemble_first_order,
    assemble_laplacian,
    manufactured_rhs,
)

EXIT_OK, EXIT_CONFIG, EXIT_PRECONDITION, EXIT_DIVERGENCE = 0, 2, 3, 4

log = logging.getLogger("elliptic_continuation")


class ConfigError(ValueError):
    pass


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def write_csv(path: Path, header, rows) -> None:
    lines = [",".join(header)] + [",".join(_fmt(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# -- config -----------------------------------------------------------------------


class RunConfig:
    def __init__(self, parser: configparser.ConfigParser, seed_override=None):
        self.raw = parser
        try:
            self.dim = parser.getint("grid", "dim", fallback=2)
            self.n = parser.getint("grid", "n", fallback=31)
            sv = parser["solver"] if parser.has_section("solver") else {}
            self.seed = int(seed_override if seed_override is not None else sv.get("seed", 0))
            self.solver = ContinuationConfig(
                schedule_mode=sv.get("schedule_mode", "paper"),
                safety_theta=float(sv.get("safety_theta", 0.5)),
                picard_rtol=float(sv.get("picard_rtol", 1e-10)),
                picard_max_iters=int(sv.get("picard_max_iters", 200)),
                inner_solve_rtol=float(sv.get("inner_solve_rtol", 1e-12)),
                max_stages=int(sv.get("max_stages", 64)),
                nested=str(sv.get("nested", "false")).strip().lower() in ("1", "true", "yes", "on"),
                inner=sv.get("inner", "auto"),
                seed=self.seed,
            )
        except (ValueError, KeyError) as exc:
            raise ConfigError(str(exc)) from exc
        if self.dim not in (2, 3) or self.n < 3:
            raise ConfigError(f"grid must have dim in {{2, 3}} and n >= 3, got dim={self.dim} n={self.n}")
        self.coeff = dict(parser["coefficients"]) if parser.has_section("coefficients") else {}
        self.study = dict(parser["study"]) if parser.has_section("study") else {}

    def func(self, text):
        try:
            return parse_function(text, self.dim)
        except CatalogError as exc:
            raise ConfigError(str(exc)) from exc

    def coefficients(self, grid):
        d = self.dim
        a = {}
        for i in range(d):
            for j in range(i, d):
                key = f"a{i + 1}{j + 1}"
                if key in self.coeff:
                    a[(i, j)] = self.func(self.coeff[key])
        known = {f"a{i + 1}{j + 1}" for i in range(d) for j in range(d)} | {"q", "f", "grad_bound"}
        known |= {f"b{i + 1}" for i in range(d)}
        unknown = set(self.coeff) - known
        if unknown:
            raise ConfigError(f"unknown coefficient keys: {sorted(unknown)}")
        q = self.func(self.coeff.get("q", "const:0"))
        gb = self.coeff.get("grad_bound")
        return CoefficientField.from_functions(grid, a, q, None if gb is None else float(gb))

    def drift(self):
        return [self.func(self.coeff.get(f"b{i + 1}", "const:0")) for i in range(self.dim)]

    def has_drift(self):
        return any(f"b{i + 1}" in self.coeff for i in range(self.dim))

    def rhs(self, coeffs, drift=None):
        text = self.coeff.get("f", "manufactured:bubble:1")
        if text.startswith("manufactured"):
            _, _, spec = text.partition(":")
            u_star = self.func(spec or "bubble:1")
            return manufactured_rhs(coeffs, u_star, drift), u_star
        return coeffs.grid.sample(self.func(text)), None

    def floats(self, key, default):
        try:
            return [float(v) for v in self.study.get(key, default).split(",") if v.strip()]
        except ValueError as exc:
            raise ConfigError(f"[study] {key}: {exc}") from exc


def load_config(path, seed=None) -> RunConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return RunConfig(parser, seed)


# -- subcommands ------------------------------------------------------------------


def run_solve(cfg: RunConfig, out: Path, oracle=False) -> int:
    grid = make_grid(cfg.dim, cfg.n)
    coeffs = cfg.coefficients(grid)
    L = assemble(coeffs)
    f, u_star = cfg.rhs(coeffs)
    cfg.solver.oracle = oracle
    solver = ContinuationSolver(L, cfg.solver)
    u, report = solver.solve(f)
    dump_field(u, out / "solution.txt")
    (out / "solve_report.csv").write_text(report.to_csv(), encoding="utf-8")
    (out / "constants.csv").write_text(report.constants.csv_header() + "\n" + report.constants.csv_row() + "\n",
                                       encoding="utf-8")
    rows = [("residual_vs_L", report.final_residual_vs_L)]
    if u_star is not None:
        rows.append(("error_vs_manufactured_h0", norm_h0(u - grid.sample(u_star))))
    if oracle:
        ud = solve_direct(L, f)
        rows.append(("rel_error_vs_direct_h0", norm_h0(u - ud) / max(norm_h0(ud), 1e-300)))
    write_csv(out / "summary.csv", ("quantity", "value"), rows)
    return EXIT_OK


def run_constants(cfg: RunConfig, out: Path, oracle=False) -> int:
    grid = make_grid(cfg.dim, cfg.n)
    L = assemble(cfg.coefficients(grid))
    rep = estimate_constants(L, assemble_laplacian(grid), cfg.seed)
    (out / "constants.csv").write_text(rep.csv_header() + "\n" + rep.csv_row() + "\n", encoding="utf-8")
    (out / "constants.txt").write_text(rep.to_keyvalue(), encoding="utf-8")
    return EXIT_OK


def run_schedule(cfg: RunConfig, out: Path, oracle=False) -> int:
    grid = make_grid(cfg.dim, cfg.n)
    L = assemble(cfg.coefficients(grid))
    rep = estimate_constants(L, assemble_laplacian(grid), cfg.seed)
    s = plan_schedule(rep, "paper", cfg.solver.safety_theta, cfg.solver.max_stages)
    write_csv(out / "schedule.csv", ("stage", "s_start", "s_end", "c3_prime"),
              [(k, s[k - 1], s[k], rep.c3_prime) for k in range(1, len(s))])
    return EXIT_OK


def run_convergence(cfg: RunConfig, out: Path, oracle=False) -> int:
    ns = [int(v) for v in cfg.floats("refinements", "15,31,63")]
    rows = []
    prev = None
    for n in ns:
        grid = make_grid(cfg.dim, n)
        coeffs = cfg.coefficients(grid)
        f, u_star = cfg.rhs(coeffs)
        if u_star is None:
            raise ConfigError("convergence study needs f = manufactured:<spec>")
        solver = ContinuationSolver(assemble(coeffs), cfg.solver)
        u, _ = solver.solve(f)
        err = norm_h0(u - grid.sample(u_star))
        order = "" if prev is None else math.log2(prev / err)
        rows.append((n, grid.h, err, order))
        prev = err
    header = ("n", "h", "error_h0", "order") if len(rows) > 1 else ("n", "h", "error_h0")
    write_csv(out / "convergence.csv", header, [r if len(rows) > 1 else r[:3] for r in rows])
    return EXIT_OK


def run_mollifier_demo(cfg: RunConfig, out: Path, oracle=False) -> int:
    grid = make_grid(cfg.dim, cfg.n)
    h = grid.sample(cfg.func(cfg.study.get("h", "sinprod:1")))
    rows = []
    for eps in cfg.floats("epsilons", "0.2,0.1,0.05"):
        try:
            rows.append((eps, mollification_error(h, eps), orthogonality_probe(h, eps)))
        except MollifierError as exc:
            raise ConfigError(str(exc)) from exc
    write_csv(out / "mollify.csv", ("epsilon", "error_h0", "gradient_energy"), rows)
    return EXIT_OK


def run_fredholm(cfg: RunConfig, out: Path, oracle=False) -> int:
    grid = make_grid(cfg.dim, cfg.n)
    coeffs = cfg.coefficients(grid)
    L = assemble(coeffs)
    drift = cfg.drift() if cfg.has_drift() else [Constant(0.1)] + [Constant(0.0)] * (cfg.dim - 1)
    rows = []
    fcfg = FredholmConfig(continuation=cfg.solver, seed=cfg.seed)
    for scale in cfg.floats("scales", "0,0.5,1"):
        comps = [lambda *x, b=b, s=scale: s * b(*x) for b in drift]
        P = assemble_first_order(comps, grid)
        f, _ = cfg.rhs(coeffs, comps)
        check = fredholm_check(L, P, cfg.seed)
        u, info = solve_perturbed(L, P, f, fcfg, return_info=True)
        row = [scale, check.sigma_min, info["iterations"], info["residual"]]
        if oracle:
            ud = solve_direct(add(L, P), f)
            row.append(norm_h0(u - ud) / max(norm_h0(ud), 1e-300))
        rows.append(row)
    header = ["scale", "sigma_min", "iterations", "residual"] + (["rel_error_vs_direct_h0"] if oracle else [])
    write_csv(out / "fredholm.csv", header, rows)
    return EXIT_OK


COMMANDS = {
    "solve": run_solve,
    "constants": run_constants,
    "convergence": run_convergence,
    "mollify": run_mollifier_demo,
    "fredholm": run_fredholm,
    "schedule": run_schedule,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="elliptic-continuation", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, type=Path)
        sp.add_argument("--out", type=Path, default=Path("."))
        sp.add_argument("--oracle", action="store_true", help="cross-check against a direct sparse solve")
        sp.add_argument("--seed", type=int, default=None)
    return p


def _fail(code, category, exc) -> int:
    reason = " ".join(str(exc).split())
    print(f"error {category}: {reason}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.seed)
        args.out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, args.out, args.oracle)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", exc)
    except (EllipticityError, SingularSystemError, FredholmAlternativeError) as exc:
        return _fail(EXIT_PRECONDITION, "precondition", exc)
    except ContinuationError as exc:
        code = EXIT_PRECONDITION if exc.category == "precondition" else EXIT_DIVERGENCE
        return _fail(code, exc.category, exc)
    except EstimatorError as exc:
        return _fail(EXIT_DIVERGENCE, "divergence", exc)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
