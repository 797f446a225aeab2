"""Batch front end: configuration parsing, pipeline orchestration, artifacts.

Configuration files use ``key = value`` lines with optional ``[section]``
headers (section names become dotted key prefixes).  Scalar expressions
for profiles, wall shapes and the Jacobian come from a small fixed
grammar: sums of products of numbers, ``pi``, the free variable (``x``,
``y``, ``c`` or ``r`` depending on the slot), powers thereof, and
``cos(...)``/``sin(...)``/``exp(...)`` of such expressions.  Unknown keys
are errors, never silently ignored.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .deform import (
    BoundaryShape,
    DeformConfig,
    deform,
    inscribed_target_grid,
    normalized_rho,
    push_forward,
)
from .grid import GridSpec, ScalarField, write_field_csv
from .models import (
    BaseState,
    build_boussinesq_base,
    build_euler_base,
    build_gs_base,
)
from .profiles import (
    Profile,
    SeparableG,
    SeparableGTerm,
    write_profile_csv,
)
from .verify import (
    VerificationReport,
    eos_check,
    hypothesis_report,
    range_check,
    residual_composed,
    residual_target,
    shear_deviation,
)


class ConfigParseError(ValueError):
    """Configuration file problem, annotated with the offending line."""


# ---------------------------------------------------------------------------
# Tiny expression grammar
# ---------------------------------------------------------------------------


class _ExprParser:
    """Recursive-descent parser for the fixed scalar grammar.

    Supports + - * / ^ (and ** as a synonym), unary minus, parentheses,
    numbers, ``pi``, one free variable and the functions cos, sin, exp.
    """

    FUNCTIONS = {"cos": np.cos, "sin": np.sin, "exp": np.exp}

    def __init__(self, text: str, var: str):
        self.text = text
        self.var = var
        self.pos = 0

    def parse(self):
        node = self._sum()
        self._skip()
        if self.pos != len(self.text):
            raise ConfigParseError(
                f"unexpected character {self.text[self.pos]!r} in expression {self.text!r}"
            )
        return node

    def _skip(self):
        while self.pos < len(self.text) and self.text[self.pos].isspace():
            self.pos += 1

    def _peek(self):
        self._skip()
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def _sum(self):
        node = self._product()
        while True:
            ch = self._peek()
            if not ch or ch not in "+-":
                break
            self.pos += 1
            rhs = self._product()
            node = (lambda a, b: (lambda v: a(v) + b(v)))(node, rhs) if ch == "+" else (
                lambda a, b: (lambda v: a(v) - b(v))
            )(node, rhs)
        return node

    def _product(self):
        node = self._power()
        while True:
            ch = self._peek()
            if not ch or ch not in "*/" or self.text.startswith("**", self.pos):
                break
            self.pos += 1
            rhs = self._power()
            node = (lambda a, b: (lambda v: a(v) * b(v)))(node, rhs) if ch == "*" else (
                lambda a, b: (lambda v: a(v) / b(v))
            )(node, rhs)
        return node

    def _power(self):
        base = self._atom()
        self._skip()
        if self.text.startswith("**", self.pos) or self._peek() == "^":
            self.pos += 2 if self.text.startswith("**", self.pos) else 1
            exponent = self._power()
            return lambda v: base(v) ** exponent(v)
        return base

    def _atom(self):
        ch = self._peek()
        if ch == "(":
            self.pos += 1
            node = self._sum()
            if self._peek() != ")":
                raise ConfigParseError(f"unbalanced parenthesis in {self.text!r}")
            self.pos += 1
            return node
        if ch == "-":
            self.pos += 1
            inner = self._atom()
            return lambda v: -inner(v)
        if ch == "+":
            self.pos += 1
            return self._atom()
        if ch.isdigit() or ch == ".":
            start = self.pos
            while self.pos < len(self.text) and (
                self.text[self.pos].isdigit()
                or self.text[self.pos] in ".eE"
                or (self.text[self.pos] in "+-" and self.text[self.pos - 1] in "eE")
            ):
                self.pos += 1
            value = float(self.text[start : self.pos])
            return lambda v, value=value: value * np.ones_like(np.asarray(v, dtype=float))
        if ch.isalpha():
            start = self.pos
            while self.pos < len(self.text) and self.text[self.pos].isalpha():
                self.pos += 1
            name = self.text[start : self.pos]
            if name == "pi":
                return lambda v: np.pi * np.ones_like(np.asarray(v, dtype=float))
            if name == self.var:
                return lambda v: np.asarray(v, dtype=float)
            if name in self.FUNCTIONS:
                if self._peek() != "(":
                    raise ConfigParseError(f"{name} needs parentheses in {self.text!r}")
                self.pos += 1
                inner = self._sum()
                if self._peek() != ")":
                    raise ConfigParseError(f"unbalanced parenthesis in {self.text!r}")
                self.pos += 1
                fn = self.FUNCTIONS[name]
                return lambda v, fn=fn, inner=inner: fn(inner(v))
            raise ConfigParseError(
                f"unknown symbol {name!r} in expression {self.text!r} "
                f"(the free variable here is {self.var!r})"
            )
        raise ConfigParseError(f"cannot parse expression {self.text!r}")


def parse_expression(text: str, var: str):
    """Compile an expression string into a vectorized callable of one variable."""
    return _ExprParser(text, var).parse()


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

_DEFAULTS = {
    "model": "euler",
    "grid.nx": 64,
    "grid.ny": 65,
    "grid.lx": 2.0 * np.pi,
    "grid.y_lo": None,  # model-dependent default
    "grid.y_hi": None,
    "profiles.v0": "1",
    "profiles.theta0": "-c",
    "profiles.theta": None,
    "profiles.c0": "c",
    "profiles.psi0": None,
    "boundary.b_bot": "0",
    "boundary.b_top": "0",
    "rho.expression": "1",
    "deform.tol_iter": 1e-10,
    "deform.max_iters": 60,
    "output.directory": "out",
}

_KEY_TYPES = {
    "model": str,
    "grid.nx": int,
    "grid.ny": int,
    "grid.lx": float,
    "grid.y_lo": float,
    "grid.y_hi": float,
    "profiles.v0": str,
    "profiles.theta0": str,
    "profiles.theta": str,
    "profiles.c0": str,
    "profiles.psi0": str,
    "boundary.b_bot": str,
    "boundary.b_top": str,
    "rho.expression": str,
    "deform.tol_iter": float,
    "deform.max_iters": int,
    "output.directory": str,
}


@dataclass
class RunConfig:
    """Validated run settings with the raw key table retained."""

    keys: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.keys[key]

    def get(self, key, default=None):
        return self.keys.get(key, default)


def parse_config(path) -> RunConfig:
    """Read a key = value file; unknown keys and bad values are errors."""
    path = Path(path)
    if not path.exists():
        raise ConfigParseError(f"configuration file {path} does not exist")
    keys = dict(_DEFAULTS)
    section = ""
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            continue
        if "=" not in line:
            raise ConfigParseError(f"{path}:{lineno}: expected key = value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        full = f"{section}.{key}" if section else key
        if full not in _KEY_TYPES:
            raise ConfigParseError(f"{path}:{lineno}: unknown key {full!r}")
        caster = _KEY_TYPES[full]
        value = value.strip().strip('"').strip("'")
        try:
            keys[full] = caster(value)
        except ValueError as exc:
            raise ConfigParseError(f"{path}:{lineno}: bad value for {full}: {exc}") from None
    cfg = RunConfig(keys)
    if cfg["model"] not in ("euler", "boussinesq", "gs"):
        raise ConfigParseError(f"unknown model {cfg['model']!r}")
    return cfg


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------


def _grid_from_config(cfg: RunConfig) -> GridSpec:
    y_lo = cfg.get("grid.y_lo")
    y_hi = cfg.get("grid.y_hi")
    if y_lo is None:
        y_lo = 0.5 if cfg["model"] == "gs" else 0.0
    if y_hi is None:
        y_hi = 1.0
    return GridSpec(cfg["grid.nx"], cfg["grid.ny"], cfg["grid.lx"], y_lo, y_hi)


def build_state(cfg: RunConfig) -> BaseState:
    grid = _grid_from_config(cfg)
    model = cfg["model"]
    if model == "euler":
        v0 = parse_expression(cfg["profiles.v0"], "y")(grid.y)
        return build_euler_base(grid, np.broadcast_to(v0, (grid.ny,)).copy())
    if model == "boussinesq":
        if cfg.get("profiles.psi0"):
            psi0 = parse_expression(cfg["profiles.psi0"], "y")(grid.y)
        else:
            v0 = parse_expression(cfg["profiles.v0"], "y")(grid.y)
            v0 = np.broadcast_to(v0, (grid.ny,)).copy()
            psi0 = -np.concatenate(
                [[0.0], np.cumsum(0.5 * (v0[1:] + v0[:-1]) * grid.hy)]
            )
        knots = np.linspace(psi0.min() - 0.1, psi0.max() + 0.1, 4 * grid.ny)
        theta0_fn = parse_expression(cfg["profiles.theta0"], "c")
        theta0 = Profile(knots, theta0_fn(knots))
        return build_boussinesq_base(grid, np.asarray(psi0, dtype=float), theta0)
    # gs
    if cfg.get("profiles.psi0"):
        psi0 = parse_expression(cfg["profiles.psi0"], "r")(grid.y)
    else:
        psi0 = (grid.y ** 2 - grid.y_lo ** 2) / (grid.y_hi ** 2 - grid.y_lo ** 2)
    lo, hi = float(np.min(psi0)), float(np.max(psi0))
    knots = np.linspace(lo - 0.05 * (hi - lo), hi + 0.05 * (hi - lo), 4 * grid.ny)
    c0_fn = parse_expression(cfg["profiles.c0"], "c")
    C0 = Profile(knots, c0_fn(knots))
    return build_gs_base(grid, np.asarray(psi0, dtype=float), C0)


def build_deform_config(cfg: RunConfig, state: BaseState, log=None):
    grid = state.grid
    b_bot = parse_expression(cfg["boundary.b_bot"], "x")(grid.x)
    b_top = parse_expression(cfg["boundary.b_top"], "x")(grid.x)
    boundary = BoundaryShape(
        grid,
        np.broadcast_to(b_bot, (grid.nx,)).copy(),
        np.broadcast_to(b_top, (grid.nx,)).copy(),
    )
    rho_vals = _rho_values(cfg["rho.expression"], grid)
    rho, factor = normalized_rho(grid, rho_vals, boundary)
    if log is not None and abs(factor - 1.0) > 1e-14:
        log(f"normalized the Jacobian prescription by factor {factor:.12g}")
    G = None
    if cfg["model"] == "boussinesq" and cfg.get("profiles.theta"):
        knots = state.F0.knots
        theta_fn = parse_expression(cfg["profiles.theta"], "c")
        dense = np.linspace(knots[0], knots[-1], 4 * len(knots))
        theta = Profile(dense, theta_fn(dense))
        G = SeparableG(
            (
                SeparableGTerm(
                    w_samples=grid.y.copy(),
                    theta=Profile(dense, theta.eval(dense, 1)),
                    w_fn=lambda y: np.asarray(y, dtype=float),
                ),
            )
        )
    return DeformConfig(
        rho=rho,
        boundary=boundary,
        G=G,
        tol_iter=cfg["deform.tol_iter"],
        max_iters=cfg["deform.max_iters"],
    )


def _rho_values(expression: str, grid: GridSpec) -> np.ndarray:
    """Evaluate a sum-of-products Jacobian expression on the grid.

    Each additive term may mix x-factors and y-factors; the grammar is
    applied factor-wise so products like cos(x)*sin(pi*y) separate.
    """
    X, Y = grid.meshgrid()
    total = np.zeros_like(X)
    for term, sign in _split_terms(expression):
        vals = np.ones_like(X) * sign
        for factor in _split_factors(term):
            if "x" in _free_names(factor):
                vals = vals * parse_expression(factor, "x")(X)
            else:
                vals = vals * parse_expression(factor, "y")(Y)
        total += vals
    return total


def _free_names(expr: str):
    names = set()
    token = ""
    for ch in expr + " ":
        if ch.isalpha():
            token += ch
        else:
            if token and token not in ("cos", "sin", "exp", "pi"):
                names.add(token)
            token = ""
    return names


def _split_terms(expression: str):
    terms = []
    depth = 0
    current = ""
    sign = 1.0
    for ch in expression:
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
        if depth == 0 and ch in "+-" and current.strip():
            terms.append((current, sign))
            sign = 1.0 if ch == "+" else -1.0
            current = ""
            continue
        if depth == 0 and ch in "+-" and not current.strip():
            sign = sign * (1.0 if ch == "+" else -1.0)
            continue
        current += ch
    if current.strip():
        terms.append((current, sign))
    return terms


def _split_factors(term: str):
    factors = []
    depth = 0
    current = ""
    for ch in term:
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
        if depth == 0 and ch == "*":
            factors.append(current)
            current = ""
            continue
        current += ch
    factors.append(current)
    return [f.strip() for f in factors if f.strip()]


PLOT_SCRIPT = """\
#!/usr/bin/env python3
# Render stream-function contours of the base and deformed states.
# Reads the CSV artifacts written next to this script.
import csv
from pathlib import Path

import numpy as np
import matplotlib.pyplot as plt

here = Path(__file__).parent


def load(name):
    data = np.loadtxt(here / name, delimiter=",", skiprows=1)
    xs = np.unique(data[:, 0]); ys = np.unique(data[:, 1])
    return xs, ys, data[:, 2].reshape(len(ys), len(xs))


fig, axes = plt.subplots(1, 2, figsize=(11, 4), sharey=True)
for ax, name, title in ((axes[0], "base.csv", "base state"),
                        (axes[1], "psi_target.csv", "deformed state")):
    xs, ys, vals = load(name)
    ax.contour(xs, ys, vals, levels=21)
    ax.set_title(title)
    ax.set_xlabel("x")
axes[0].set_ylabel("y")
fig.tight_layout()
fig.savefig(here / "contours.png", dpi=150)
print("wrote", here / "contours.png")
"""


def run(cfg: RunConfig, out_dir=None, log=print) -> int:
    """Full pipeline: base, deformation, verification, artifact export.

    Exit status: 0 converged and all checks passed, 2 non-convergence,
    1 hard error (raised to the caller).
    """
    out = Path(out_dir or cfg["output.directory"])
    out.mkdir(parents=True, exist_ok=True)
    state = build_state(cfg)
    dconf = build_deform_config(cfg, state, log=log)
    result = deform(state, dconf)

    write_field_csv(state.psi0_field(), out / "base.csv")
    write_field_csv(result.potentials.eta, out / "eta.csv")
    write_field_csv(result.potentials.phi, out / "phi.csv")
    write_profile_csv(result.F, out / "F.csv")
    with open(out / "iterations.log", "w") as fh:
        for line in result.log_lines():
            fh.write(line + "\n")

    report = hypothesis_report(state)
    res_field, res_sup = residual_composed(state, result)
    report.add("composed_residual", res_sup, tol=max(10 * dconf.tol_iter, 1e-8))
    report.add("jacobian_defect", result.diagnostics["jacobian_defect"],
               tol=max(10 * dconf.tol_iter, 1e-8))
    report.add(
        "boundary_constant",
        max(abs(result.diagnostics["boundary_mean_bot"]),
            abs(result.diagnostics["boundary_mean_top"])),
        tol=1e-6,
    )
    report.add("F_drift", result.diagnostics["F_drift"], passed=None)
    report.add("iterations", float(result.iterations), passed=result.converged)

    if result.converged:
        tgrid = inscribed_target_grid(state.grid, dconf.boundary)
        psi, _ = push_forward(state, result, tgrid)
        write_field_csv(psi, out / "psi_target.csv")
        report.add("target_residual", residual_target(state, result, tgrid), passed=None)
        ok, note = range_check(psi, state.c_bot, state.c_top)
        report.add("range_check", 1.0 if ok else 0.0, passed=ok, note=note)
        flat = np.allclose(dconf.boundary.b_bot, 0) and np.allclose(dconf.boundary.b_top, 0)
        if flat:
            report.add("shear_deviation", shear_deviation(psi), passed=None)
        if state.model == "euler":
            # composed vorticity must be single-valued over the stream
            # function; measured on interior rows, where equation rows live
            g = state.grid
            interior = GridSpec(g.nx, g.ny - 2, g.Lx, g.y_lo + g.hy, g.y_hi - g.hy)
            vort = ScalarField(
                interior, res_field.values[:, 1:-1] + result.F_rows[None, 1:-1]
            )
            psi0_int = ScalarField(interior, state.psi0_field().values[:, 1:-1])
            report.add(
                "eos_vorticity",
                eos_check(psi0_int, vort),
                tol=max(10 * res_sup, 1e-8),
            )

    (out / "report.json").write_text(report.to_json())
    (out / "plot_result.py").write_text(PLOT_SCRIPT)
    for line in result.log_lines():
        log(line)
    log(f"wrote artifacts to {out}")
    if not result.converged:
        return 2
    return 0 if report.all_passed else 2


def run_base(cfg: RunConfig, out_dir=None, log=print) -> int:
    out = Path(out_dir or cfg["output.directory"])
    out.mkdir(parents=True, exist_ok=True)
    state = build_state(cfg)
    write_field_csv(state.psi0_field(), out / "base.csv")
    write_profile_csv(state.F0, out / "F.csv")
    report = hypothesis_report(state)
    (out / "report.json").write_text(report.to_json())
    log(f"wrote base-state artifacts to {out}")
    return 0 if report.all_passed else 2


def run_verify(cfg: RunConfig, out_dir=None, log=print) -> int:
    out = Path(out_dir or cfg["output.directory"])
    out.mkdir(parents=True, exist_ok=True)
    state = build_state(cfg)
    report = hypothesis_report(state)
    psi0 = state.psi0_field()
    report.add("shear_deviation_base", shear_deviation(psi0), tol=1e-12)
    ok, note = range_check(psi0, state.c_bot, state.c_top)
    report.add("range_check", 1.0 if ok else 0.0, passed=ok, note=note)
    (out / "report.json").write_text(report.to_json())
    log(report.to_json())
    return 0 if report.all_passed else 2


def sweep(cfg: RunConfig, parameter: str, values, out_dir=None, log=print) -> int:
    """Run the pipeline over a list of values for one numeric config key."""
    if parameter not in _KEY_TYPES or _KEY_TYPES[parameter] not in (int, float):
        raise ConfigParseError(f"sweep parameter {parameter!r} is not a numeric key")
    out = Path(out_dir or cfg["output.directory"])
    out.mkdir(parents=True, exist_ok=True)
    workers = int(os.environ.get("STEADY_DEFORM_THREADS", "0")) or None

    def one(value):
        keys = dict(cfg.keys)
        keys[parameter] = _KEY_TYPES[parameter](value)
        sub = RunConfig(keys)
        try:
            state = build_state(sub)
            dconf = build_deform_config(sub, state)
            result = deform(state, dconf)
            return {
                "value": value,
                "converged": result.converged,
                "iterations": result.iterations,
                "final_ratio": result.diagnostics["cauchy_ratio"],
                "composed_residual": result.diagnostics["composed_residual"],
                "jacobian_defect": result.diagnostics["jacobian_defect"],
                "error": "",
            }
        except Exception as exc:  # per-run failures recorded, sweep continues
            return {
                "value": value, "converged": False, "iterations": 0,
                "final_ratio": float("nan"), "composed_residual": float("nan"),
                "jacobian_defect": float("nan"), "error": str(exc),
            }

    if workers and len(values) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(one, values))
    else:
        rows = [one(v) for v in values]

    table = out / "sweep.csv"
    with open(table, "w") as fh:
        fh.write("value,converged,iterations,final_ratio,composed_residual,jacobian_defect,error\n")
        for row in rows:
            fh.write(
                f"{row['value']:.17g},{int(row['converged'])},{row['iterations']},"
                f"{row['final_ratio']:.17g},{row['composed_residual']:.17g},"
                f"{row['jacobian_defect']:.17g},{row['error']}\n"
            )
    log(f"wrote sweep table to {table}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="steady-deform",
        description="Deform steady channel/pipe equilibria onto nearby domains",
    )
    parser.add_argument("command", choices=["base", "deform", "verify", "sweep"])
    parser.add_argument("--config", required=True)
    parser.add_argument("--out", default=None)
    parser.add_argument("--tol", type=float, default=None)
    parser.add_argument("--max-iters", type=int, default=None)
    parser.add_argument("--parameter", default=None, help="config key for sweep")
    parser.add_argument("--values", default=None, help="comma-separated sweep values")
    args = parser.parse_args(argv)

    try:
        cfg = parse_config(args.config)
        if args.tol is not None:
            cfg.keys["deform.tol_iter"] = args.tol
        if args.max_iters is not None:
            cfg.keys["deform.max_iters"] = args.max_iters
        if args.command == "base":
            return run_base(cfg, args.out)
        if args.command == "verify":
            return run_verify(cfg, args.out)
        if args.command == "sweep":
            if not args.parameter or args.values is None:
                print("sweep needs --parameter and --values", file=sys.stderr)
                return 1
            values = [float(v) for v in args.values.split(",") if v.strip()]
            return sweep(cfg, args.parameter, values, args.out)
        return run(cfg, args.out)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
