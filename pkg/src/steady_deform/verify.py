"""Numerical verification of rigidity properties and scheme hypotheses.

These checks are empirical falsification harnesses: each returns measured
values against stated tolerances, never proofs.  Tolerances follow the
iteration tolerance and the second-order discretization error of the
grid, with measured constants reported rather than assumed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .deform import DeformResult, composed_hessian, composed_residual_field, push_forward
from .elliptic import SeparableOperator, apply_operator, rayleigh_min
from .grid import GridSpec, ScalarField, derive, field_from_function, integrate, laplacian
from .models import BaseState
from .profiles import Profile, compose


# ---------------------------------------------------------------------------
# Report container
# ---------------------------------------------------------------------------


@dataclass
class CheckResult:
    value: float
    tol: float | None
    passed: bool | None
    note: str = ""


@dataclass
class VerificationReport:
    checks: dict = field(default_factory=dict)

    def add(self, name: str, value: float, tol: float | None = None,
            passed: bool | None = None, note: str = ""):
        if name in self.checks:
            raise ValueError(f"duplicate check name {name!r}")
        if passed is None and tol is not None:
            passed = abs(value) <= tol
        if passed is not None:
            passed = bool(passed)
        if tol is not None:
            tol = float(tol)
        self.checks[name] = CheckResult(float(value), tol, passed, note)

    @property
    def all_passed(self) -> bool:
        return all(c.passed is not False for c in self.checks.values())

    def to_dict(self) -> dict:
        return {
            name: {"value": c.value, "tol": c.tol, "pass": c.passed}
            for name, c in self.checks.items()
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), indent=2, **kw)


# ---------------------------------------------------------------------------
# Residuals
# ---------------------------------------------------------------------------


def residual_composed(state: BaseState, result: DeformResult):
    """Governing-equation defect measured on the base rectangle.

    Returns the residual field and its sup norm over interior wall-normal
    rows (wall rows carry boundary conditions, not equation rows).
    """
    return composed_residual_field(
        state, result.config, result.potentials, result.F_rows
    )


def residual_target(
    state: BaseState,
    result: DeformResult,
    target_grid: GridSpec,
    wall_margin: float | None = None,
) -> float:
    """Equation defect on the deformed domain via map inversion.

    Differentiates the pushed-forward stream function on the target grid
    and measures the sup norm over nodes at least two cells away from
    the (curved) domain walls.  ``wall_margin`` overrides the default
    two-cell distance with a fixed physical one; refinement studies need
    that, because the defect grows toward the walls and a sup over an
    h-dependent region has an h-independent floor.
    """
    psi, outside = push_forward(state, result, target_grid)
    if np.any(outside[:, 2:-2]):
        raise ValueError("target grid leaves the deformed domain")
    cfg = result.config
    lap = laplacian(psi)
    vals = lap.values.copy()
    if not np.allclose(state.op.b2, 0.0):
        _, R = target_grid.meshgrid()
        vals += state.op.b2_fn(R) * derive(psi, 0, 1).values
    F_target = compose(result.F, psi)
    G = cfg.G if cfg.G is not None else state.G0
    g_vals = G.eval_field(psi, 0)
    res = vals - F_target.values - g_vals.values

    X, Y = target_grid.meshgrid()
    base = state.grid
    wall_bot = base.y_lo + cfg.boundary.eval_bot(X)
    wall_top = base.y_hi + cfg.boundary.eval_top(X)
    margin = 2.0 * target_grid.hy if wall_margin is None else wall_margin
    inside = (Y >= wall_bot + margin) & (Y <= wall_top - margin)
    inside[:, :2] = False  # centered stencils only
    inside[:, -2:] = False
    if not np.any(inside):
        raise ValueError("no target nodes inside the requested wall margin")
    return float(np.max(np.abs(res[inside])))


def shear_deviation(psi: ScalarField) -> float:
    """Largest pointwise deviation of psi from its own streamwise average."""
    means = psi.values.mean(axis=0)
    return float(np.max(np.abs(psi.values - means[None, :])))


def eos_check(psi: ScalarField, q: ScalarField, bins: int = 64) -> float:
    """Single-valuedness score of the relation q = Q(psi).

    psi values are split into quantile bins of their distinct levels;
    within each bin the residual of a linear-in-psi fit is measured.
    Bins holding at most two distinct levels are fitted exactly, so
    streamline-aligned data scores at the residual level; genuinely
    multivalued data scores at the scatter amplitude.
    """
    p = psi.values.ravel()
    qv = q.values.ravel()
    levels = np.unique(p)
    if len(levels) <= 2 * bins:
        # quantile-bin the distinct levels: at most ceil(m/bins) per bin
        per_bin = int(np.ceil(len(levels) / bins))
        level_bin = np.arange(len(levels)) // per_bin
        idx = level_bin[np.searchsorted(levels, p)]
    else:
        edges = np.quantile(p, np.linspace(0.0, 1.0, bins + 1))
        edges[-1] = np.nextafter(edges[-1], np.inf)
        idx = np.clip(np.searchsorted(edges, p, side="right") - 1, 0, bins - 1)
    worst = 0.0
    for b in np.unique(idx):
        mask = idx == b
        pb, qb = p[mask], qv[mask]
        if np.ptp(pb) > 0:
            coeffs = np.polyfit(pb, qb, 1)
            resid = qb - np.polyval(coeffs, pb)
        else:
            resid = qb - qb.mean()
        worst = max(worst, float(np.max(np.abs(resid))))
    return worst


def range_check(psi: ScalarField, c_bot: float, c_top: float, tol: float = 1e-10):
    """Interior values must lie strictly between the wall constants."""
    lo, hi = min(c_bot, c_top), max(c_bot, c_top)
    if hi - lo <= tol:
        return False, "wall constants coincide; distinct values are required"
    interior = psi.values[:, 1:-1]
    ok = bool(np.all(interior > lo - tol) and np.all(interior < hi + tol))
    return ok, ""


# ---------------------------------------------------------------------------
# Quadratic-form identity for shear bases
# ---------------------------------------------------------------------------


def shear_form_identity(grid: GridSpec, v0: np.ndarray, u: ScalarField):
    """Both sides of the shear quadratic-form identity.

    For a nowhere-vanishing shear speed v0 and any u vanishing at the
    walls: int u (lap - v0''/v0) u = -int v0^2 |grad(u / v0)|^2.
    Returns (lhs, rhs) evaluated with the discrete operators.
    """
    from .grid import d2_matrix

    lam = (d2_matrix(grid.ny, grid.hy) @ v0) / v0
    op = SeparableOperator(np.ones(grid.ny), np.ones(grid.ny), np.zeros(grid.ny), lam)
    lhs = integrate(ScalarField(grid, u.values * apply_operator(op, u).values))
    w = ScalarField(grid, u.values / np.abs(v0)[None, :])
    wx = derive(w, 1, 0).values
    wy = derive(w, 0, 1).values
    rhs = -integrate(ScalarField(grid, (v0 ** 2)[None, :] * (wx ** 2 + wy ** 2)))
    return lhs, rhs


def kerlem_check(grid: GridSpec, v0: np.ndarray, n_fields: int = 20, seed: int = 7) -> float:
    """Worst relative error of the quadratic-form identity over random
    wall-vanishing trial fields."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_fields):
        u = _random_wall_vanishing_field(grid, rng)
        lhs, rhs = shear_form_identity(grid, v0, u)
        worst = max(worst, abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-30))
    return worst


def _random_wall_vanishing_field(grid: GridSpec, rng) -> ScalarField:
    """Random smooth low-wavenumber field vanishing at both walls."""
    X, Y = grid.meshgrid()
    s = (Y - grid.y_lo) / (grid.y_hi - grid.y_lo)
    vals = np.zeros_like(X)
    for kx in range(0, 3):
        for my in range(1, 3):
            a, b = rng.standard_normal(2)
            carrier = a * np.cos(kx * 2 * np.pi * X / grid.Lx) + b * np.sin(
                kx * 2 * np.pi * X / grid.Lx
            )
            vals += carrier * np.sin(my * np.pi * s)
    vals /= max(1.0, np.max(np.abs(vals)))
    return ScalarField(grid, vals)


# ---------------------------------------------------------------------------
# Hypothesis report
# ---------------------------------------------------------------------------


def hypothesis_report(state: BaseState) -> VerificationReport:
    """Positivity, non-stagnation, travel-time and model sign conditions."""
    rep = VerificationReport()
    grid = state.grid

    lam_min = rayleigh_min(grid, state.op)
    rep.add("rayleigh_min", lam_min, passed=lam_min > 0.0,
            note="positive-definiteness of the linearized operator")

    min_dpsi = float(np.min(np.abs(state.geo.dpsi0)))
    rep.add("min_abs_dpsi0", min_dpsi, passed=min_dpsi > 0.0,
            note="non-stagnation of the base state")

    mu_max = float(np.max(state.geo.mu.values))
    rep.add("max_travel_time", mu_max, passed=np.isfinite(mu_max),
            note="bounded parcel travel time")

    lam1 = rayleigh_min(grid, SeparableOperator.laplacian(grid.ny))
    Fp = state.d_dc_rows(state.F0_rows)
    fp_lo, fp_hi = float(np.min(Fp)), float(np.max(Fp))
    window = (fp_lo > -lam1 and fp_hi < 0.0) or fp_lo > 0.0
    rep.add("stability_window_low", fp_lo, passed=window,
            note=f"profile slope within (-{lam1:.6g}, 0) or positive")
    rep.add("stability_window_high", fp_hi, passed=window, note="")

    if state.model == "boussinesq":
        theta0 = state.aux["Theta0"]
        tp = theta0.eval(state.psi0, 1)
        rep.add("theta_slope_max", float(np.max(tp)), passed=bool(np.max(tp) <= 0.0),
                note="non-positive temperature slope (shear rigidity condition)")
    if state.model == "gs":
        C0 = state.aux["C0"]
        Pi0p = state.aux["Pi0_prime"]
        r = grid.y
        pi_min = float(np.min(Pi0p.values))
        rep.add("pressure_slope_min", pi_min, passed=bool(pi_min >= 0.0),
                note="non-negative pressure slope (radial rigidity condition)")
        cc = C0.eval(state.psi0, 1) ** 2 + C0.eval(state.psi0, 0) * C0.eval(state.psi0, 2)
        cond_first = cc - r ** 2 * Pi0p.eval(state.psi0, 0)
        cond_second = cc - r ** 2 * Pi0p.eval(state.psi0, 1)
        rep.add("swirl_pressure_first_order_max", float(np.max(cond_first)),
                passed=None, note="(C C')' - r^2 Pi' (reported, both variants)")
        rep.add("swirl_pressure_second_order_max", float(np.max(cond_second)),
                passed=None, note="(C C')' - r^2 Pi'' (reported, both variants)")

    rep.add("base_residual", state.base_residual, tol=1e-8)
    return rep


def momentum_residual_shear(state: BaseState) -> float:
    """Sup norm of the stratified momentum balance on the base shear.

    Checks omega u-perp = grad P + theta e2 with theta, P rebuilt from
    the profiles, using target-grid differentiation.
    """
    from .models import reconstruct_boussinesq_fields

    if state.model != "boussinesq":
        raise ValueError("momentum check applies to the stratified model")
    grid = state.grid
    psi = state.psi0_field()
    Theta0 = state.aux["Theta0"]
    G = state.F0.antiderivative()
    theta, P = reconstruct_boussinesq_fields(psi, Theta0, G)
    lap = laplacian(psi).values
    px = derive(psi, 1, 0).values
    py = derive(psi, 0, 1).values
    Px = derive(P, 1, 0).values
    Py = derive(P, 0, 1).values
    r1 = -lap * px - Px
    r2 = -lap * py - Py - theta.values
    return float(np.max(np.hypot(r1, r2)))


def momentum_residual_composed(state: BaseState, result: DeformResult) -> float:
    """Momentum defect of the deformed stratified state, composed form.

    With theta and P exact functions of psi, the momentum defect equals
    the scalar equation residual times the composed gradient magnitude.
    """
    res_field, _ = composed_residual_field(
        state, result.config, result.potentials, result.F_rows
    )
    comp = composed_hessian(state, result.potentials)
    gmag = np.hypot(comp.v1, comp.v2)
    vals = np.abs(res_field.values) * gmag
    return float(np.max(vals[:, 1:-1]))
