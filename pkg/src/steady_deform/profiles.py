"""One-dimensional functions of the streamline value.

A :class:`Profile` stores samples of a function of the streamline value c
on a strictly monotone knot array and interpolates them with a
monotonicity-limited cubic Hermite rule: node slopes come from
second-order centered differences (one-sided at the ends) and are then
clamped so that monotone data can never overshoot.  The centered slopes
make the interpolant reproduce quadratics exactly, which the limiter
leaves untouched away from near-degenerate slope ratios.

:class:`SeparableG` represents inhomogeneities of the separable form
``G(y, psi) = sum_m w_m(y) * theta_m(psi)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.interpolate import CubicHermiteSpline, CubicSpline

from .grid import GridSpec, ScalarField, field_from_y_profile


class ProfileRangeError(ValueError):
    """Evaluation point lies beyond the clamped extrapolation margin."""


def _limited_slopes(c: np.ndarray, v: np.ndarray) -> np.ndarray:
    h = np.diff(c)
    s = np.diff(v) / h
    d = np.empty_like(v)
    # second-order slopes: weighted centered interior, one-sided ends
    d[1:-1] = (h[1:] * s[:-1] + h[:-1] * s[1:]) / (h[1:] + h[:-1])
    d[0] = ((2 * h[0] + h[1]) * s[0] - h[0] * s[1]) / (h[0] + h[1])
    d[-1] = ((2 * h[-1] + h[-2]) * s[-1] - h[-1] * s[-2]) / (h[-1] + h[-2])
    # monotonicity limiter (Fritsch-Carlson region |d| <= 3 min|s|)
    for j in range(1, len(v) - 1):
        if s[j - 1] * s[j] <= 0.0:
            d[j] = 0.0
        else:
            cap = 3.0 * min(abs(s[j - 1]), abs(s[j]))
            if d[j] * s[j] < 0.0:
                d[j] = 0.0
            elif abs(d[j]) > cap:
                d[j] = np.sign(s[j]) * cap
    for j, sj in ((0, s[0]), (len(v) - 1, s[-1])):
        if d[j] * sj < 0.0:
            d[j] = 0.0
        elif abs(d[j]) > 3.0 * abs(sj):
            d[j] = 3.0 * sj
    return d


@dataclass(frozen=True)
class Profile:
    """Sampled function of the streamline value with limited-cubic interpolation.

    Knots are stored in ascending order.  Evaluation clamps within a small
    extrapolation margin (default 1% of the knot range) and raises beyond it.
    """

    knots: np.ndarray
    values: np.ndarray
    margin_frac: float = 0.01
    _spline: CubicHermiteSpline = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        c = np.asarray(self.knots, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if c.ndim != 1 or c.shape != v.shape or len(c) < 4:
            raise ValueError("profile needs matching 1-D knot/value arrays (>= 4 knots)")
        dc = np.diff(c)
        if np.all(dc > 0):
            pass
        elif np.all(dc < 0):
            c, v = c[::-1].copy(), v[::-1].copy()
        else:
            raise ValueError("profile knots must be strictly monotone")
        c.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "knots", c)
        object.__setattr__(self, "values", v)
        spline = CubicHermiteSpline(c, v, _limited_slopes(c, v))
        object.__setattr__(self, "_spline", spline)

    @classmethod
    def from_function(cls, knots: np.ndarray, fn: Callable, **kw) -> "Profile":
        knots = np.asarray(knots, dtype=float)
        return cls(knots, fn(knots), **kw)

    @property
    def c_min(self) -> float:
        return float(self.knots[0])

    @property
    def c_max(self) -> float:
        return float(self.knots[-1])

    @property
    def range(self) -> float:
        return self.c_max - self.c_min

    def _clamp(self, c):
        margin = self.margin_frac * self.range
        c = np.asarray(c, dtype=float)
        bad = (c < self.c_min - margin) | (c > self.c_max + margin)
        if np.any(bad):
            offending = np.atleast_1d(c)[np.atleast_1d(bad)][0]
            raise ProfileRangeError(
                f"value c={offending:.6g} is outside the profile range "
                f"[{self.c_min:.6g}, {self.c_max:.6g}] by more than the "
                f"{self.margin_frac:.0%} margin"
            )
        return np.clip(c, self.c_min, self.c_max)

    def eval(self, c, deriv: int = 0):
        """Value or derivative (deriv in 0..2) at c, clamped inside the margin."""
        if not 0 <= deriv <= 2:
            raise ValueError("deriv must be 0, 1 or 2")
        c_eff = self._clamp(c)
        out = self._spline(c_eff, nu=deriv)
        return float(out) if np.isscalar(c) or np.ndim(c) == 0 else out

    def __call__(self, c, deriv: int = 0):
        return self.eval(c, deriv)

    def integral(self, a: float, b: float) -> float:
        """Exact integral of the interpolant between a and b."""
        return float(self._spline.antiderivative()(b) - self._spline.antiderivative()(a))

    def cumulative(self, c, c_ref: float | None = None):
        """Exact running integral of the interpolant from c_ref."""
        if c_ref is None:
            c_ref = self.c_min
        anti = self._spline.antiderivative()
        c_eff = np.clip(np.asarray(c, dtype=float), self.c_min, self.c_max)
        return anti(c_eff) - anti(c_ref)

    def shifted(self, delta_values: np.ndarray) -> "Profile":
        return Profile(self.knots, self.values + delta_values, self.margin_frac)

    def antiderivative(self, c_ref: float | None = None) -> "Profile":
        """Profile of the running integral from c_ref (default: lowest knot)."""
        if c_ref is None:
            c_ref = self.c_min
        anti = self._spline.antiderivative()
        return Profile(self.knots, anti(self.knots) - anti(c_ref), self.margin_frac)


def compose(p: Profile, f: ScalarField, deriv: int = 0) -> ScalarField:
    """Pointwise evaluation ``p(f)`` (or a derivative of p) over a field."""
    try:
        vals = p.eval(f.values.ravel(), deriv).reshape(f.values.shape)
    except ProfileRangeError:
        margin = p.margin_frac * p.range
        over = np.maximum(f.values - p.c_max, p.c_min - f.values)
        i, j = np.unravel_index(int(np.argmax(over)), f.values.shape)
        raise ProfileRangeError(
            f"field value {f.values[i, j]:.6g} at node (i={i}, j={j}) "
            f"(x={i * f.grid.hx:.6g}, y={f.grid.y_lo + j * f.grid.hy:.6g}) exceeds "
            f"the profile range [{p.c_min:.6g}, {p.c_max:.6g}] + margin {margin:.3g}"
        ) from None
    return ScalarField(f.grid, vals)


@dataclass(frozen=True)
class SeparableGTerm:
    """One separable term ``w(y) * theta(psi)``.

    ``w_samples`` holds w on the grid's wall-normal nodes; ``w_fn``, when
    given, is the exact coefficient function used at off-node arguments
    (otherwise a cubic-spline fit of the samples is used).
    """

    w_samples: np.ndarray
    theta: Profile
    w_fn: Callable | None = None

    def w_at(self, y_nodes: np.ndarray, y_values) -> np.ndarray:
        if self.w_fn is not None:
            return self.w_fn(np.asarray(y_values, dtype=float))
        spline = CubicSpline(y_nodes, self.w_samples, extrapolate=True)
        return spline(np.asarray(y_values, dtype=float))


@dataclass(frozen=True)
class SeparableG:
    """Sum of separable terms ``G(y, psi) = sum_m w_m(y) theta_m(psi)``."""

    terms: Sequence[SeparableGTerm] = ()

    def is_empty(self) -> bool:
        return len(self.terms) == 0

    def eval_field(
        self,
        psi: ScalarField,
        d_psi: int = 0,
        y_values: np.ndarray | None = None,
    ) -> ScalarField:
        """Evaluate ``sum_m w_m(y) theta_m^(d_psi)(psi)`` on the grid.

        ``y_values`` overrides the wall-normal coordinate (an (nx, ny)
        array), which evaluates the coefficients at displaced positions.
        """
        grid = psi.grid
        out = np.zeros((grid.nx, grid.ny))
        if y_values is None:
            y_values = np.broadcast_to(grid.y, (grid.nx, grid.ny))
        for term in self.terms:
            w = term.w_at(grid.y, y_values)
            theta = term.theta.eval(psi.values.ravel(), d_psi).reshape(psi.values.shape)
            out += w * theta
        return ScalarField(grid, out)

    def d_psi_profile_on(self, psi_y: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Array over y of ``sum_m w_m(y) theta_m'(psi(y))`` (used for the potential)."""
        out = np.zeros_like(np.asarray(y, dtype=float))
        for term in self.terms:
            out += term.w_at(y, y) * term.theta.eval(psi_y, 1)
        return out


def eval_G(G: SeparableG, psi_field: ScalarField, d_psi: int = 0) -> ScalarField:
    """Functional wrapper around :meth:`SeparableG.eval_field`."""
    return G.eval_field(psi_field, d_psi)


# ---------------------------------------------------------------------------
# Serialization: CSV with header c,value
# ---------------------------------------------------------------------------


def write_profile_csv(p: Profile, path) -> None:
    with open(path, "w") as fh:
        fh.write("c,value\n")
        for c, v in zip(p.knots, p.values):
            fh.write(f"{c:.17g},{v:.17g}\n")


def read_profile_csv(path) -> Profile:
    data = np.loadtxt(path, delimiter=",", skiprows=1)
    return Profile(data[:, 0], data[:, 1])


def profile_on_grid(grid: GridSpec, p: Profile, psi_y: np.ndarray, deriv: int = 0) -> ScalarField:
    """Field of ``p(psi(y))`` broadcast over the periodic direction."""
    return field_from_y_profile(grid, p.eval(psi_y, deriv))
