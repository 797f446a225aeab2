"""Streamline-coordinate machinery for non-stagnant shear-type base states.

For a monotone base stream function psi0(y) the streamlines are the grid
rows, which makes the travel time, the streamline projector and the
recovery of a potential from its streamwise derivative exact per Fourier
mode.  The curvature identities and the derivative of streamline
integrals are also provided for general fields as diagnostics; those
march interpolated level-set contours.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from skimage import measure

from .grid import (
    FieldInterpolant,
    GridSpec,
    ScalarField,
    d1_matrix,
    d2_matrix,
    derive,
    field_from_y_profile,
)
from .profiles import Profile


class StagnationError(ValueError):
    """The base stream function has a vanishing gradient somewhere."""


@dataclass(frozen=True)
class StreamGeometry:
    """Monotone base stream function and derived streamline data.

    Attributes
    ----------
    grid : GridSpec
    psi0 : array over y, strictly monotone values of the stream function.
    dpsi0 : array over y, its wall-normal derivative (nowhere zero).
    mu : Profile of the travel time mu(c) = Lx / |psi0'(y(c))|.
    y_of_c : Profile inverting c = psi0(y).
    """

    grid: GridSpec
    psi0: np.ndarray
    dpsi0: np.ndarray
    mu: Profile
    y_of_c: Profile

    @property
    def Lx(self) -> float:
        return self.grid.Lx

    @property
    def c_bot(self) -> float:
        return float(self.psi0[0])

    @property
    def c_top(self) -> float:
        return float(self.psi0[-1])

    def psi0_field(self) -> ScalarField:
        return field_from_y_profile(self.grid, self.psi0)


def build_stream_geometry(grid: GridSpec, psi0: np.ndarray, dpsi0: np.ndarray) -> StreamGeometry:
    psi0 = np.asarray(psi0, dtype=float)
    dpsi0 = np.asarray(dpsi0, dtype=float)
    if psi0.shape != (grid.ny,) or dpsi0.shape != (grid.ny,):
        raise ValueError("psi0 and dpsi0 must be sampled on the wall-normal nodes")
    if np.min(np.abs(dpsi0)) <= 0.0 or np.any(dpsi0[0] * dpsi0 <= 0):
        raise StagnationError(
            "psi0' changes sign or vanishes: the base state has a stagnation point"
        )
    mu = Profile(psi0, grid.Lx / np.abs(dpsi0))
    y_of_c = Profile(psi0, grid.y)
    return StreamGeometry(grid, psi0, dpsi0, mu, y_of_c)


def travel_time(geo: StreamGeometry, c: float) -> float:
    """Period of a parcel on the streamline {psi0 = c}."""
    return float(geo.mu.eval(c))


def partial_s(geo: StreamGeometry, f: ScalarField) -> ScalarField:
    """Streamwise derivative: grad^perp(psi0) . grad f = -psi0'(y) f_x."""
    fx = derive(f, 1, 0)
    return ScalarField(f.grid, -geo.dpsi0[None, :] * fx.values)


def partial_psi0(geo: StreamGeometry, f: ScalarField) -> ScalarField:
    """Cross-streamline derivative: f_y / psi0'(y)."""
    fy = derive(f, 0, 1)
    return ScalarField(f.grid, fy.values / geo.dpsi0[None, :])


def project(geo: StreamGeometry, f: ScalarField) -> Profile:
    """Streamline projector: the ds-weighted average on each streamline.

    For shear-type bases the weight is constant on each streamline, so
    the projector reduces to the x-average of each row.
    """
    return Profile(geo.psi0, f.values.mean(axis=0))


def deviation(geo: StreamGeometry, f: ScalarField) -> ScalarField:
    """Fluctuating part Q f = f - P f (zero streamline averages)."""
    return ScalarField(f.grid, f.values - f.values.mean(axis=0)[None, :])


def recover_phi(geo: StreamGeometry, Phi: ScalarField, tol_avg: float | None = None) -> ScalarField:
    """Invert the streamwise derivative on zero-streamline-average data.

    Solves -psi0'(y) phi_x = Phi per x-mode; requires every streamline
    average of Phi to vanish (to ``tol_avg``), and returns the phi with
    zero streamline averages.  Nyquist content is annihilated by the
    streamwise derivative and is therefore projected out here as well.
    """
    grid = Phi.grid
    scale = max(1.0, Phi.max_abs())
    if tol_avg is None:
        tol_avg = 1e-9 * scale
    row_means = Phi.values.mean(axis=0)
    worst = float(np.max(np.abs(row_means)))
    if worst > tol_avg:
        raise ValueError(
            f"streamline averages of the data reach {worst:.3e} (tol {tol_avg:.3e}); "
            "the streamwise derivative is not solvable for a periodic potential"
        )
    coeffs = np.fft.rfft(Phi.values, axis=0)
    k = grid.wavenumbers()
    phi_hat = np.zeros_like(coeffs)
    denom = -1j * np.outer(k[1:], geo.dpsi0)
    phi_hat[1:, :] = coeffs[1:, :] / denom
    phi_hat[0, :] = 0.0
    if grid.nx % 2 == 0:
        phi_hat[-1, :] = 0.0
    vals = np.fft.irfft(phi_hat, n=grid.nx, axis=0)
    return ScalarField(grid, vals)


def angle(geo: StreamGeometry, pts) -> np.ndarray:
    """Angle coordinate along streamlines, 2*pi*x/Lx from the x = 0 reference."""
    pts = np.asarray(pts, dtype=float)
    x = pts[..., 0] if pts.ndim > 1 else pts[0]
    return 2.0 * np.pi * np.mod(x, geo.Lx) / geo.Lx


# ---------------------------------------------------------------------------
# General-field diagnostics: curvature identities and contour integrals
# ---------------------------------------------------------------------------


class CurvatureResult(NamedTuple):
    kappa: ScalarField
    defect: ScalarField
    flagged: np.ndarray


def _derive_general(f: ScalarField, ox: int, oy: int, periodic_x: bool) -> np.ndarray:
    """Derivative values; optionally finite-difference (non-periodic) in x."""
    if periodic_x:
        return derive(f, ox, oy).values
    vals = f.values
    if ox == 1:
        vals = d1_matrix(f.grid.nx, f.grid.hx) @ vals
    elif ox == 2:
        vals = d2_matrix(f.grid.nx, f.grid.hx) @ vals
    elif ox != 0:
        raise ValueError("x-derivative order beyond 2 not supported here")
    if oy == 1:
        vals = vals @ d1_matrix(f.grid.ny, f.grid.hy).T
    elif oy == 2:
        vals = vals @ d2_matrix(f.grid.ny, f.grid.hy).T
    elif oy != 0:
        raise ValueError("y-derivative order beyond 2 not supported here")
    return vals


def curvature_identities(
    psi: ScalarField,
    periodic_x: bool = True,
    stagnation_rtol: float = 1e-8,
) -> CurvatureResult:
    """Streamline curvature and the trace-identity defect.

    Returns kappa = (tau . H . tau)/|grad psi| and the defect
    (n . H . n) - (lap psi - |grad psi| kappa), where H is the Hessian of
    psi, n the unit normal and tau the unit tangent of the level sets.
    Nodes with |grad psi| below ``stagnation_rtol`` of its maximum are
    flagged; kappa there is computed with a floored gradient magnitude.
    """
    px = _derive_general(psi, 1, 0, periodic_x)
    py = _derive_general(psi, 0, 1, periodic_x)
    h11 = _derive_general(psi, 2, 0, periodic_x)
    h22 = _derive_general(psi, 0, 2, periodic_x)
    h12 = _derive_general(psi, 1, 1, periodic_x)
    g = np.hypot(px, py)
    gmax = np.max(g)
    flagged = g < stagnation_rtol * gmax
    g_safe = np.where(flagged, stagnation_rtol * gmax, g)
    nx_, ny_ = px / g_safe, py / g_safe
    tx, ty = -ny_, nx_
    tau_H_tau = tx * tx * h11 + 2 * tx * ty * h12 + ty * ty * h22
    n_H_n = nx_ * nx_ * h11 + 2 * nx_ * ny_ * h12 + ny_ * ny_ * h22
    lap = h11 + h22
    kappa = tau_H_tau / g_safe
    defect = n_H_n - (lap - g_safe * kappa)
    return CurvatureResult(
        ScalarField(psi.grid, kappa), ScalarField(psi.grid, defect), flagged
    )


def _point_interpolator(f: ScalarField, periodic_x: bool):
    if periodic_x:
        interp = FieldInterpolant(f)
        return lambda xs, ys: interp(xs, ys)
    rgi = RegularGridInterpolator(
        (f.grid.x, f.grid.y), f.values, method="cubic", bounds_error=False, fill_value=None
    )
    return lambda xs, ys: rgi(np.column_stack([xs, ys]))


def extract_contour(psi: ScalarField, c: float, periodic_x: bool = True, nsamples: int = 512):
    """Ordered, closed polyline of the level set {psi = c}.

    Channel-spanning level sets of periodic fields are closed through the
    period; interior loops are returned as-is.  The polyline is resampled
    to ``nsamples`` points, uniformly in chord length, with the first
    point repeated at the end.
    """
    grid = psi.grid
    vals = psi.values
    if periodic_x:
        vals = np.vstack([vals, vals[:1, :]])
    contours = measure.find_contours(vals, c)
    if not contours:
        raise ValueError(f"level set psi = {c} does not intersect the grid")
    contour = max(contours, key=lambda arr: arr.shape[0])
    x = contour[:, 0] * grid.hx
    y = grid.y_lo + contour[:, 1] * grid.hy
    closed = np.allclose(contour[0], contour[-1])
    if not closed:
        if not periodic_x:
            raise ValueError("open level set: the band is not resolvable as a loop")
        order = np.argsort(x)
        x, y = x[order], y[order]
        x = np.append(x, x[0] + grid.Lx)
        y = np.append(y, y[0])
    seg = np.hypot(np.diff(x), np.diff(y))
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    if arc[-1] <= 0:
        raise ValueError(f"degenerate level set at psi = {c}")
    s_new = np.linspace(0.0, arc[-1], nsamples + 1)
    xs = np.interp(s_new, arc, x)
    ys = np.interp(s_new, arc, y)
    return xs, ys


def contour_integral_ds(
    psi: ScalarField,
    integrand: ScalarField,
    c: float,
    periodic_x: bool = True,
    nsamples: int = 512,
) -> float:
    """Line integral of ``integrand`` with respect to ds = dl / |grad psi|."""
    xs, ys = extract_contour(psi, c, periodic_x, nsamples)
    px = ScalarField(psi.grid, _derive_general(psi, 1, 0, periodic_x))
    py = ScalarField(psi.grid, _derive_general(psi, 0, 1, periodic_x))
    fvals = _point_interpolator(integrand, periodic_x)(xs, ys)
    gvals = np.hypot(
        _point_interpolator(px, periodic_x)(xs, ys),
        _point_interpolator(py, periodic_x)(xs, ys),
    )
    gmax = max(np.max(np.hypot(px.values, py.values)), 1e-300)
    if np.min(gvals) < 1e-6 * gmax:
        raise StagnationError(
            f"level set psi = {c} passes through a near-stagnation region"
        )
    dl = np.hypot(np.diff(xs), np.diff(ys))
    w = 0.5 * (fvals[:-1] / gvals[:-1] + fvals[1:] / gvals[1:])
    return float(np.sum(w * dl))


def contour_travel_time(psi: ScalarField, c: float, periodic_x: bool = True, nsamples: int = 512) -> float:
    """General line-integral travel time: the ds-length of the level set."""
    ones = ScalarField(psi.grid, np.ones_like(psi.values))
    return contour_integral_ds(psi, ones, c, periodic_x, nsamples)


def streamline_integral_derivative(
    psi: ScalarField,
    f: ScalarField,
    c: float,
    periodic_x: bool = True,
    nsamples: int = 512,
) -> float:
    """d/dc of the ds-integral of f over {psi = c} via the closed formula.

    The integrand is (grad psi . grad f - f (lap psi - 2 kappa |grad psi|))
    / |grad psi|^2, integrated with respect to ds.
    """
    px = _derive_general(psi, 1, 0, periodic_x)
    py = _derive_general(psi, 0, 1, periodic_x)
    fx = _derive_general(f, 1, 0, periodic_x)
    fy = _derive_general(f, 0, 1, periodic_x)
    kappa, _, flagged = curvature_identities(psi, periodic_x)
    lap = _derive_general(psi, 2, 0, periodic_x) + _derive_general(psi, 0, 2, periodic_x)
    g2 = px * px + py * py
    g2 = np.where(flagged, np.max(g2) * 1e-12 + g2, g2)
    num = px * fx + py * fy - f.values * (lap - 2.0 * kappa.values * np.sqrt(g2))
    vals = num / g2
    # stagnation nodes sit away from any usable contour; keep their garbage
    # values out of the interpolant
    vals = np.where(flagged, 0.0, vals)
    integrand = ScalarField(psi.grid, vals)
    return contour_integral_ds(psi, integrand, c, periodic_x, nsamples)
