"""Tensor-product grids on a periodic channel and scalar fields on them.

Conventions
-----------
The base rectangle is periodic in the first coordinate (x, period ``Lx``,
nodes ``x_i = i*Lx/nx`` with no duplicated endpoint) and wall-bounded in
the second (y, nodes ``y_j = y_lo + j*hy`` including both walls).  Field
values are stored as ``(nx, ny)`` arrays indexed ``(i, j)``.

Differentiation is trigonometric (FFT) along x and second-order finite
differences along y: centered stencils in the interior, one-sided
second-order stencils at the walls.  Quadrature is the exact periodic
rectangle rule in x times the trapezoid rule in y.

Fields are immutable value snapshots and every operation here is pure,
so they can be shared freely between concurrent workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.interpolate import CubicSpline


class GridError(ValueError):
    """Invalid grid parameters or mismatched grids."""


class InterpolationRangeError(ValueError):
    """Requested evaluation point lies outside the wall-normal range."""


@dataclass(frozen=True)
class GridSpec:
    """Tensor-product grid: periodic in x, wall-bounded in y.

    Parameters
    ----------
    nx : int
        Number of periodic nodes (even, >= 8); the endpoint x = Lx is not
        duplicated.
    ny : int
        Number of wall-normal nodes including both walls (>= 9).
    Lx : float
        Period of the x direction (default ``2*pi``).
    y_lo, y_hi : float
        Wall positions, ``y_lo < y_hi``.
    """

    nx: int
    ny: int
    Lx: float = 2.0 * np.pi
    y_lo: float = 0.0
    y_hi: float = 1.0

    def __post_init__(self):
        if self.nx < 8 or self.nx % 2 != 0:
            raise GridError(f"nx must be even and >= 8, got {self.nx}")
        if self.ny < 9:
            raise GridError(f"ny must be >= 9, got {self.ny}")
        if not self.Lx > 0:
            raise GridError(f"Lx must be positive, got {self.Lx}")
        if not self.y_lo < self.y_hi:
            raise GridError(f"need y_lo < y_hi, got [{self.y_lo}, {self.y_hi}]")

    @property
    def hx(self) -> float:
        return self.Lx / self.nx

    @property
    def hy(self) -> float:
        return (self.y_hi - self.y_lo) / (self.ny - 1)

    @property
    def x(self) -> np.ndarray:
        return np.arange(self.nx) * self.hx

    @property
    def y(self) -> np.ndarray:
        return self.y_lo + np.arange(self.ny) * self.hy

    def meshgrid(self):
        """Return (X, Y) coordinate arrays of shape (nx, ny)."""
        return np.meshgrid(self.x, self.y, indexing="ij")

    @property
    def volume(self) -> float:
        return self.Lx * (self.y_hi - self.y_lo)

    def wavenumbers(self) -> np.ndarray:
        """Physical wavenumbers of the real FFT along x."""
        return 2.0 * np.pi / self.Lx * np.arange(self.nx // 2 + 1)


@dataclass(frozen=True)
class ScalarField:
    """Real-valued field sampled on a :class:`GridSpec`.

    ``values[i, j]`` is the value at ``(x_i, y_j)``.  The array is frozen
    at construction; use :meth:`with_values` to derive a new field.
    """

    grid: GridSpec
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != (self.grid.nx, self.grid.ny):
            raise GridError(
                f"values shape {vals.shape} does not match grid "
                f"({self.grid.nx}, {self.grid.ny})"
            )
        if not np.all(np.isfinite(vals)):
            raise GridError("field values must be finite")
        vals = vals.copy()
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def with_values(self, values: np.ndarray) -> "ScalarField":
        return ScalarField(self.grid, values)

    def __add__(self, other):
        return self.with_values(self.values + _coerce(other, self.grid))

    def __sub__(self, other):
        return self.with_values(self.values - _coerce(other, self.grid))

    def __mul__(self, other):
        return self.with_values(self.values * _coerce(other, self.grid))

    __radd__ = __add__
    __rmul__ = __mul__

    def __neg__(self):
        return self.with_values(-self.values)

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.values)))


@dataclass(frozen=True)
class VectorField:
    """Pair of scalar components along the periodic and wall-normal axes."""

    u: ScalarField
    v: ScalarField

    def __post_init__(self):
        if self.u.grid != self.v.grid:
            raise GridError("vector components must share one grid")

    @property
    def grid(self) -> GridSpec:
        return self.u.grid


def _coerce(other, grid: GridSpec) -> np.ndarray:
    if isinstance(other, ScalarField):
        if other.grid != grid:
            raise GridError("operands live on different grids")
        return other.values
    return np.asarray(other, dtype=float)


def field_from_function(grid: GridSpec, fn) -> ScalarField:
    """Sample ``fn(x, y)`` (vectorized) on the grid nodes."""
    X, Y = grid.meshgrid()
    return ScalarField(grid, fn(X, Y))


def field_from_y_profile(grid: GridSpec, values_y: np.ndarray) -> ScalarField:
    """Broadcast a wall-normal sample array over the periodic direction."""
    values_y = np.asarray(values_y, dtype=float)
    if values_y.shape != (grid.ny,):
        raise GridError("profile length does not match ny")
    return ScalarField(grid, np.tile(values_y, (grid.nx, 1)))


# ---------------------------------------------------------------------------
# Finite-difference matrices along the wall-normal direction
# ---------------------------------------------------------------------------


@lru_cache(maxsize=64)
def d1_matrix(n: int, h: float) -> np.ndarray:
    """First derivative on n uniform nodes: centered interior, one-sided walls.

    The wall rows use the four-point (third-order) one-sided stencil: the
    wall closure of the gradient controls the boundary-alignment constant
    of the deformation scheme, and the three-point closure's quadrature
    defect is several times larger.
    """
    D = np.zeros((n, n))
    for j in range(1, n - 1):
        D[j, j - 1] = -0.5 / h
        D[j, j + 1] = 0.5 / h
    D[0, :4] = np.array([-11.0 / 6.0, 3.0, -1.5, 1.0 / 3.0]) / h
    D[-1, -4:] = -np.array([-11.0 / 6.0, 3.0, -1.5, 1.0 / 3.0])[::-1] / h
    D.setflags(write=False)
    return D


@lru_cache(maxsize=64)
def d2_matrix(n: int, h: float) -> np.ndarray:
    """Second derivative on n uniform nodes, second-order at the walls."""
    D = np.zeros((n, n))
    h2 = h * h
    for j in range(1, n - 1):
        D[j, j - 1] = 1.0 / h2
        D[j, j] = -2.0 / h2
        D[j, j + 1] = 1.0 / h2
    D[0, 0], D[0, 1], D[0, 2], D[0, 3] = 2.0 / h2, -5.0 / h2, 4.0 / h2, -1.0 / h2
    D[-1, -1], D[-1, -2], D[-1, -3], D[-1, -4] = (
        2.0 / h2,
        -5.0 / h2,
        4.0 / h2,
        -1.0 / h2,
    )
    D.setflags(write=False)
    return D


def _y_derivative_matrix(grid: GridSpec, order: int) -> np.ndarray:
    if order == 0:
        return np.eye(grid.ny)
    if order == 1:
        return d1_matrix(grid.ny, grid.hy)
    if order == 2:
        return d2_matrix(grid.ny, grid.hy)
    if order == 3:
        return d1_matrix(grid.ny, grid.hy) @ d2_matrix(grid.ny, grid.hy)
    raise ValueError(f"wall-normal derivative order {order} not supported")


def _x_derivative_values(values: np.ndarray, order: int, Lx: float) -> np.ndarray:
    if order == 0:
        return values
    nx = values.shape[0]
    coeffs = np.fft.rfft(values, axis=0)
    k = 2.0 * np.pi / Lx * np.arange(coeffs.shape[0])
    factor = (1j * k) ** order
    if order % 2 == 1 and nx % 2 == 0:
        factor[-1] = 0.0  # odd derivative of the Nyquist mode is not representable
    return np.fft.irfft(coeffs * factor[:, None], n=nx, axis=0)


def derive(f: ScalarField, order_x: int, order_y: int) -> ScalarField:
    """Mixed partial derivative, spectral in x and finite-difference in y.

    ``order_x + order_y`` must not exceed 3.
    """
    if order_x < 0 or order_y < 0 or order_x + order_y > 3:
        raise ValueError(
            f"derivative order ({order_x}, {order_y}) exceeds the supported total of 3"
        )
    vals = _x_derivative_values(f.values, order_x, f.grid.Lx)
    if order_y:
        D = _y_derivative_matrix(f.grid, order_y)
        vals = vals @ D.T
    return ScalarField(f.grid, vals)


def gradient(f: ScalarField) -> VectorField:
    return VectorField(derive(f, 1, 0), derive(f, 0, 1))


def laplacian(f: ScalarField) -> ScalarField:
    return derive(f, 2, 0) + derive(f, 0, 2)


# ---------------------------------------------------------------------------
# Quadrature and streamwise averaging
# ---------------------------------------------------------------------------


def trapezoid_weights(grid: GridSpec) -> np.ndarray:
    w = np.full(grid.ny, grid.hy)
    w[0] = w[-1] = 0.5 * grid.hy
    return w


def integrate(f: ScalarField) -> float:
    """Integral over the rectangle: periodic rectangle rule x trapezoid."""
    w = trapezoid_weights(f.grid)
    return float(f.grid.hx * np.sum(f.values @ w))


def x_average(f: ScalarField) -> np.ndarray:
    """Arithmetic mean over the periodic direction at each wall-normal node."""
    return f.values.mean(axis=0)


# ---------------------------------------------------------------------------
# Interpolation
# ---------------------------------------------------------------------------


class FieldInterpolant:
    """Evaluate a field anywhere: Fourier in x, natural cubic spline in y.

    Exact at grid nodes.  By default evaluation outside the wall-normal
    interval raises; ``extrapolate=True`` permits (smooth cubic)
    excursions, which the map-inversion machinery needs.
    """

    def __init__(
        self,
        f: ScalarField,
        extrapolate: bool = False,
        bc_type: str = "natural",
        degree: int = 3,
    ):
        grid = f.grid
        self.grid = grid
        self.extrapolate = extrapolate
        coeffs = np.fft.rfft(f.values, axis=0)
        if degree == 3:
            self._spline = CubicSpline(grid.y, coeffs, axis=1, bc_type=bc_type)
        else:
            from scipy.interpolate import make_interp_spline

            self._spline = make_interp_spline(grid.y, coeffs, k=degree, axis=1)
        self._k = grid.wavenumbers()
        weights = np.full(self._k.shape, 2.0 / grid.nx)
        weights[0] = 1.0 / grid.nx
        if grid.nx % 2 == 0:
            weights[-1] = 1.0 / grid.nx
        self._weights = weights

    def __call__(self, x, y):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        y = np.atleast_1d(np.asarray(y, dtype=float))
        if x.shape != y.shape:
            raise ValueError("x and y point arrays must have matching shapes")
        shape = x.shape
        x = x.ravel()
        y = y.ravel()
        y_eval = y
        if not self.extrapolate:
            tol = 1e-12 * (self.grid.y_hi - self.grid.y_lo)
            bad = (y < self.grid.y_lo - tol) | (y > self.grid.y_hi + tol)
            if np.any(bad):
                i = int(np.argmax(bad))
                raise InterpolationRangeError(
                    f"point (x={x[i]:.6g}, y={y[i]:.6g}) lies outside the "
                    f"wall-normal range [{self.grid.y_lo}, {self.grid.y_hi}]"
                )
            y_eval = np.clip(y, self.grid.y_lo, self.grid.y_hi)
        coeffs = self._spline(y_eval)  # (n_modes, n_pts)
        phase = np.exp(1j * np.outer(self._k, np.mod(x, self.grid.Lx)))
        vals = np.einsum("k,kp,kp->p", self._weights, coeffs, phase).real
        return vals.reshape(shape)


def interpolate(f: ScalarField, pts) -> np.ndarray:
    """Evaluate ``f`` at a list of (x, y) points; x wraps periodically."""
    pts = np.asarray(pts, dtype=float)
    if pts.ndim == 1:
        pts = pts[None, :]
    return FieldInterpolant(f)(pts[:, 0], pts[:, 1])


# ---------------------------------------------------------------------------
# Serialization: CSV with header x,y,value, row-major over j then i
# ---------------------------------------------------------------------------


def write_field_csv(f: ScalarField, path) -> None:
    grid = f.grid
    with open(path, "w") as fh:
        fh.write("x,y,value\n")
        for j in range(grid.ny):
            yj = grid.y_lo + j * grid.hy
            for i in range(grid.nx):
                fh.write(f"{i * grid.hx:.17g},{yj:.17g},{f.values[i, j]:.17g}\n")


def read_field_csv(path) -> ScalarField:
    data = np.loadtxt(path, delimiter=",", skiprows=1)
    xs = np.unique(data[:, 0])
    ys = np.unique(data[:, 1])
    nx, ny = len(xs), len(ys)
    if nx * ny != data.shape[0]:
        raise GridError(f"{path}: not a tensor-product field file")
    hx = xs[1] - xs[0]
    grid = GridSpec(nx=nx, ny=ny, Lx=hx * nx, y_lo=float(ys[0]), y_hi=float(ys[-1]))
    vals = data[:, 2].reshape(ny, nx).T
    return ScalarField(grid, vals)
