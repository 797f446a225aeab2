"""Direct solvers for separable second-order operators on the channel.

The operator acted on here is

    (L0 - Lambda) u = a11(y) u_xx + a22(y) u_yy + b2(y) u_y - Lambda(y) u,

whose coefficients depend on the wall-normal coordinate only.  A real FFT
along the periodic direction decouples the problem into one tridiagonal
boundary-value problem per wavenumber; each mode is LU-factorized once
and reused.  The same machinery provides the zero-mean Neumann solver for
the plain Laplacian and the smallest eigenvalue of the symmetrized
operator (shifted inverse power iteration per mode).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from .grid import (
    GridSpec,
    ScalarField,
    d1_matrix,
    d2_matrix,
    derive,
    integrate,
    trapezoid_weights,
)


class SingularModeError(ValueError):
    """A per-mode operator factors with a vanishing pivot (trivial-kernel
    requirement on the base operator is violated)."""

    def __init__(self, wavenumber_index: int, message: str | None = None):
        self.wavenumber_index = wavenumber_index
        super().__init__(
            message
            or f"per-mode operator is singular at x-wavenumber index {wavenumber_index}; "
            "the homogeneous Dirichlet problem has a nontrivial kernel"
        )


class CompatibilityError(ValueError):
    """Neumann data violates the divergence-theorem compatibility condition."""

    def __init__(self, defect: float):
        self.defect = defect
        super().__init__(
            f"Neumann compatibility defect {defect:.3e}: the interior integral "
            "does not match the boundary flux; re-balance the flux constants"
        )


class EigenIterationError(RuntimeError):
    """Inverse power iteration failed to settle."""


@dataclass(frozen=True)
class SeparableOperator:
    """Coefficient arrays over the wall-normal nodes.

    ``b2_fn``, when provided, is the exact drift coefficient as a function
    of the wall-normal coordinate (needed when the operator is evaluated
    at displaced positions).
    """

    a11: np.ndarray
    a22: np.ndarray
    b2: np.ndarray
    lam: np.ndarray
    b2_fn: object = None

    def __post_init__(self):
        for name in ("a11", "a22", "b2", "lam"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} must be finite")
            object.__setattr__(self, name, arr)
        if np.min(self.a11) <= 0 or np.min(self.a22) <= 0:
            raise ValueError("ellipticity requires a11, a22 > 0")

    @classmethod
    def laplacian(cls, ny: int, lam: np.ndarray | float = 0.0) -> "SeparableOperator":
        lam = np.broadcast_to(np.asarray(lam, dtype=float), (ny,)).copy()
        return cls(np.ones(ny), np.ones(ny), np.zeros(ny), lam)


def apply_operator(op: SeparableOperator, f: ScalarField) -> ScalarField:
    """Discrete (L0 - Lambda) f with the same stencils the solvers factor."""
    vals = (
        op.a11[None, :] * derive(f, 2, 0).values
        + op.a22[None, :] * derive(f, 0, 2).values
        + op.b2[None, :] * derive(f, 0, 1).values
        - op.lam[None, :] * f.values
    )
    return ScalarField(f.grid, vals)


def _mode_matrix(grid: GridSpec, op: SeparableOperator, k: float) -> np.ndarray:
    """Dense interior matrix of a22 D2 + b2 D1 - (a11 k^2 + Lambda)."""
    ny = grid.ny
    D2 = d2_matrix(ny, grid.hy)
    D1 = d1_matrix(ny, grid.hy)
    A = op.a22[1:-1, None] * D2[1:-1, :] + op.b2[1:-1, None] * D1[1:-1, :]
    A[:, 1:-1] -= np.diag(op.a11[1:-1] * k * k + op.lam[1:-1])
    return A  # shape (ny-2, ny); columns 0 and ny-1 multiply boundary values


PIVOT_TOL = 1e-12


class DirichletSolver:
    """Factorized per-mode solver for (L0 - Lambda) with Dirichlet walls."""

    def __init__(self, grid: GridSpec, op: SeparableOperator):
        self.grid = grid
        self.op = op
        self._lu = []
        self._bc_cols = []
        for ki, k in enumerate(grid.wavenumbers()):
            A = _mode_matrix(grid, op, k)
            interior = A[:, 1:-1]
            scale = np.max(np.abs(interior))
            lu, piv = lu_factor(interior)
            if np.min(np.abs(np.diag(lu))) <= PIVOT_TOL * scale:
                raise SingularModeError(ki)
            self._lu.append((lu, piv))
            self._bc_cols.append((A[:, 0].copy(), A[:, -1].copy()))

    def solve(self, rhs: ScalarField, g_bot: np.ndarray, g_top: np.ndarray) -> ScalarField:
        grid = self.grid
        g_bot = np.broadcast_to(np.asarray(g_bot, dtype=float), (grid.nx,))
        g_top = np.broadcast_to(np.asarray(g_top, dtype=float), (grid.nx,))
        rhs_hat = np.fft.rfft(rhs.values, axis=0)
        gb_hat = np.fft.rfft(g_bot)
        gt_hat = np.fft.rfft(g_top)
        u_hat = np.zeros_like(rhs_hat)
        for ki in range(rhs_hat.shape[0]):
            (lu, piv) = self._lu[ki]
            col_lo, col_hi = self._bc_cols[ki]
            b = rhs_hat[ki, 1:-1] - col_lo * gb_hat[ki] - col_hi * gt_hat[ki]
            u_int = lu_solve((lu, piv), b.real) + 1j * lu_solve((lu, piv), b.imag)
            u_hat[ki, 1:-1] = u_int
            u_hat[ki, 0] = gb_hat[ki]
            u_hat[ki, -1] = gt_hat[ki]
        vals = np.fft.irfft(u_hat, n=grid.nx, axis=0)
        return ScalarField(grid, vals)


def solve_dirichlet(
    op: SeparableOperator,
    rhs: ScalarField,
    g_bot: np.ndarray | float = 0.0,
    g_top: np.ndarray | float = 0.0,
) -> ScalarField:
    """One-shot Dirichlet solve; factorizations are rebuilt each call."""
    return DirichletSolver(rhs.grid, op).solve(rhs, g_bot, g_top)


class NeumannSolver:
    """Zero-mean Neumann solver for the Laplacian with constant wall fluxes.

    The outward normal is -e_y at the bottom wall and +e_y at the top.
    The mean (k = 0) mode imposes the fluxes through ghost-point centered
    wall rows, whose discrete compatibility functional is exactly the
    trapezoid rule, and is pinned by a zero-mean constraint row.  The
    oscillatory modes use one-sided wall rows, so their wall derivatives
    match the (zero) flux data identically.
    """

    def __init__(self, grid: GridSpec):
        self.grid = grid
        ny = grid.ny
        h = grid.hy
        D1 = d1_matrix(ny, h)
        D2 = d2_matrix(ny, h)
        self._lu = []
        for ki, k in enumerate(grid.wavenumbers()):
            if ki == 0:
                A = np.zeros((ny + 1, ny + 1))
                A[1:-2, :ny] = D2[1:-1, :]
                A[0, 0], A[0, 1] = -2.0 / h ** 2, 2.0 / h ** 2
                A[-2, -2], A[-2, -3] = -2.0 / h ** 2, 2.0 / h ** 2
                A[:ny, -1] = 1.0  # multiplier column (absorbs round-off only)
                A[-1, :ny] = trapezoid_weights(grid)
            else:
                A = np.zeros((ny, ny))
                A[1:-1, :] = D2[1:-1, :] - np.eye(ny)[1:-1, :] * k * k
                A[0, :] = D1[0, :]
                A[-1, :] = D1[-1, :]
            self._lu.append(lu_factor(A))

    def balance_shift(self, rhs: ScalarField, a_bot: float, a_top: float) -> float:
        """Shift delta making fluxes (a_bot + delta, a_top + delta) compatible."""
        return 0.5 * (integrate(rhs) / self.grid.Lx - a_bot - a_top)

    def wall_derivative_corrections(self, rhs: ScalarField) -> tuple[float, float]:
        """Exact gap between the one-sided wall derivative of the solution's
        mean mode and the ghost-point flux datum.

        Adding these to the fluxes makes the one-sided derivative of the
        solution hit the uncorrected values identically; the gap follows
        from the wall row and its enforced interior neighbors and matches
        the four-point one-sided stencil of the gradient operator.
        """
        h = self.grid.hy
        rm = rhs.values.mean(axis=0)
        corr_bot = h * (0.5 * rm[0] - (5.0 / 6.0) * rm[1] + rm[2] / 3.0)
        corr_top = h * (0.5 * rm[-1] - (5.0 / 6.0) * rm[-2] + rm[-3] / 3.0)
        return corr_bot, corr_top

    def solve(
        self,
        rhs: ScalarField,
        flux_bot: float,
        flux_top: float,
        tol_compat: float | None = None,
    ) -> ScalarField:
        grid = self.grid
        total_flux = grid.Lx * (flux_bot + flux_top)
        defect = integrate(rhs) - total_flux
        scale = max(
            1.0,
            np.max(np.abs(rhs.values)) * grid.volume,
            abs(total_flux),
        )
        if tol_compat is None:
            tol_compat = 1e-10 * scale
        if abs(defect) > tol_compat:
            raise CompatibilityError(defect)

        rhs_hat = np.fft.rfft(rhs.values, axis=0)
        u_hat = np.zeros_like(rhs_hat)
        ny = grid.ny
        h = grid.hy
        for ki in range(rhs_hat.shape[0]):
            if ki == 0:
                b = np.zeros(ny + 1)
                b[:ny] = rhs_hat[0, :].real
                b[0] -= (2.0 / h) * flux_bot * grid.nx
                b[-2] -= (2.0 / h) * flux_top * grid.nx
                sol = lu_solve(self._lu[0], b)
                u_hat[0, :] = sol[:ny]
            else:
                b = np.zeros(ny, dtype=complex)
                b[1:-1] = rhs_hat[ki, 1:-1]
                sol = lu_solve(self._lu[ki], b.real) + 1j * lu_solve(self._lu[ki], b.imag)
                u_hat[ki, :] = sol
        vals = np.fft.irfft(u_hat, n=grid.nx, axis=0)
        return ScalarField(grid, vals)

    def boundary_flux(self, u: ScalarField, rhs: ScalarField) -> tuple[float, float]:
        """Outward wall fluxes under the solver's own wall discretization.

        Oscillatory modes carry no net flux; the mean mode's ghost
        relation gives u_y(lo) = (u1 - u0)/h - (h/2) rhs(lo) and the
        mirrored expression at the top wall.
        """
        h = self.grid.hy
        um = u.values.mean(axis=0)
        rm = rhs.values.mean(axis=0)
        uy_lo = (um[1] - um[0]) / h - 0.5 * h * rm[0]
        uy_hi = (um[-1] - um[-2]) / h + 0.5 * h * rm[-1]
        return -uy_lo, uy_hi


def solve_neumann(
    rhs: ScalarField,
    flux_bot: float,
    flux_top: float,
    tol_compat: float | None = None,
) -> ScalarField:
    return NeumannSolver(rhs.grid).solve(rhs, flux_bot, flux_top, tol_compat)


def solve_profile_bvp(
    y: np.ndarray,
    a22: np.ndarray,
    b2: np.ndarray,
    lam: np.ndarray,
    rhs: np.ndarray,
    u_lo: float,
    u_hi: float,
) -> np.ndarray:
    """One-dimensional Dirichlet problem a22 u'' + b2 u' - lam u = rhs."""
    y = np.asarray(y, dtype=float)
    n = len(y)
    h = y[1] - y[0]
    D2 = d2_matrix(n, h)
    D1 = d1_matrix(n, h)
    a22 = np.broadcast_to(np.asarray(a22, dtype=float), (n,))
    b2 = np.broadcast_to(np.asarray(b2, dtype=float), (n,))
    lam = np.broadcast_to(np.asarray(lam, dtype=float), (n,))
    A = a22[1:-1, None] * D2[1:-1, :] + b2[1:-1, None] * D1[1:-1, :]
    A[:, 1:-1] -= np.diag(lam[1:-1])
    interior = A[:, 1:-1]
    scale = np.max(np.abs(interior))
    lu, piv = lu_factor(interior)
    if np.min(np.abs(np.diag(lu))) <= PIVOT_TOL * scale:
        raise SingularModeError(0)
    b = np.asarray(rhs, dtype=float)[1:-1] - A[:, 0] * u_lo - A[:, -1] * u_hi
    u = np.empty(n)
    u[0], u[-1] = u_lo, u_hi
    u[1:-1] = lu_solve((lu, piv), b)
    return u


def apply_operator_1d(
    y: np.ndarray, a22, b2, lam, u: np.ndarray
) -> np.ndarray:
    """Discrete a22 u'' + b2 u' - lam u on a 1-D node array."""
    n = len(y)
    h = y[1] - y[0]
    return (
        np.broadcast_to(a22, (n,)) * (d2_matrix(n, h) @ u)
        + np.broadcast_to(b2, (n,)) * (d1_matrix(n, h) @ u)
        - np.broadcast_to(lam, (n,)) * u
    )


# ---------------------------------------------------------------------------
# Smallest eigenvalue of the symmetrized operator
# ---------------------------------------------------------------------------


def _symmetrizing_potential(grid: GridSpec, op: SeparableOperator) -> np.ndarray:
    """Zero-order term produced by removing the drift via u = m^{-1/2} w.

    For drift b2 the substitution turns a22(u'' + b2 u') into
    a22(w'' + q w) with q = -(b2' + b2^2/2)/2; requires constant a22.
    """
    if not np.allclose(op.a22, op.a22[0]):
        raise ValueError("symmetrization implemented for constant a22 only")
    if np.allclose(op.b2, 0.0):
        return np.zeros(grid.ny)
    b2 = op.b2 / op.a22[0]
    b2_prime = d1_matrix(grid.ny, grid.hy) @ b2
    return op.a22[0] * (-0.5 * b2_prime - 0.25 * b2 * b2)


def _tridiag_smallest_eig(T: np.ndarray, max_iter: int, tol: float) -> float:
    """Leftmost eigenvalue of a symmetric matrix via shifted inverse iteration."""
    n = T.shape[0]
    radii = np.sum(np.abs(T), axis=1) - np.abs(np.diag(T))
    shift = float(np.min(np.diag(T) - radii)) - 1.0
    lu = lu_factor(T - shift * np.eye(n))
    rng = np.random.default_rng(12345)
    v = rng.standard_normal(n)
    v /= np.linalg.norm(v)
    lam_old = np.inf
    for _ in range(max_iter):
        v = lu_solve(lu, v)
        v /= np.linalg.norm(v)
        lam = float(v @ (T @ v))
        if abs(lam - lam_old) <= tol * max(1.0, abs(lam)):
            return lam
        lam_old = lam
    raise EigenIterationError(
        f"inverse power iteration did not settle in {max_iter} steps; "
        f"last Rayleigh quotient {lam_old:.6e}"
    )


def rayleigh_min(
    grid: GridSpec,
    op: SeparableOperator,
    max_iter: int = 500,
    tol: float = 1e-12,
) -> float:
    """Smallest eigenvalue of the symmetrized -(L0 - Lambda), Dirichlet walls.

    Positive return value certifies the positive-definiteness hypothesis
    on the base operator; the minimum is taken over all x-wavenumbers.
    """
    q = _symmetrizing_potential(grid, op)
    ny = grid.ny
    D2 = d2_matrix(ny, grid.hy)[1:-1, 1:-1]
    best = np.inf
    for k in grid.wavenumbers():
        diag_part = q[1:-1] - op.a11[1:-1] * k * k - op.lam[1:-1]
        T = -(op.a22[0] * D2 + np.diag(diag_part))
        lam = _tridiag_smallest_eig(T, max_iter, tol)
        best = min(best, lam)
        # modes are shifted upward by a11 k^2, so later modes cannot win
        if k > 0 and lam - best > 0 and np.min(op.a11) * k * k > lam - best:
            break
    return float(best)
