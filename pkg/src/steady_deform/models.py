"""Base equilibria for the three physical systems.

Each builder produces a :class:`BaseState`: a one-dimensional (shear or
radial) stream function on the channel together with the profiles and the
separable operator data that the deformation scheme consumes.

The profile samples are taken from the discrete operator applied to the
base stream function, so the discrete residual of the governing equation
vanishes at the nodes by construction.

Models
------
euler        u = (v0(y), 0);  lap(psi) = F(psi)
boussinesq   shear with temperature theta = Theta(psi);
             lap(psi) = y Theta'(psi) + F(psi)
gs           axisymmetric pipe (wall-normal coordinate r, periodic z);
             lap(psi) - (1/r) psi_r = -r^2 Pi'(psi) + C C'(psi)
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Callable

import numpy as np

from .elliptic import SeparableOperator, apply_operator_1d
from .grid import GridSpec, ScalarField, d1_matrix, d2_matrix, field_from_y_profile
from .profiles import Profile, SeparableG, SeparableGTerm, compose
from .streamline import StreamGeometry, StagnationError, build_stream_geometry


class SwirlRealityError(ValueError):
    """Swirl reconstruction would require the square root of a negative value."""


class NewtonDivergenceError(RuntimeError):
    """The radial equilibrium solve did not converge."""


@dataclass(frozen=True)
class BaseState:
    """A one-dimensional base equilibrium plus its operator data.

    ``F0_rows`` holds F0(psi0(y_j)) on the wall-normal nodes (the natural
    streamline discretization); ``aux`` carries the model-specific
    profiles (Theta0, Pi0_prime, C0, ...).
    """

    model: str
    grid: GridSpec
    geo: StreamGeometry
    op: SeparableOperator
    F0: Profile
    F0_rows: np.ndarray
    G0: SeparableG
    c_bot: float
    c_top: float
    base_residual: float
    aux: dict = dc_field(default_factory=dict)

    def psi0_field(self) -> ScalarField:
        return self.geo.psi0_field()

    @property
    def psi0(self) -> np.ndarray:
        return self.geo.psi0

    def d_dc_rows(self, rows: np.ndarray) -> np.ndarray:
        """Derivative with respect to the streamline value along the grid."""
        D1 = d1_matrix(self.grid.ny, self.grid.hy)
        return (D1 @ rows) / (D1 @ self.geo.psi0)


def _discrete_l0_rows(grid: GridSpec, dpsi0: np.ndarray, b2: np.ndarray) -> np.ndarray:
    """Base operator applied to the stream function, in first-order form.

    The deformation machinery carries the base gradient as data and
    closes the Hessian by one more derivative, so the same convention is
    used here; the identity map then reproduces the profile samples
    exactly.
    """
    D1 = d1_matrix(grid.ny, grid.hy)
    return D1 @ dpsi0 + b2 * dpsi0


def _row_residual(
    grid: GridSpec, dpsi0: np.ndarray, b2: np.ndarray, rhs_rows: np.ndarray
) -> float:
    return float(np.max(np.abs(_discrete_l0_rows(grid, dpsi0, b2) - rhs_rows)))


TOL_BASE = 1e-8


def build_euler_base(grid: GridSpec, v0: np.ndarray) -> BaseState:
    """Shear Euler base from the velocity samples v0(y_j).

    psi0(y) = -int_0^y v0, so that grad^perp(psi0) = (v0, 0).  The
    vorticity profile F0 carries the discrete lap(psi0) on the knots
    c_j = psi0(y_j).
    """
    v0 = np.asarray(v0, dtype=float)
    if v0.shape != (grid.ny,):
        raise ValueError("v0 must be sampled on the wall-normal nodes")
    if np.min(np.abs(v0)) == 0.0 or np.any(v0 * v0[0] <= 0):
        raise StagnationError("v0 changes sign or vanishes: stagnation point in the channel")
    psi0 = -np.concatenate([[0.0], np.cumsum(0.5 * (v0[1:] + v0[:-1]) * grid.hy)])
    geo = build_stream_geometry(grid, psi0, -v0)
    F0_rows = _discrete_l0_rows(grid, -v0, np.zeros(grid.ny))
    F0 = Profile(psi0, F0_rows)
    lam = (d2_matrix(grid.ny, grid.hy) @ v0) / v0
    op = SeparableOperator(
        np.ones(grid.ny), np.ones(grid.ny), np.zeros(grid.ny), lam
    )
    residual = _row_residual(grid, -v0, op.b2, F0_rows)
    if residual > TOL_BASE:
        raise ValueError(f"base residual {residual:.3e} exceeds {TOL_BASE}")
    return BaseState(
        model="euler",
        grid=grid,
        geo=geo,
        op=op,
        F0=F0,
        F0_rows=F0_rows,
        G0=SeparableG(),
        c_bot=float(psi0[0]),
        c_top=float(psi0[-1]),
        base_residual=residual,
        aux={"v0": v0},
    )


def build_boussinesq_base(grid: GridSpec, psi0_shear: np.ndarray, Theta0: Profile) -> BaseState:
    """Stratified shear base with temperature profile Theta0.

    The governing split is lap(psi) = y Theta'(psi) + F(psi); the
    homogeneous profile F0 absorbs lap(psi0) - y Theta0'(psi0) on the
    knots.  The operator potential is F0'(psi0) + y Theta0''(psi0).
    """
    psi0 = np.asarray(psi0_shear, dtype=float)
    if psi0.shape != (grid.ny,):
        raise ValueError("psi0 must be sampled on the wall-normal nodes")
    D1 = d1_matrix(grid.ny, grid.hy)
    dpsi0 = D1 @ psi0
    geo = build_stream_geometry(grid, psi0, dpsi0)
    theta0_prime = Theta0.eval(psi0, 1)
    F0_rows = _discrete_l0_rows(grid, dpsi0, np.zeros(grid.ny)) - grid.y * theta0_prime
    F0 = Profile(psi0, F0_rows)
    G0 = SeparableG(
        (
            SeparableGTerm(
                w_samples=grid.y.copy(),
                theta=Profile(psi0, theta0_prime),
                w_fn=lambda y: np.asarray(y, dtype=float),
            ),
        )
    )
    lam = (D1 @ F0_rows) / dpsi0 + grid.y * Theta0.eval(psi0, 2)
    op = SeparableOperator(np.ones(grid.ny), np.ones(grid.ny), np.zeros(grid.ny), lam)
    rhs_rows = F0_rows + grid.y * theta0_prime
    residual = _row_residual(grid, dpsi0, op.b2, rhs_rows)
    if residual > TOL_BASE:
        raise ValueError(f"base residual {residual:.3e} exceeds {TOL_BASE}")
    return BaseState(
        model="boussinesq",
        grid=grid,
        geo=geo,
        op=op,
        F0=F0,
        F0_rows=F0_rows,
        G0=G0,
        c_bot=float(psi0[0]),
        c_top=float(psi0[-1]),
        base_residual=residual,
        aux={"Theta0": Theta0},
    )


def _gs_operator(grid: GridSpec, lam: np.ndarray) -> SeparableOperator:
    r = grid.y
    return SeparableOperator(
        np.ones(grid.ny),
        np.ones(grid.ny),
        -1.0 / r,
        lam,
        b2_fn=lambda rr: -1.0 / np.asarray(rr, dtype=float),
    )


def _gs_separable_G(grid: GridSpec, Pi0_prime: Profile) -> SeparableG:
    return SeparableG(
        (
            SeparableGTerm(
                w_samples=-grid.y ** 2,
                theta=Pi0_prime,
                w_fn=lambda rr: -np.asarray(rr, dtype=float) ** 2,
            ),
        )
    )


def _cc_prime_rows(C0: Profile, c: np.ndarray) -> np.ndarray:
    return C0.eval(c, 0) * C0.eval(c, 1)


def build_gs_base(grid: GridSpec, psi0_radial: np.ndarray, C0: Profile) -> BaseState:
    """Axisymmetric pipe base from radial samples psi0(r_j); derives Pi0'.

    Pi0'(c) = [C0 C0'(c) - (psi0'' - psi0'/r)(r(c))] / r(c)^2 so that the
    discrete radial equation holds exactly at the nodes.
    """
    psi0 = np.asarray(psi0_radial, dtype=float)
    if psi0.shape != (grid.ny,):
        raise ValueError("psi0 must be sampled on the radial nodes")
    r = grid.y
    D1 = d1_matrix(grid.ny, grid.hy)
    dpsi0 = D1 @ psi0
    geo = build_stream_geometry(grid, psi0, dpsi0)
    b2 = -1.0 / r
    l0_rows = _discrete_l0_rows(grid, dpsi0, b2)
    cc = _cc_prime_rows(C0, psi0)
    pi0_prime_rows = (cc - l0_rows) / r ** 2
    Pi0_prime = Profile(psi0, pi0_prime_rows)
    F0_rows = cc
    F0 = Profile(psi0, F0_rows)
    lam = (D1 @ F0_rows) / dpsi0 - r ** 2 * ((D1 @ pi0_prime_rows) / dpsi0)
    op = _gs_operator(grid, lam)
    rhs_rows = -(r ** 2) * pi0_prime_rows + cc
    residual = _row_residual(grid, dpsi0, b2, rhs_rows)
    if residual > TOL_BASE:
        raise ValueError(f"base residual {residual:.3e} exceeds {TOL_BASE}")
    return BaseState(
        model="gs",
        grid=grid,
        geo=geo,
        op=op,
        F0=F0,
        F0_rows=F0_rows,
        G0=_gs_separable_G(grid, Pi0_prime),
        c_bot=float(psi0[0]),
        c_top=float(psi0[-1]),
        base_residual=residual,
        aux={"C0": C0, "Pi0_prime": Pi0_prime},
    )


def build_gs_base_from_profiles(
    grid: GridSpec,
    Pi0_prime: Profile,
    C0: Profile,
    bc: tuple[float, float] = (0.0, 1.0),
    max_newton: int = 50,
    tol: float = 1e-10,
) -> BaseState:
    """Solve the radial equilibrium for given pressure/swirl profiles.

    Newton iteration on psi'' - psi'/r + r^2 Pi0'(psi) - C0 C0'(psi) = 0
    with psi(r) pinned to ``bc`` at the walls.
    """
    r = grid.y
    ny = grid.ny
    b2 = -1.0 / r
    D1 = d1_matrix(ny, grid.hy)
    D2 = d2_matrix(ny, grid.hy)
    psi = bc[0] + (bc[1] - bc[0]) * (r - r[0]) / (r[-1] - r[0])
    scale = max(1.0, abs(bc[0]), abs(bc[1]))
    for _ in range(max_newton):
        rhs_rows = -(r ** 2) * Pi0_prime.eval(psi, 0) + _cc_prime_rows(C0, psi)
        res = _discrete_l0_rows(grid, D1 @ psi, b2) - rhs_rows
        if np.max(np.abs(res[1:-1])) < tol * scale:
            break
        d_rhs = -(r ** 2) * Pi0_prime.eval(psi, 1) + (
            C0.eval(psi, 1) ** 2 + C0.eval(psi, 0) * C0.eval(psi, 2)
        )
        A = D2[1:-1, :] + b2[1:-1, None] * D1[1:-1, :]
        A = A[:, 1:-1] - np.diag(d_rhs[1:-1])
        delta = np.linalg.solve(A, -res[1:-1])
        psi = psi.copy()
        psi[1:-1] += delta
    else:
        raise NewtonDivergenceError(
            f"radial equilibrium Newton did not converge in {max_newton} steps "
            f"(residual {np.max(np.abs(res[1:-1])):.3e})"
        )
    return build_gs_base(grid, psi, C0)


def reconstruct_swirl(W: Profile, C0: Profile, n_knots: int = 4097) -> Profile:
    """Swirl profile C with C C' = W, anchored at C0 on the lower knot.

    C(c) = sign * sqrt(C0(c_ref)^2 + 2 int_{c_ref}^c W); a negative value
    under the root is an error, not a clamp.  The returned profile lives
    on knots clustered quadratically toward the anchor, where a vanishing
    C0 makes C branch like a square root.
    """
    c_ref = W.c_min
    t = np.linspace(0.0, 1.0, n_knots)
    c_dense = c_ref + t ** 2 * (W.c_max - c_ref)
    S = C0.eval(c_ref, 0) ** 2 + 2.0 * W.cumulative(c_dense, c_ref)
    if np.min(S) < -1e-12 * max(1.0, np.max(np.abs(S))):
        c_bad = c_dense[int(np.argmin(S))]
        raise SwirlRealityError(
            f"swirl reconstruction loses reality: C^2 = {np.min(S):.3e} at c = {c_bad:.6g}"
        )
    sign = np.sign(C0.eval(c_ref, 0)) or 1.0
    return Profile(c_dense, sign * np.sqrt(np.maximum(S, 0.0)))


def reconstruct_boussinesq_fields(
    psi: ScalarField, Theta: Profile, G: Profile
) -> tuple[ScalarField, ScalarField]:
    """Temperature and Bernoulli pressure from the stream function.

    theta = Theta(psi);  P = -y * Theta(psi) - G(psi) with the integration
    constant of G fixed to zero (a pressure gauge).
    """
    theta = compose(Theta, psi)
    _, Y = psi.grid.meshgrid()
    P = ScalarField(psi.grid, -Y * theta.values - compose(G, psi).values)
    return theta, P
