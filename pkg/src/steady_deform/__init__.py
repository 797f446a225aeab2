"""Deform steady 2-D fluid equilibria onto nearby domains and verify rigidity."""

from .grid import (
    FieldInterpolant,
    GridSpec,
    ScalarField,
    VectorField,
    derive,
    field_from_function,
    field_from_y_profile,
    integrate,
    interpolate,
    x_average,
)
from .profiles import Profile, SeparableG, SeparableGTerm, compose, eval_G
from .elliptic import (
    SeparableOperator,
    rayleigh_min,
    solve_dirichlet,
    solve_neumann,
    solve_profile_bvp,
)
from .streamline import (
    StreamGeometry,
    build_stream_geometry,
    curvature_identities,
    deviation,
    partial_psi0,
    partial_s,
    project,
    recover_phi,
    streamline_integral_derivative,
    travel_time,
)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
