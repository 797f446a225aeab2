"""Profile interpolation and separable inhomogeneity tests."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from steady_deform.grid import GridSpec, field_from_function, derive
from steady_deform.profiles import (
    Profile,
    ProfileRangeError,
    SeparableG,
    SeparableGTerm,
    compose,
    eval_G,
    read_profile_csv,
    write_profile_csv,
)


class TestProfile:
    def test_quadratic_derivative(self):
        p = Profile.from_function(np.linspace(0, 1, 65), lambda c: c ** 2)
        assert abs(p.eval(0.3, 1) - 0.6) < 1e-6

    def test_exact_at_knots(self):
        rng = np.random.default_rng(5)
        knots = np.linspace(-1, 2, 17)
        vals = np.cumsum(np.abs(rng.standard_normal(17)) + 0.1)
        p = Profile(knots, vals)
        assert p.eval(knots[7]) == vals[7]

    def test_far_extrapolation_error(self):
        p = Profile.from_function(np.linspace(0, 1, 9), lambda c: c)
        with pytest.raises(ProfileRangeError):
            p.eval(11.0)

    def test_margin_clamps(self):
        p = Profile.from_function(np.linspace(0, 1, 9), lambda c: c)
        assert abs(p.eval(1.005) - 1.0) < 1e-12

    def test_decreasing_knots_accepted(self):
        p = Profile(np.linspace(1, 0, 9), np.linspace(2, 0, 9))
        assert abs(p.eval(0.5) - 1.0) < 1e-12

    def test_non_monotone_knots_rejected(self):
        with pytest.raises(ValueError):
            Profile(np.array([0.0, 1.0, 0.5, 2.0]), np.zeros(4))

    @given(data=st.lists(st.floats(0.01, 2.0), min_size=6, max_size=12))
    @settings(max_examples=30, deadline=None)
    def test_monotone_no_overshoot(self, data):
        vals = np.cumsum(np.asarray(data))
        knots = np.linspace(0, 1, len(vals))
        p = Profile(knots, vals)
        dense = np.linspace(0, 1, 500)
        out = p.eval(dense)
        assert np.all(out >= vals[0] - 1e-12)
        assert np.all(out <= vals[-1] + 1e-12)
        # piecewise: values stay within each pair of neighboring samples
        for j in range(len(vals) - 1):
            mask = (dense >= knots[j]) & (dense <= knots[j + 1])
            assert np.all(out[mask] >= vals[j] - 1e-12)
            assert np.all(out[mask] <= vals[j + 1] + 1e-12)

    def test_cumulative_exact_for_linear(self):
        p = Profile.from_function(np.linspace(0, 1, 33), lambda c: c)
        cs = np.linspace(0, 1, 71)
        assert np.max(np.abs(p.cumulative(cs) - cs ** 2 / 2)) < 1e-12


class TestCompose:
    def test_identity_profile(self):
        p = Profile.from_function(np.linspace(-2, 2, 33), lambda c: c)
        f = field_from_function(GridSpec(16, 9), lambda x, y: np.sin(x) * y)
        out = compose(p, f)
        assert np.max(np.abs(out.values - f.values)) < 1e-12

    def test_square_profile(self):
        p = Profile.from_function(np.linspace(0.0, 1.1, 129), lambda c: c ** 2)
        f = field_from_function(GridSpec(16, 9), lambda x, y: y)
        out = compose(p, f)
        ref = field_from_function(GridSpec(16, 9), lambda x, y: y ** 2)
        assert np.max(np.abs(out.values - ref.values)) < 1e-6

    def test_range_violation_names_node(self):
        p = Profile.from_function(np.linspace(0, 1, 9), lambda c: c)
        f = field_from_function(GridSpec(16, 9), lambda x, y: 3 * y)
        with pytest.raises(ProfileRangeError, match="node"):
            compose(p, f)

    def test_chain_rule_consistency(self):
        grid = GridSpec(32, 129)
        p = Profile.from_function(np.linspace(-0.2, 1.2, 257), lambda c: np.sin(c))
        f = field_from_function(grid, lambda x, y: y + 0.1 * np.cos(x))
        lhs = derive(compose(p, f), 0, 1)
        rhs = compose(p, f, deriv=1).values * derive(f, 0, 1).values
        err = np.max(np.abs(lhs.values - rhs))
        assert err < 5e-4  # second-order in both grids


class TestSeparableG:
    def test_empty_is_zero(self):
        grid = GridSpec(16, 9)
        psi = field_from_function(grid, lambda x, y: y)
        out = eval_G(SeparableG(), psi)
        assert np.max(np.abs(out.values)) == 0.0

    def test_linear_term(self):
        grid = GridSpec(16, 9)
        theta = Profile.from_function(np.linspace(-0.1, 1.1, 33), lambda c: c)
        G = SeparableG((SeparableGTerm(grid.y.copy(), theta, w_fn=lambda y: np.asarray(y)),))
        psi = field_from_function(grid, lambda x, y: y)
        out = G.eval_field(psi, d_psi=1)  # theta' = 1 so the field is w(y) = y
        ref = field_from_function(grid, lambda x, y: y + 0 * x)
        assert np.max(np.abs(out.values - ref.values)) < 1e-10

    def test_quadratic_term_derivative(self):
        grid = GridSpec(16, 17)
        theta = Profile.from_function(np.linspace(-0.1, 1.1, 129), lambda c: c ** 2)
        G = SeparableG((SeparableGTerm(grid.y.copy(), theta, w_fn=lambda y: np.asarray(y)),))
        psi = field_from_function(grid, lambda x, y: y)
        out = G.eval_field(psi, d_psi=1)
        ref = field_from_function(grid, lambda x, y: 2 * y * y)
        assert np.max(np.abs(out.values - ref.values)) < 1e-6

    def test_displaced_coefficient(self):
        grid = GridSpec(16, 9)
        theta = Profile.from_function(np.linspace(-0.1, 1.1, 33), lambda c: np.ones_like(c))
        G = SeparableG((SeparableGTerm(grid.y.copy(), theta, w_fn=lambda y: y ** 2),))
        psi = field_from_function(grid, lambda x, y: y)
        X, Y = grid.meshgrid()
        out = G.eval_field(psi, 0, y_values=Y + 0.1)
        assert np.max(np.abs(out.values - (Y + 0.1) ** 2)) < 1e-12


def test_profile_csv_round_trip(tmp_path):
    p = Profile.from_function(np.linspace(0, 2, 17), lambda c: np.cos(c))
    path = tmp_path / "p.csv"
    write_profile_csv(p, path)
    assert path.read_text().splitlines()[0] == "c,value"
    back = read_profile_csv(path)
    assert np.array_equal(back.knots, p.knots)
    assert np.array_equal(back.values, p.values)
