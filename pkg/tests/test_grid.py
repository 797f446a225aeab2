"""Grid, differentiation, quadrature and interpolation tests."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from steady_deform.grid import (
    FieldInterpolant,
    GridSpec,
    GridError,
    InterpolationRangeError,
    ScalarField,
    VectorField,
    derive,
    field_from_function,
    integrate,
    interpolate,
    read_field_csv,
    write_field_csv,
    x_average,
)


def make_field(fn, nx=64, ny=65, **kw):
    grid = GridSpec(nx, ny, **kw)
    return field_from_function(grid, fn)


class TestGridSpec:
    def test_nodes(self):
        g = GridSpec(16, 9, Lx=2 * np.pi, y_lo=0.0, y_hi=1.0)
        assert g.x[0] == 0.0
        assert g.x[-1] < g.Lx  # no duplicated periodic endpoint
        assert g.y[0] == 0.0 and g.y[-1] == 1.0
        assert np.isclose(g.volume, 2 * np.pi)

    @pytest.mark.parametrize(
        "kw",
        [
            dict(nx=6, ny=9),
            dict(nx=15, ny=9),
            dict(nx=16, ny=8),
            dict(nx=16, ny=9, Lx=-1.0),
            dict(nx=16, ny=9, y_lo=1.0, y_hi=0.0),
        ],
    )
    def test_invalid(self, kw):
        with pytest.raises(GridError):
            GridSpec(**kw)

    def test_field_shape_and_finiteness(self):
        g = GridSpec(16, 9)
        with pytest.raises(GridError):
            ScalarField(g, np.zeros((9, 16)))
        with pytest.raises(GridError):
            ScalarField(g, np.full((16, 9), np.nan))

    def test_vector_field_grid_mismatch(self):
        a = make_field(lambda x, y: x, nx=16, ny=9)
        b = make_field(lambda x, y: y, nx=16, ny=17)
        with pytest.raises(GridError):
            VectorField(a, b)


class TestDerive:
    def test_periodic_first_derivative_exact(self):
        f = make_field(lambda x, y: np.sin(x))
        d = derive(f, 1, 0)
        ref = make_field(lambda x, y: np.cos(x))
        assert np.max(np.abs(d.values - ref.values)) < 1e-10

    def test_wall_normal_second_derivative_exact_on_quadratics(self):
        f = make_field(lambda x, y: y ** 2)
        d = derive(f, 0, 2)
        assert np.max(np.abs(d.values - 2.0)) < 1e-10

    def test_mixed_derivative_refinement(self):
        errs = {}
        for ny in (33, 65):
            f = make_field(lambda x, y: np.sin(x) * np.sin(np.pi * y), ny=ny)
            d = derive(f, 1, 1)
            ref = make_field(lambda x, y: np.pi * np.cos(x) * np.cos(np.pi * y), ny=ny)
            errs[ny] = np.max(np.abs(d.values - ref.values))
        assert 3.5 <= errs[33] / errs[65] <= 4.5

    def test_order_rejection(self):
        f = make_field(lambda x, y: y)
        with pytest.raises(ValueError):
            derive(f, 2, 2)

    @given(
        ax=st.floats(-1, 1), ay=st.floats(-1, 1), k=st.integers(1, 3), m=st.integers(1, 3)
    )
    @settings(max_examples=20, deadline=None)
    def test_mixed_derivatives_commute(self, ax, ay, k, m):
        f = make_field(
            lambda x, y: ax * np.sin(k * x) * y ** 2 + ay * np.cos(k * x) * np.sin(m * y)
        )
        lhs = derive(f, 1, 1)
        rhs = derive(derive(f, 1, 0), 0, 1)
        assert np.max(np.abs(lhs.values - rhs.values)) < 1e-10

    def test_second_derivative_convergence_order(self):
        errs = []
        for ny in (33, 65, 129):
            f = make_field(lambda x, y: np.sin(np.pi * y) + 0 * x, nx=16, ny=ny)
            d = derive(f, 0, 2)
            ref = make_field(lambda x, y: -np.pi ** 2 * np.sin(np.pi * y) + 0 * x, nx=16, ny=ny)
            errs.append(np.max(np.abs(d.values - ref.values)[:, 1:-1]))
        orders = [np.log2(errs[i] / errs[i + 1]) for i in range(2)]
        assert all(1.8 <= o <= 2.2 for o in orders)


class TestIntegrate:
    def test_constant(self):
        f = make_field(lambda x, y: np.ones_like(x))
        assert abs(integrate(f) - 2 * np.pi) < 1e-12

    def test_periodic_mean(self):
        f = make_field(lambda x, y: np.sin(x))
        assert abs(integrate(f)) < 1e-12

    def test_linear_profile(self):
        f = make_field(lambda x, y: y)
        assert abs(integrate(f) - np.pi) < 1e-10

    @given(k=st.integers(1, 5), amp=st.floats(-2, 2))
    @settings(max_examples=20, deadline=None)
    def test_periodic_derivative_integrates_to_zero(self, k, amp):
        f = make_field(lambda x, y: amp * np.sin(k * x) * (1 + y ** 2))
        assert abs(integrate(derive(f, 1, 0))) < 1e-10


class TestInterpolate:
    def test_exact_at_nodes(self):
        rng = np.random.default_rng(3)
        g = GridSpec(16, 9)
        f = ScalarField(g, rng.standard_normal((16, 9)))
        X, Y = g.meshgrid()
        vals = interpolate(f, np.column_stack([X.ravel(), Y.ravel()]))
        assert np.max(np.abs(vals - f.values.ravel())) < 1e-13

    def test_analytic_value(self):
        f = make_field(lambda x, y: np.sin(x) * np.sin(np.pi * y))
        v = interpolate(f, [(np.pi / 3, 0.37)])
        assert abs(v[0] - np.sin(np.pi / 3) * np.sin(0.37 * np.pi)) < 1e-6

    def test_out_of_range(self):
        f = make_field(lambda x, y: y)
        with pytest.raises(InterpolationRangeError):
            interpolate(f, [(0.1, 1.1)])

    def test_periodic_wrap(self):
        f = make_field(lambda x, y: np.sin(x))
        v = interpolate(f, [(2 * np.pi + 0.3, 0.5), (0.3, 0.5)])
        assert abs(v[0] - v[1]) < 1e-12

    def test_quintic_matches_cubic_on_smooth_data(self):
        f = make_field(lambda x, y: np.cos(x) * np.exp(y))
        a = FieldInterpolant(f, degree=5)(1.0, 0.33)
        assert abs(a - np.cos(1.0) * np.exp(0.33)) < 1e-6


class TestXAverage:
    def test_oscillatory_vanishes(self):
        f = make_field(lambda x, y: np.sin(x) * (1 + y))
        assert np.max(np.abs(x_average(f))) < 1e-12

    def test_profile_reproduced(self):
        g = GridSpec(16, 9)
        f = field_from_function(g, lambda x, y: y ** 3)
        assert np.array_equal(x_average(f), g.y ** 3)

    def test_mixed(self):
        g = GridSpec(64, 65)
        f = field_from_function(g, lambda x, y: (2 + np.cos(x)) * y)
        assert np.max(np.abs(x_average(f) - 2 * g.y)) < 1e-12


def test_csv_round_trip(tmp_path):
    rng = np.random.default_rng(11)
    g = GridSpec(16, 9, Lx=1.5, y_lo=-0.25, y_hi=2.0)
    f = ScalarField(g, rng.standard_normal((16, 9)))
    path = tmp_path / "field.csv"
    write_field_csv(f, path)
    assert path.read_text().splitlines()[0] == "x,y,value"
    back = read_field_csv(path)
    assert back.grid == g
    assert np.array_equal(back.values, f.values)
