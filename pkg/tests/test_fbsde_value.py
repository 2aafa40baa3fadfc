import csv

import numpy as np
import pytest

from mf_fbsde.fbsde_value import (
    MarkovProblem,
    ValueConfig,
    ValueSurface,
    backward_semigroup,
    build_background,
    build_value_surface,
    dpp_check,
    dpp_residual,
    regularity_probe,
    value_estimate,
    value_function,
    write_dpp_csv,
)
from mf_fbsde.meanfield_sde import brownian_coefficients
from mf_fbsde.stochastic_engine import Interaction, build_grid, sample_brownian

T = 0.5


def heat_problem():
    return MarkovProblem(brownian_coefficients(1), Interaction(), Interaction(own=lambda t, x: x[..., 0] ** 2), 0.0, T)


def mean_field_problem():
    # f = y' with Phi = x + x'^2 / 2
    return MarkovProblem(
        brownian_coefficients(1),
        Interaction(primed=lambda t, xp, yp: yp),
        Interaction(primed=lambda t, xp: 0.5 * xp[..., 0] ** 2, own=lambda t, x: x[..., 0]),
        0.0,
        T,
    )


@pytest.fixture(scope="module")
def heat_bg():
    g = build_grid(0.0, T, 8)
    return build_background(heat_problem(), 4000, sample_brownian(g, 1, 4000, 0))


CFG = ValueConfig(n_paths=20_000, seed=3, regression_degree=2)


def test_heat_value_matches_closed_form(heat_bg):
    for t, x in [(0.0, 0.0), (0.25, 0.7), (0.4375, -1.0)]:
        est = value_estimate(heat_bg, t, x, CFG)
        assert est.consistent
        assert abs(est.value - (x * x + T - t)) < 3 * est.std_error + 1e-3


def test_terminal_value_is_exact(heat_bg):
    est = value_estimate(heat_bg, T, 1.3, CFG)
    assert est.value == pytest.approx(1.69, abs=1e-14) and est.std_error == 0.0


def test_mean_field_value_against_closed_form():
    # E[X_T'^2]/2 = T/2 accrues at rate one: u(t, x) = x + (T/2) e^{T - t}, up to the explicit-scheme bias
    prob = mean_field_problem()
    g = build_grid(0.0, T, 32)
    bg = build_background(prob, 20_000, sample_brownian(g, 1, 20_000, 1))
    truth = 0.3 + 0.5 * T * np.exp(T)
    assert value_function(bg, 0.0, 0.3, CFG) == pytest.approx(truth, rel=0.03)
    assert prob.validate(np.random.default_rng(0)) == 0.0


def test_background_horizon_mismatch():
    g = build_grid(0.0, 1.0, 4)
    with pytest.raises(ValueError):
        build_background(heat_problem(), 10, sample_brownian(g, 1, 10, 0))


def test_semigroup_with_zero_horizon_is_identity(heat_bg):
    eta = lambda s: s[:, 0] ** 3  # noqa: E731
    assert backward_semigroup(heat_bg, 0.25, 0.4, 0.0, eta, CFG) == pytest.approx(0.064)


def test_heat_semigroup_of_quadratic(heat_bg):
    # G_{t,t+d}[x^2] = x^2 + d for zero driver
    v = backward_semigroup(heat_bg, 0.125, 0.5, 0.25, lambda s: s[:, 0] ** 2, CFG)
    assert v == pytest.approx(0.25 + 0.25, abs=0.02)


def test_dpp_on_small_heat_surface(heat_bg, tmp_path):
    xs = np.linspace(-1.5, 1.5, 13)
    surface = build_value_surface(heat_bg, [0.0, 0.25], xs, CFG)
    assert surface.provenance == "probabilistic" and surface.std_errors.shape == (2, 13)
    rec = dpp_check(heat_bg, surface, 0.0, 0.25, 0.25, CFG)
    assert rec.passed, rec
    zero = dpp_check(heat_bg, surface, 0.25, 0.0, 0.0, CFG)
    assert zero.residual == 0.0 and zero.passed
    assert dpp_residual(heat_bg, surface, 0.0, 0.0, 0.0, CFG) == 0.0
    with pytest.raises(ValueError):
        dpp_check(heat_bg, surface, 0.0, 3.0, 0.25, CFG)
    write_dpp_csv([rec, zero], tmp_path / "dpp.csv")
    rows = list(csv.reader(open(tmp_path / "dpp.csv")))
    assert rows[0] == ["t", "x", "delta", "lhs", "rhs", "residual", "threshold"] and len(rows) == 3


def exact_surface(n_times=9):
    times = np.linspace(0.0, T, n_times)
    xs = np.linspace(-1.0, 1.0, 21)
    return ValueSurface(times, xs, xs[None, :] ** 2 + (T - times)[:, None], "closed_form")


def test_surface_interpolation_and_errors(tmp_path):
    s = exact_surface()
    assert s.interpolate(0.0, np.array([0.05]))[0] == pytest.approx(0.0025 + 0.5 + 0.0025)
    with pytest.raises(ValueError):
        s.interpolate(0.0, np.array([1.5]))
    # linear continuation from the last cell
    assert s.interpolate(0.0, np.array([1.1]), extrapolate=True)[0] == pytest.approx(1.5 + 0.1 * 1.9)
    with pytest.raises(ValueError):
        s.time_index(0.1)
    with pytest.raises(ValueError):
        ValueSurface(s.times, s.xs, s.values[:, :5], "bad")
    with pytest.raises(FloatingPointError):
        ValueSurface(s.times, s.xs, np.full_like(s.values, np.nan), "bad")
    assert s.second_difference_bound(0.0) == pytest.approx(2.0)
    s.write_csv(tmp_path / "u.csv")
    rows = list(csv.reader(open(tmp_path / "u.csv")))
    assert rows[0] == ["t", "x", "u", "provenance"] and len(rows) == 1 + 9 * 21


def test_regularity_probe():
    rep = regularity_probe(exact_surface())
    assert rep["lipschitz_x"] == pytest.approx(1.9)
    assert rep["holder_t"] == pytest.approx(1.0, abs=1e-9)
    flat = ValueSurface(np.linspace(0, 1, 8), np.linspace(0, 1, 3), np.ones((8, 3)), "flat")
    assert regularity_probe(flat)["holder_t"] == "flat"
    with pytest.raises(ValueError):
        regularity_probe(exact_surface(7))
