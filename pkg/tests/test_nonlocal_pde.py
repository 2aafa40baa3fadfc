import json
import math

import numpy as np
import pytest
from scipy import integrate

from mf_fbsde.fbsde_value import MarkovProblem, ValueSurface, build_background
from mf_fbsde.meanfield_sde import ForwardCoefficients, brownian_coefficients
from mf_fbsde.nonlocal_pde import (
    GrowthSpec,
    boundary_influence,
    chi_supersolution_check,
    exp_transform,
    growth_critical_time,
    make_pde_grid,
    solve_nonlocal_pde_1d,
    transform_surface,
    viscosity_crosscheck,
    write_certificate_json,
    write_growth_csv,
)
from mf_fbsde.stochastic_engine import Interaction, build_grid, sample_brownian

T = 0.5


def brownian_problem(phi, f=None):
    return MarkovProblem(brownian_coefficients(1), f or Interaction(), Interaction(own=phi), 0.0, T)


def background_for(problem, K=8, M=500):
    g = build_grid(0.0, problem.T, K)
    return build_background(problem, M, sample_brownian(g, 1, M, 0))


def test_heat_quadratic_is_exact_and_terminal_bitwise():
    prob = brownian_problem(lambda t, x: x[..., 0] ** 2)
    bg = background_for(prob)
    grid = make_pde_grid(prob, bg, -1.0, 1.0, 41)
    u = solve_nonlocal_pde_1d(prob, bg, grid)
    assert u.provenance == "pde" and grid.cfl_ratio <= 0.9
    truth = grid.xs[None, :] ** 2 + (T - u.times)[:, None]
    assert np.max(np.abs(u.values - truth)) < 1e-10
    assert np.array_equal(u.values[-1], grid.xs**2)
    assert len(u.times) == bg.grid.n_steps + 1


def test_grid_rejections():
    prob = brownian_problem(lambda t, x: x[..., 0] ** 2)
    bg = background_for(prob)
    with pytest.raises(ValueError):
        make_pde_grid(prob, bg, -1.0, 1.0, 4)
    # forcing one step per background step breaks the CFL bound on a fine mesh
    with pytest.raises(ValueError):
        make_pde_grid(prob, bg, -1.0, 1.0, 201, refine=1)


def test_time_refinement_order():
    # with dx fixed, halving dt twice isolates the first-order time error
    prob = brownian_problem(lambda t, x: np.sin(x[..., 0]))
    bg = background_for(prob)
    base = make_pde_grid(prob, bg, -3.0, 3.0, 31)
    sols = [
        solve_nonlocal_pde_1d(prob, bg, make_pde_grid(prob, bg, -3.0, 3.0, 31, refine=base.refine * m)).values[0]
        for m in (1, 2, 4)
    ]
    order = math.log2(np.max(np.abs(sols[0] - sols[1])) / np.max(np.abs(sols[1] - sols[2])))
    assert order >= 0.8
    exact = np.sin(base.xs) * math.exp(-T / 2)
    assert np.max(np.abs(sols[2] - exact)[8:-8]) < 5e-3


def test_nonlocal_source_against_closed_form():
    # f = y' with Phi = x + x'^2 / 2: u(t, x) = x + (T / 2) e^{T - t}
    f = Interaction(primed=lambda t, xp, yp: yp)
    Phi = Interaction(own=lambda t, x: x[..., 0], primed=lambda t, xp: 0.5 * xp[..., 0] ** 2)
    prob = MarkovProblem(brownian_coefficients(1), f, Phi, 0.0, T)
    bg = background_for(prob, K=32, M=20_000)
    u = solve_nonlocal_pde_1d(prob, bg, make_pde_grid(prob, bg, -2.0, 2.0, 41))
    # the source reads E'[Y'] from the background, so u - x tracks its mean
    mean_y = np.array([bg.Y(k).mean() for k in range(bg.grid.n_steps + 1)])
    expect = u.xs[None, :] + mean_y[:, None]
    assert np.max(np.abs(u.values[0] - (u.xs + 0.5 * T * math.exp(T)))) < 0.03
    assert np.max(np.abs(u.values - expect)) < 0.03


def test_boundary_influence_small_for_heat():
    prob = brownian_problem(lambda t, x: x[..., 0] ** 2)
    bg = background_for(prob)
    grid = make_pde_grid(prob, bg, -1.0, 1.0, 41)
    assert boundary_influence(prob, bg, grid) < 1e-9


def test_crosscheck_identity_and_mismatch():
    xs = np.linspace(0, 1, 11)
    times = np.array([0.0, 0.5])
    a = ValueSurface(times, xs, np.outer([1.0, 2.0], xs), "probabilistic")
    b = ValueSurface(times, xs, np.outer([1.0, 2.0], xs), "pde")
    rep = viscosity_crosscheck(a, b)
    assert rep["max_discrepancy"] == 0.0 and rep["pass"]
    shifted = ValueSurface(times, xs, np.outer([1.0, 2.0], xs) + 0.05, "pde")
    assert not viscosity_crosscheck(a, shifted)["pass"]
    with pytest.raises(ValueError):
        viscosity_crosscheck(a, ValueSurface(times, xs[:5], np.zeros((2, 5)), "pde"))


def test_exp_transform():
    times = np.linspace(0.0, 1.0, 5)
    xs = np.linspace(-1, 1, 3)
    ones = ValueSurface(times, xs, np.ones((5, 3)), "closed_form")
    out, driver, worst = exp_transform(ones, 1.0)
    assert np.allclose(out.values, np.exp(times)[:, None]) and driver is None
    back = transform_surface(out, -1.0)
    assert np.max(np.abs(back.values - 1.0)) < 1e-15
    # f = K y has transformed slope exactly -(nu - K)
    f = Interaction(own=lambda t, x, y, z: 1.0 * y)
    _, driver, worst = exp_transform(ones, 2.0, K=1.0, f=f, rng=np.random.default_rng(0), n_probes=200)
    assert worst == pytest.approx(-1.0, abs=1e-9)
    with pytest.raises(ValueError):
        exp_transform(ones, 1.0, K=1.0)
    # a driver whose true constant exceeds the declared K is caught
    with pytest.raises(ValueError):
        exp_transform(ones, 2.0, K=1.0, f=Interaction(own=lambda t, x, y, z: 3.0 * y), n_probes=50)


def frozen_problem():
    zero = ForwardCoefficients(
        b=Interaction(own=lambda t, x: np.zeros_like(x), out_shape=(1,)),
        sigma=Interaction(own=lambda t, x: np.zeros(x.shape + (1,)), out_shape=(1, 1)),
        lipschitz_C=1.0,
        growth_C=1.0,
    )
    return MarkovProblem(zero, Interaction(), Interaction(own=lambda t, x: x[..., 0]), 0.0, 1.0)


def test_chi_certificate_on_frozen_state(tmp_path):
    prob = frozen_problem()
    bg = background_for(prob, K=4, M=10)
    cert = chi_supersolution_check(prob, bg, A=2.0, p=2.0, K=1.0)
    # psi(0) = 1 at every time, so C_p = 1.2 and C1 = p^2 C + K + K C_p + 1
    assert cert.C_p_raw == 1.0 and cert.C_p_est == pytest.approx(1.2)
    assert cert.C1 == pytest.approx(4.0 + 1.0 + 1.2 + 1.0)
    assert cert.passed and cert.max_lhs < 0
    assert not chi_supersolution_check(prob, bg, A=2.0, p=2.0, K=1.0, C1=0.0).passed
    with pytest.raises(ValueError):
        chi_supersolution_check(prob, bg, A=1.0, p=2.0, K=1.0)
    write_certificate_json(cert, tmp_path / "c.json")
    assert json.load(open(tmp_path / "c.json"))["pass"] is True


@pytest.mark.parametrize("A,sigma,expected", [(1.0, 1.0, 0.5), (2.0, 1.0, 0.25), (1.0, 0.5, 2.0), (1.0, 0.0, math.inf)])
def test_growth_critical_time(A, sigma, expected):
    assert growth_critical_time(GrowthSpec(A, sigma, 1.0), probe_times=[0.1])["t_star"] == expected


def test_growth_ladder_against_quadrature(tmp_path):
    spec = GrowthSpec(1.0, 1.0, 1.0)
    rep = growth_critical_time(spec, probe_times=[0.25, 0.5, 0.75])

    def integrand(b, t):
        g = 0.5 * np.logaddexp(2.0 * b, 0.0)
        return math.exp(g * g - b * b / (2 * t)) / math.sqrt(2 * math.pi * t)

    exact, _ = integrate.quad(integrand, -np.inf, np.inf, args=(0.25,))
    rows = {(r["t"], r["truncation_R"]): r for r in rep["rows"]}
    assert rows[(0.25, 32.0)]["integral"] == pytest.approx(exact, rel=1e-6)
    assert rows[(0.25, 32.0)]["verdict"] == "finite"
    assert rows[(0.25, 2.0)]["tail_bound"] >= exact - rows[(0.25, 2.0)]["integral"]
    for t in (0.5, 0.75):
        logs = [rows[(t, R)]["log_integral"] for R in (2.0, 4.0, 8.0, 16.0, 32.0)]
        assert rows[(t, 32.0)]["verdict"] == "divergent"
        assert all(b > a + 0.1 for a, b in zip(logs, logs[1:]))
    write_growth_csv(rep, tmp_path / "g.csv")
    assert open(tmp_path / "g.csv").readline().strip() == "t,truncation_R,integral_value,verdict"
    with pytest.raises(ValueError):
        GrowthSpec(0.0, 1.0, 1.0)
