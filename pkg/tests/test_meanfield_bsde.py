import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mf_fbsde.meanfield_bsde import (
    Driver,
    PicardConfig,
    PicardNotConverged,
    Regressor,
    SingularRegression,
    TerminalFunctional,
    beta_norm,
    contraction_report,
    default_beta,
    solve_classical_bsde,
    solve_meanfield_bsde,
    stability_gap,
    write_diagnostics_json,
    write_solution_csv,
)
from mf_fbsde.meanfield_sde import brownian_coefficients, solve_mckean
from mf_fbsde.stochastic_engine import Interaction, build_grid, sample_brownian


def brownian_setup(M=2000, K=16, T=1.0, seed=0):
    g = build_grid(0.0, T, K)
    bundle = sample_brownian(g, 1, M, seed)
    cloud, _ = solve_mckean(brownian_coefficients(1), 0.0, M, bundle)
    return cloud, bundle


def test_default_beta():
    assert default_beta(1.0) == 21.0
    assert default_beta(0.0) == 1.0
    with pytest.raises(ValueError):
        PicardConfig(max_iter=0)
    with pytest.raises(ValueError):
        PicardConfig(tol=0.0)


@settings(max_examples=20, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=4, max_size=4), st.integers(0, 3))
def test_regressor_recovers_polynomials(coefs, degree):
    rng = np.random.default_rng(degree)
    x = rng.normal(size=500)
    target = sum(c * x**j for j, c in enumerate(coefs[: degree + 1]))
    fitted = Regressor(x, degree).fit(target)
    assert np.allclose(fitted, target, atol=1e-8 * (1 + np.abs(target).max()))


def test_regressor_degenerate_states():
    # a point mass collapses to the sample mean
    reg = Regressor(np.ones((10, 1)), 3)
    assert reg.n_basis == 1
    assert np.allclose(reg.fit(np.arange(10.0)), 4.5)
    # a duplicated coordinate is dropped before the basis is built
    x = np.random.default_rng(1).normal(size=200)
    assert Regressor(np.stack([x, 2 * x], axis=1), 2).n_coords == 1


def test_singular_regression_is_raised():
    with pytest.raises(SingularRegression):
        Regressor(np.random.default_rng(0).normal(size=3), 5)
    # a two-point state cannot carry a cubic basis
    with pytest.raises(SingularRegression):
        Regressor(np.tile([0.0, 1.0], 50), 3)


def test_classical_martingale_representation():
    # xi = B_T with g = 0 gives Y_t = B_t and Z = 1
    cloud, bundle = brownian_setup()
    pair = solve_classical_bsde(None, cloud.states[:, -1, 0], cloud, bundle, PicardConfig(regression_degree=1))
    # at t = 0 the state is a point, so Y_0 is the sample mean of xi
    assert np.allclose(pair.Y[:, 0], cloud.states[:, -1, 0].mean(), atol=1e-12)
    assert np.sqrt(np.mean((pair.Y - cloud.states[:, :, 0]) ** 2)) < 0.05
    assert abs(pair.Z[:, :-1, 0].mean() - 1.0) < 0.05
    assert np.array_equal(pair.Z[:, -1], pair.Z[:, -2])


def test_linear_driver_matches_discrete_exponential():
    # f = y' with xi = 1: the Picard fixed point solves Y_k = Y_{k+1} + dt Y_k
    K, T = 20, 1.0
    cloud, bundle = brownian_setup(M=200, K=K, T=T)
    drv = Driver(Interaction(primed=lambda t, xp, yp, zp: yp), lipschitz_C=1.0, nondecreasing_in_yprime=True,
                 independent_of_zprime=True)
    pair = solve_meanfield_bsde(drv, np.ones(200), cloud, bundle, PicardConfig(tol=1e-12, max_iter=100))
    assert pair.Y0 == pytest.approx((1 - T / K) ** (-K), rel=1e-9)
    assert pair.Y0 == pytest.approx(math.e, rel=0.06)
    report = contraction_report(pair)
    assert report.within_bound and report.bound == pytest.approx(2**-0.5)


def test_picard_failure_carries_history():
    cloud, bundle = brownian_setup(M=200)
    drv = Driver(Interaction(primed=lambda t, xp, yp, zp: yp), lipschitz_C=1.0)
    with pytest.raises(PicardNotConverged) as info:
        solve_meanfield_bsde(drv, np.ones(200), cloud, bundle, PicardConfig(max_iter=2, tol=1e-14))
    assert len(info.value.history) == 1
    assert info.value.history[0]["iteration"] == 1


def test_contraction_report_flags_slow_ratios():
    good = contraction_report([{"gap_beta_norm": g} for g in (1.0, 0.5, 0.25)])
    assert good.within_bound and good.ratios == [0.5, 0.5]
    bad = contraction_report([{"gap_beta_norm": g} for g in (1.0, 0.9)])
    assert not bad.within_bound
    # gaps at round-off are excluded from the ratio test
    tiny = contraction_report([{"gap_beta_norm": g, "norm": 1.0} for g in (1e-14, 1e-13)])
    assert tiny.immediate and tiny.ratios == []


def test_beta_norm_of_constant():
    g = build_grid(0.0, 1.0, 4)
    dY = np.ones((3, 5))
    dZ = np.zeros((3, 5, 1))
    expected = math.sqrt(sum(math.exp(2.0 * t) * 0.25 for t in g.nodes[:4]))
    assert beta_norm(dY, dZ, g, 2.0) == pytest.approx(expected)


def test_stability_estimate_on_shifted_terminal():
    cloud, bundle = brownian_setup(M=500)
    drv = Driver(Interaction(primed=lambda t, xp, yp, zp: 0.5 * yp, own=lambda t, x, y, z: -0.5 * y), 1.0)
    xi1 = np.sin(cloud.states[:, -1, 0])
    xi2 = xi1 + 0.1
    p1 = solve_meanfield_bsde(drv, xi1, cloud, bundle)
    p2 = solve_meanfield_bsde(drv, xi2, cloud, bundle)
    rep = stability_gap(p1, p2, xi1, xi2, lipschitz_C=1.0)
    assert rep.passed and rep.worst_ratio <= 1.0 + 1e-12
    # equality at T, strict slack earlier
    assert rep.lhs[-1] == pytest.approx(0.01) and rep.rhs[-1] == pytest.approx(0.01)
    assert np.all(rep.lhs[:-1] < rep.rhs[:-1])
    with pytest.raises(ValueError):
        stability_gap(p1, solve_meanfield_bsde(drv, xi1[:100], *brownian_setup(M=100)), xi1, xi2)


def test_terminal_functional_rejects_non_finite():
    cloud, bundle = brownian_setup(M=10, K=2)
    with pytest.raises(FloatingPointError):
        TerminalFunctional(lambda b, x: np.full(10, np.nan)).evaluate(bundle, cloud)


def test_driver_probe_detects_false_flags():
    rng = np.random.default_rng(0)
    honest = Driver(Interaction(primed=lambda t, xp, yp, zp: np.tanh(yp)), 1.0, True, True)
    assert honest.probe(rng)["max_zprime_response"] == 0.0
    with pytest.raises(ValueError):
        Driver(Interaction(primed=lambda t, xp, yp, zp: -zp[..., 0]), 1.0, independent_of_zprime=True).probe(rng)
    with pytest.raises(ValueError):
        Driver(Interaction(primed=lambda t, xp, yp, zp: -yp), 1.0, nondecreasing_in_yprime=True).probe(rng)


def test_writers(tmp_path):
    cloud, bundle = brownian_setup(M=4, K=2)
    drv = Driver(Interaction(primed=lambda t, xp, yp, zp: yp), 1.0)
    pair = solve_meanfield_bsde(drv, np.ones(4), cloud, bundle, PicardConfig(regression_degree=0))
    write_solution_csv(pair, tmp_path / "sol.csv")
    write_diagnostics_json(pair, tmp_path / "diag.json")
    rows = list(csv.reader(open(tmp_path / "sol.csv")))
    assert rows[0] == ["path", "t", "Y", "Z_1"] and len(rows) == 1 + 4 * 3
    diag = json.load(open(tmp_path / "diag.json"))
    assert [set(r) for r in diag] == [{"iteration", "gap_beta_norm", "ratio"}] * len(diag)
