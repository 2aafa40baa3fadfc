import csv
import math

import numpy as np
import pytest

from mf_fbsde.meanfield_sde import (
    ForwardCoefficients,
    NumericalBlowUp,
    brownian_coefficients,
    solve_conditional_flow,
    solve_mckean,
    solve_n_particle,
    stopped_brownian_coefficients,
    write_law_csv,
    write_trajectories_csv,
)
from mf_fbsde.stochastic_engine import Interaction, build_grid, sample_brownian


def reverting(a=1.0, s=0.5):
    return ForwardCoefficients(
        b=Interaction(primed=lambda t, xp: a * xp, own=lambda t, x: -a * x, out_shape=(1,)),
        sigma=Interaction(own=lambda t, x: np.full(x.shape + (1,), s), out_shape=(1, 1)),
        lipschitz_C=2 * a,
    )


def test_mean_growth_matches_euler_recursion():
    # b = E[X]: the Euler mean is x0 (1 + dt)^K up to Monte Carlo noise in the increments
    co = ForwardCoefficients(
        b=Interaction(primed=lambda t, xp: xp, out_shape=(1,)),
        sigma=Interaction(own=lambda t, x: np.ones(x.shape + (1,)), out_shape=(1, 1)),
    )
    g = build_grid(0.0, 1.0, 16)
    bundle = sample_brownian(g, 1, 50_000, 1)
    cloud, frozen = solve_mckean(co, 1.0, 50_000, bundle)
    noise = bundle.paths()[:, :, 0].mean(axis=0)
    expected = (1 + g.dt) ** np.arange(17)
    assert np.max(np.abs(cloud.states[:, :, 0].mean(axis=0) - expected)) < 3 * math.e * np.abs(noise).max() + 1e-3
    # first-order bias against the continuous-time e
    assert 0.05 < math.e - expected[-1] < 0.1
    assert frozen.n_atoms == 50_000


def test_reverting_variance_closed_form():
    a, s, T = 1.0, 0.5, 1.0
    g = build_grid(0.0, T, 64)
    cloud, _ = solve_mckean(reverting(a, s), 0.3, 40_000, sample_brownian(g, 1, 40_000, 2))
    var = cloud.states[:, -1, 0].var()
    assert abs(var - s * s * (1 - math.exp(-2 * a * T)) / (2 * a)) < 0.01
    assert abs(cloud.states[:, -1, 0].mean() - 0.3) < 0.01


def test_conditional_flow_from_start_reproduces_mckean():
    g = build_grid(0.0, 1.0, 8)
    bundle = sample_brownian(g, 1, 500, 3)
    cloud, frozen = solve_mckean(reverting(), 0.0, 500, bundle)
    flow = solve_conditional_flow(reverting(), frozen, 0, 0.0, bundle)
    assert np.allclose(flow.states, cloud.states, atol=1e-12)
    later = solve_conditional_flow(reverting(), frozen, 4, 1.0, bundle, n_paths=100)
    assert later.offset == 4 and later.states.shape == (100, 5, 1)
    with pytest.raises(IndexError):
        solve_conditional_flow(reverting(), frozen, 8, 1.0, bundle)


def test_n_particle_layout_and_mean_conservation():
    g = build_grid(0.0, 1.0, 8)
    N, R = 9, 20
    bundle = sample_brownian(g, 1, R * (N + 1), 4)
    clouds = solve_n_particle(reverting(), N, 0.0, bundle, R)
    assert len(clouds) == N + 1 and clouds[0].states.shape == (R, 9, 1)
    # the drift a (mean of others - x) keeps the system mean a pure Brownian average
    system_mean = np.mean([c.states[:, -1, 0] for c in clouds], axis=0)
    inc = bundle.increments.reshape(R, N + 1, 8).sum(axis=2).mean(axis=1) * 0.5
    assert np.allclose(system_mean, inc, atol=1e-12)
    with pytest.raises(ValueError):
        solve_n_particle(reverting(), 0, 0.0, bundle)


def test_stopped_brownian_freezes_second_component():
    co = stopped_brownian_coefficients(0.5)
    g = build_grid(0.0, 1.0, 8)
    cloud, _ = solve_mckean(co, 0.0, 100, sample_brownian(g, 1, 100, 5))
    assert np.array_equal(cloud.states[:, 4, 1], cloud.states[:, -1, 1])
    assert np.allclose(cloud.states[:, 4, 0], cloud.states[:, 4, 1])


def test_blow_up_is_located():
    co = ForwardCoefficients(
        b=Interaction(own=lambda t, x: x**3, out_shape=(1,)),
        sigma=Interaction(own=lambda t, x: np.ones(x.shape + (1,)), out_shape=(1, 1)),
    )
    g = build_grid(0.0, 1.0, 8)
    with np.errstate(over="ignore", invalid="ignore"), pytest.raises(NumericalBlowUp) as info:
        solve_mckean(co, 1e3, 10, sample_brownian(g, 1, 10, 0))
    assert info.value.step >= 1


def test_declared_lipschitz_probe():
    rng = np.random.default_rng(0)
    reverting().check_lipschitz(rng)
    liar = ForwardCoefficients(
        b=Interaction(own=lambda t, x: 5 * x, out_shape=(1,)),
        sigma=Interaction(own=lambda t, x: np.ones(x.shape + (1,)), out_shape=(1, 1)),
        lipschitz_C=1.0,
    )
    with pytest.raises(ValueError):
        liar.check_lipschitz(rng)


def test_writers(tmp_path):
    g = build_grid(0.0, 1.0, 2)
    cloud, frozen = solve_mckean(brownian_coefficients(1), 0.0, 3, sample_brownian(g, 1, 3, 0))
    write_trajectories_csv(cloud, tmp_path / "traj.csv")
    write_law_csv(frozen, tmp_path / "law.csv")
    rows = list(csv.reader(open(tmp_path / "traj.csv")))
    assert rows[0] == ["path", "t", "x_1"] and len(rows) == 1 + 3 * 3
    rows = list(csv.reader(open(tmp_path / "law.csv")))
    assert rows[0] == ["t", "atom_index", "x_1"] and len(rows) == 1 + 3 * 3
