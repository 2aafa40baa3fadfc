import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mf_fbsde.stochastic_engine import (
    EmpiricalLaw,
    Interaction,
    bootstrap_std_error,
    build_grid,
    derive_seed,
    empirical_expectation,
    philox4x32,
    sample_brownian,
    standard_normals,
    worker_count,
)


# Random123 known-answer vectors for Philox4x32-10
KAT = [
    ((0, 0, 0, 0), (0, 0), (0x6627E8D5, 0xE169C58D, 0xBC57AC4C, 0x9B00DBD8)),
    ((0xFFFFFFFF,) * 4, (0xFFFFFFFF, 0xFFFFFFFF), (0x408F276D, 0x41C83B0E, 0xA20BC7C6, 0x6D5451FD)),
    (
        (0x243F6A88, 0x85A308D3, 0x13198A2E, 0x03707344),
        (0xA4093822, 0x299F31D0),
        (0xD16CFE09, 0x94FDCCEB, 0x5001E420, 0x24126EA1),
    ),
]


@pytest.mark.parametrize("counter,key,expected", KAT)
def test_philox_known_answers(counter, key, expected):
    out = philox4x32([np.array([c], dtype=np.uint64) for c in counter], key)
    assert tuple(int(w[0]) for w in out) == expected


def test_grid_nodes_and_errors():
    g = build_grid(0.0, 1.0, 4)
    assert np.array_equal(g.nodes, [0.0, 0.25, 0.5, 0.75, 1.0])
    assert g.dt == 0.25
    assert g.index_of(0.75) == 3
    with pytest.raises(ValueError):
        g.index_of(0.3)
    with pytest.raises(ValueError):
        build_grid(1.0, 1.0, 4)
    with pytest.raises(ValueError):
        build_grid(0.0, 1.0, 0)
    with pytest.raises(ValueError):
        build_grid(0.0, math.inf, 3)
    sub = g.subgrid(2)
    assert sub.t0 == 0.5 and sub.n_steps == 2
    assert g.refine(3).n_steps == 12


def test_bundle_prefix_stable_and_thread_independent(monkeypatch):
    g = build_grid(0.0, 1.0, 8)
    monkeypatch.setenv("MF_FBSDE_THREADS", "1")
    small = sample_brownian(g, 2, 100, 42)
    monkeypatch.setenv("MF_FBSDE_THREADS", "4")
    assert worker_count() == 4
    big = sample_brownian(g, 2, 1000, 42, chunk_paths=64)
    assert np.array_equal(small.increments, big.increments[:100])
    tail = sample_brownian(g, 2, 50, 42, first_path=100)
    assert np.array_equal(tail.increments, big.increments[100:150])


def test_bundle_moments():
    g = build_grid(0.0, 2.0, 4)
    b = sample_brownian(g, 1, 200_000, 3)
    final = b.paths()[:, -1, 0]
    assert abs(final.mean()) < 4 * math.sqrt(2.0 / 200_000)
    assert abs(final.var() - 2.0) < 0.03
    other = sample_brownian(g, 1, 1000, 4)
    assert not np.allclose(other.increments, b.increments[:1000])


def test_window_and_head_share_increments():
    g = build_grid(0.0, 1.0, 8)
    b = sample_brownian(g, 1, 10, 0)
    w = b.window(3)
    assert w.grid.t0 == g.node(3) and w.first_step == 3
    assert np.array_equal(w.increments, b.increments[:, 3:])
    h = b.head(5)
    assert h.grid.t1 == g.node(5)
    assert np.array_equal(h.increments, b.increments[:, :5])
    s = b.select(2, 6)
    assert s.first_path == 2 and np.array_equal(s.increments, b.increments[2:6])


def test_standard_normals_pure_function_of_address():
    a = standard_normals(9, np.arange(10), np.uint64(3), np.uint64(0))
    b = standard_normals(9, np.arange(5, 10), np.uint64(3), np.uint64(0))
    assert np.array_equal(a[5:], b)


def test_derive_seed_distinct_labels():
    assert derive_seed(0, "a") != derive_seed(0, "b")
    assert derive_seed(1, "a") == derive_seed(1, "a")


def test_empirical_expectation_constant_and_errors():
    law = EmpiricalLaw(np.linspace(-1, 1, 11))
    assert empirical_expectation(law, lambda x: np.ones(len(x))) == 1.0
    with pytest.raises(FloatingPointError), np.errstate(divide="ignore"):
        empirical_expectation(law, lambda x: 1.0 / x[:, 0])
    with pytest.raises(ValueError):
        EmpiricalLaw(np.empty((0, 1)))


def test_positive_cube_moment():
    # E[(B_1^+)^3] = 2 / sqrt(2 pi)
    g = build_grid(0.0, 1.0, 1)
    b1 = sample_brownian(g, 1, 400_000, 5).paths()[:, -1, :]
    est = empirical_expectation(EmpiricalLaw(b1), lambda x: np.maximum(x[:, 0], 0) ** 3)
    assert abs(est - 2 / math.sqrt(2 * math.pi)) < 0.01


def test_bootstrap_se_matches_analytic():
    rng = np.random.default_rng(0)
    v = rng.normal(size=4000)
    se = bootstrap_std_error(v, 400, seed=1)
    assert abs(se / (v.std() / math.sqrt(v.size)) - 1) < 0.15
    assert bootstrap_std_error(v, 400, seed=1) == se
    assert bootstrap_std_error(np.ones(1)) == 0.0


@settings(max_examples=25, deadline=None)
@given(
    st.integers(1, 6),
    st.integers(2, 5),
    st.floats(-2, 2),
    st.floats(-2, 2),
)
def test_interaction_average_matches_brute_force(n_atoms, n_own, a, c):
    rng = np.random.default_rng(n_atoms * 7 + n_own)
    atoms = rng.normal(size=(n_atoms, 1))
    own = rng.normal(size=(n_own, 1))
    k = Interaction(
        own=lambda t, x: a * x[..., 0],
        primed=lambda t, xp: np.sin(xp[..., 0]),
        pair=lambda t, xp, x: c * xp[..., 0] * x[..., 0],
    )
    got = k.average(0.0, (atoms,), (own,), n_own)
    brute = np.array([np.mean([k(0.0, (atoms[j],), (own[i],)) for j in range(n_atoms)]) for i in range(n_own)])
    assert np.allclose(got, brute)


def test_companion_average_excludes_self():
    x = np.array([[0.0], [1.0], [3.0]])
    k = Interaction(primed=lambda t, xp: xp[..., 0])
    got = k.companion_average(0.0, (x,), (3,))
    assert np.allclose(got, [2.0, 1.5, 0.5])
    with pytest.raises(ValueError):
        k.companion_average(0.0, (x[:1],), (1,))
