"""Code-registered coefficient families.

Families are closed-form coefficient sets with numeric knobs; scenario files
select one by name.  Expressions are never parsed from text.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import norm

from ..comparison_lab import decreasing_yprime_scenario, random_compliant_scenario, zprime_scenario
from ..fbsde_value import MarkovProblem
from ..meanfield_sde import ForwardCoefficients, brownian_coefficients
from ..stochastic_engine import Interaction

__all__ = ["Family", "FAMILIES", "battery_scenarios"]

MARKOV_TASKS = ("background", "value_surface", "pde", "crosscheck", "dpp", "regularity", "chi_certificate", "growth")


@dataclass(frozen=True)
class Family:
    name: str
    description: str
    kind: str
    tasks: tuple
    default_tasks: tuple
    defaults: dict = field(default_factory=dict)
    build: Callable | None = None
    closed_form: Callable | None = None


def _heat(scn) -> MarkovProblem:
    return MarkovProblem(
        brownian_coefficients(1),
        Interaction(),
        Interaction(own=lambda t, x: x[..., 0] ** 2),
        0.0,
        scn.get("problem", "T"),
        lipschitz_C=0.0,
        growth_C=1.0,
        name="heat",
    )


def _heat_truth(scn, t, x):
    return x**2 + (scn.get("problem", "T") - t)


def _abs_terminal(scn) -> MarkovProblem:
    return MarkovProblem(
        brownian_coefficients(1),
        Interaction(),
        Interaction(own=lambda t, x: np.abs(x[..., 0])),
        0.0,
        scn.get("problem", "T"),
        lipschitz_C=0.0,
        growth_C=1.0,
        name="abs_terminal",
    )


def _abs_truth(scn, t, x):
    tau = scn.get("problem", "T") - t
    x = np.asarray(x, dtype=float)
    if tau <= 0:
        return np.abs(x)
    s = math.sqrt(tau)
    return x * (2.0 * norm.cdf(x / s) - 1.0) + 2.0 * s * norm.pdf(x / s)


def _example_7_1(scn) -> MarkovProblem:
    sg = scn.get("problem", "sigma")
    fwd = ForwardCoefficients(
        b=Interaction(own=lambda t, x: 0.5 * sg * sg * x, out_shape=(1,)),
        sigma=Interaction(own=lambda t, x: (sg * x)[..., None], out_shape=(1, 1)),
        lipschitz_C=max(sg * sg, sg),
        growth_C=max(sg * sg, sg),
        name="geometric",
    )
    return MarkovProblem(
        fwd,
        Interaction(primed=lambda t, xp, yp: yp),
        Interaction(primed=lambda t, xp: 0.5 * xp[..., 0], own=lambda t, x: 0.5 * x[..., 0]),
        1.0,
        scn.get("problem", "T"),
        lipschitz_C=1.0,
        growth_C=1.0,
        name="example_7_1",
    )


def _example_7_1_truth(scn, t, x):
    sg, T = scn.get("problem", "sigma"), scn.get("problem", "T")
    e = math.exp(0.5 * sg * sg * T)
    return 0.5 * x * math.exp(0.5 * sg * sg * (T - t)) + e * math.exp(T - t) - 0.5 * e


LINEAR_MF = {"a": 1.0, "s": 0.5, "x0": 1.0, "gamma": 1.0}


def _linear_mf(scn) -> MarkovProblem:
    a, s, g = LINEAR_MF["a"], LINEAR_MF["s"], LINEAR_MF["gamma"]
    fwd = ForwardCoefficients(
        b=Interaction(primed=lambda t, xp: a * xp, own=lambda t, x: -a * x, out_shape=(1,)),
        sigma=Interaction(own=lambda t, x: np.full(x.shape + (1,), s), out_shape=(1, 1)),
        lipschitz_C=2 * a,
        growth_C=max(2 * a, s),
        name="linear_mf",
    )
    return MarkovProblem(
        fwd,
        Interaction(own=lambda t, x, y, z: g * y),
        Interaction(own=lambda t, x: x[..., 0]),
        LINEAR_MF["x0"],
        scn.get("problem", "T"),
        lipschitz_C=g,
        growth_C=1.0,
        name="linear_mf",
    )


def _dpp_nonlinear(scn) -> MarkovProblem:
    fwd = ForwardCoefficients(
        b=Interaction(primed=lambda t, xp: 0.3 * xp, own=lambda t, x: -0.3 * x, out_shape=(1,)),
        sigma=Interaction(own=lambda t, x: (0.8 + 0.2 * np.cos(x))[..., None], out_shape=(1, 1)),
        lipschitz_C=1.0,
        growth_C=1.0,
        name="mean_reverting",
    )
    f = Interaction(
        primed=lambda t, xp, yp: 0.4 * np.tanh(yp),
        own=lambda t, x, y, z: -0.3 * y + 0.2 * np.abs(z[..., 0]) + 0.2 * np.cos(x[..., 0]),
    )
    Phi = Interaction(primed=lambda t, xp: 0.5 * xp[..., 0], own=lambda t, x: np.sin(x[..., 0]))
    return MarkovProblem(fwd, f, Phi, 0.0, scn.get("problem", "T"), 1.0, 1.0, "dpp_nonlinear")


def _chi_linear(scn) -> MarkovProblem:
    fwd = ForwardCoefficients(
        b=Interaction(own=lambda t, x: 0.5 * x, out_shape=(1,)),
        sigma=Interaction(own=lambda t, x: (0.5 * x + 0.5)[..., None], out_shape=(1, 1)),
        lipschitz_C=1.0,
        growth_C=1.0,
        name="affine",
    )
    return MarkovProblem(
        fwd,
        Interaction(primed=lambda t, xp, yp: 0.5 * yp, own=lambda t, x, y, z: -0.5 * y + 0.5 * np.abs(z[..., 0])),
        Interaction(own=lambda t, x: x[..., 0]),
        0.0,
        scn.get("problem", "T"),
        lipschitz_C=1.0,
        growth_C=1.0,
        name="chi_linear",
    )


def battery_scenarios(scn) -> list:
    """Compliant random scenarios followed, optionally, by the two counterexamples."""
    seed = scn.get("problem", "battery_seed")
    T = scn.get("problem", "T")
    out = [random_compliant_scenario(seed, i, T) for i in range(scn.get("problem", "battery_size"))]
    if scn.get("problem", "include_counterexamples"):
        out += [zprime_scenario(), decreasing_yprime_scenario()]
    return out


def _markov(name, description, build, truth=None, defaults=None, default_tasks=("background", "value_surface", "pde", "crosscheck")):
    return Family(name, description, "markov", MARKOV_TASKS, default_tasks, defaults or {}, build, truth)


FAMILIES: dict[str, Family] = {
    "example_3_1": Family(
        "example_3_1",
        "f = -z', xi1 = -(B_1^+)^3 against xi2 = 0 on [0, 1]: the z'-dependence counterexample",
        "example_3_1",
        ("bsde",),
        ("bsde",),
        {("problem", "T"): 1.0, ("simulation", "M"): 100_000, ("simulation", "dt"): 1.0 / 64.0},
    ),
    "example_3_2": Family(
        "example_3_2",
        "f = -y', xi1 = B_1^2 against xi2 = 0 on [0, 2]: the decreasing-in-y' counterexample",
        "example_3_2",
        ("bsde",),
        ("bsde",),
        {("problem", "T"): 2.0, ("simulation", "M"): 20_000, ("simulation", "dt"): 1.0 / 128.0},
    ),
    "randomized_battery": Family(
        "randomized_battery",
        "random drivers meeting the comparison hypotheses, plus both counterexamples",
        "battery",
        ("comparison", "contraction"),
        ("comparison", "contraction"),
        {("problem", "T"): 1.0, ("simulation", "M"): 10_000, ("simulation", "dt"): 1.0 / 32.0},
    ),
    "heat": _markov(
        "heat",
        "b = 0, sigma = 1, f = 0, Phi = x^2; u = x^2 + T - t",
        _heat,
        _heat_truth,
        {
            ("problem", "T"): 0.5,
            ("simulation", "M"): 100_000,
            ("simulation", "dt"): 1.0 / 32.0,
            ("simulation", "x_min"): -1.0,
            ("simulation", "x_max"): 1.0,
            ("simulation", "surface_times"): 3,
            ("tasks", "tol_crosscheck"): 1e-2,
        },
    ),
    "abs_terminal": _markov(
        "abs_terminal",
        "b = 0, sigma = 1, f = 0, Phi = |x|; closed form through the normal CDF",
        _abs_terminal,
        _abs_truth,
        {
            ("problem", "T"): 0.5,
            ("simulation", "M"): 20_000,
            ("simulation", "dt"): 1.0 / 32.0,
            ("simulation", "x_min"): -2.0,
            ("simulation", "x_max"): 2.0,
        },
        ("background", "pde"),
    ),
    "example_7_1": _markov(
        "example_7_1",
        "sigma(x) = sigma x, b = sigma^2 x / 2, f = y', x0 = 1, Phi = (x + x') / 2",
        _example_7_1,
        _example_7_1_truth,
        {
            ("problem", "T"): 0.5,
            ("problem", "sigma"): 0.3,
            ("simulation", "M"): 100_000,
            ("simulation", "dt"): 1.0 / 64.0,
            ("simulation", "x_min"): 0.5,
            ("simulation", "x_max"): 2.0,
            ("simulation", "surface_times"): 5,
        },
        ("background", "value_surface", "pde", "crosscheck", "growth"),
    ),
    "linear_mf": _markov(
        "linear_mf",
        "b = a (x' - x), sigma = s, f = gamma y, Phi = x; E[Y_t] = x0 exp(gamma (T - t))",
        _linear_mf,
        None,
        {
            ("problem", "T"): 1.0,
            ("simulation", "M"): 20_000,
            ("simulation", "dt"): 1.0 / 32.0,
            ("simulation", "x_min"): -1.0,
            ("simulation", "x_max"): 3.0,
        },
        ("background",),
    ),
    "dpp_nonlinear": _markov(
        "dpp_nonlinear",
        "mean-reverting forward with state-dependent volatility and a nonlinear mean-field driver",
        _dpp_nonlinear,
        None,
        {
            ("problem", "T"): 1.0,
            ("simulation", "M"): 20_000,
            ("simulation", "dt"): 1.0 / 32.0,
            ("simulation", "x_min"): -3.0,
            ("simulation", "x_max"): 3.0,
            ("simulation", "dx"): 0.15,
            ("simulation", "surface_times"): 9,
        },
        ("background", "value_surface", "dpp", "regularity"),
    ),
    "chi_linear": _markov(
        "chi_linear",
        "b = x/2, sigma = (x + 1)/2, Lipschitz driver with K = 1: polynomial-growth certificate",
        _chi_linear,
        None,
        {
            ("problem", "T"): 1.0,
            ("simulation", "M"): 20_000,
            ("simulation", "dt"): 1.0 / 16.0,
            ("simulation", "x_min"): -10.0,
            ("simulation", "x_max"): 10.0,
            ("simulation", "dx"): 0.1,
        },
        ("background", "chi_certificate"),
    ),
}
