"""Comparison properties of mean-field BSDEs as executable checks.

A :class:`ComparisonScenario` bundles two drivers and two terminals with the
ordering ``xi1 <= xi2``, ``f1 <= f2``.  :func:`run_comparison_suite` solves
both equations on shared Brownian paths and flags pathwise violations of
``Y1 <= Y2`` that exceed a bootstrap noise threshold.  The two counterexample
runners reproduce the known failures when the drivers depend on ``z'`` or
decrease in ``y'``.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .meanfield_bsde import (
    BsdePair,
    Driver,
    PicardConfig,
    Regressor,
    TerminalFunctional,
    solve_meanfield_bsde,
)
from .meanfield_sde import (
    ForwardCoefficients,
    ParticleCloud,
    brownian_coefficients,
    solve_mckean,
    stopped_brownian_coefficients,
)
from .stochastic_engine import (
    BrownianBundle,
    Interaction,
    build_grid,
    derive_seed,
    _resample_matrix,
    sample_brownian,
    worker_count,
)

__all__ = [
    "ComparisonScenario",
    "ComparisonConfig",
    "ScenarioOutcome",
    "HypothesisViolation",
    "run_comparison_suite",
    "counterexample_zprime",
    "counterexample_decreasing_yprime",
    "converse_consistency",
    "random_compliant_scenario",
    "split_time_scenario",
    "zprime_scenario",
    "decreasing_yprime_scenario",
    "bootstrap_prediction_se",
    "write_suite_json",
    "write_curve_csv",
]

# E[(B_1^+)^3] for a standard normal
POSITIVE_CUBE_MOMENT = 2.0 / math.sqrt(2.0 * math.pi)


class HypothesisViolation(ValueError):
    """A scenario fails its declared comparison hypotheses on a probe."""


@dataclass(frozen=True)
class ComparisonConfig:
    n_steps: int = 32
    n_paths: int = 20000
    seed: int = 0
    picard: PicardConfig = field(default_factory=PicardConfig)
    n_resamples: int = 200
    threshold_factor: float = 3.0
    n_probes: int = 1000
    # paths whose state lies in either tail (per coordinate, per node) are not
    # tested: polynomial regression extrapolates there with a bias that no
    # bootstrap of the noise can bound
    tail_trim: float = 0.01


@dataclass(frozen=True)
class ComparisonScenario:
    """Two mean-field BSDEs with ordered data.

    ``forward`` generates the regression state (default: the Brownian motion
    itself, started at ``x0``).  ``check_hypotheses = False`` skips the
    pre-solve probes, which is how the counterexamples are run.
    """

    scenario_id: str
    drivers: tuple
    terminals: tuple
    T: float = 1.0
    forward: ForwardCoefficients | None = None
    x0: object = 0.0
    check_hypotheses: bool = True

    def validate(self, rng: np.random.Generator, n_probes: int = 1000) -> dict:
        """Probe the declared flags and the driver ordering ``f1 <= f2``.

        Raises:
            HypothesisViolation: a flag or the ordering fails, or neither
                driver is declared z'-independent / y'-nondecreasing.
        """
        f1, f2 = self.drivers
        if not (f1.independent_of_zprime or f2.independent_of_zprime):
            raise HypothesisViolation(f"{self.scenario_id}: neither driver is declared independent of z'")
        if not (f1.nondecreasing_in_yprime or f2.nondecreasing_in_yprime):
            raise HypothesisViolation(f"{self.scenario_id}: neither driver is declared nondecreasing in y'")
        n, d = self._dims()
        try:
            probes = [drv.probe(rng, n, d, n_probes, self.T) for drv in self.drivers]
        except ValueError as exc:
            raise HypothesisViolation(f"{self.scenario_id}: {exc}") from exc
        t = rng.uniform(0.0, self.T, n_probes)
        xp, x = rng.normal(scale=3.0, size=(2, n_probes, n))
        yp, y = rng.normal(scale=3.0, size=(2, n_probes))
        zp, z = rng.normal(scale=3.0, size=(2, n_probes, d))
        worst = -np.inf
        for i in range(n_probes):
            args = (t[i], xp[i], yp[i], zp[i], x[i], y[i], z[i])
            worst = max(worst, float(f1(*args) - f2(*args)))
        if worst > 1e-12:
            raise HypothesisViolation(f"{self.scenario_id}: f1 exceeds f2 by {worst:.3g} on a probe")
        return {"flags": probes, "max_f1_minus_f2": worst}

    def _dims(self) -> tuple[int, int]:
        fwd = self.forward or brownian_coefficients(1)
        return fwd.n_dim, fwd.d_dim


@dataclass(frozen=True)
class ScenarioOutcome:
    scenario_id: str
    violation_measure: float
    threshold: float
    passed: bool
    pairs: tuple = field(repr=False, default=())
    max_excess: float = 0.0
    traces: tuple = field(repr=False, default=())

    def as_record(self) -> dict:
        return {
            "scenario_id": self.scenario_id,
            "violation_measure": self.violation_measure,
            "threshold": self.threshold,
            "pass": self.passed,
        }


def _forward(scenario: ComparisonScenario, config: ComparisonConfig, seed: int):
    fwd = scenario.forward or brownian_coefficients(1)
    grid = build_grid(0.0, scenario.T, config.n_steps)
    bundle = sample_brownian(grid, fwd.d_dim, config.n_paths, seed)
    cloud, _ = solve_mckean(fwd, scenario.x0, config.n_paths, bundle)
    return cloud, bundle


def _multinomial_weights(seed: int, n_resamples: int, m: int) -> np.ndarray:
    idx = _resample_matrix(seed, n_resamples, m)
    weights = np.empty((n_resamples, m))
    for r in range(n_resamples):
        weights[r] = np.bincount(idx[r], minlength=m)
    return weights


def bootstrap_prediction_se(
    cloud: ParticleCloud,
    values: np.ndarray,
    degree: int = 3,
    n_resamples: int = 200,
    seed: int = 0,
) -> np.ndarray:
    """Per-(path, time) bootstrap std-error of the regression of ``values`` on the state.

    Paths are resampled once (multinomial weights shared by all times) and
    the weighted least-squares fit of ``values[:, k]`` on the polynomial
    basis of ``X_k`` is re-evaluated at every path.  The terminal column is
    data, not an estimate, and gets zero error.
    """
    M, K1 = values.shape
    weights = _multinomial_weights(seed, n_resamples, M)
    se = np.zeros((M, K1))
    for k in range(K1 - 1):
        design = Regressor(cloud.at(k), degree).design()
        nb = design.shape[1]
        outer = (design[:, :, None] * design[:, None, :]).reshape(M, nb * nb)
        gram = (weights @ outer).reshape(n_resamples, nb, nb)
        rhs = weights @ (design * values[:, k, None])
        coef = np.linalg.solve(gram, rhs[..., None])[..., 0]
        rows = max(1, (1 << 22) // n_resamples)
        for lo in range(0, M, rows):
            pred = design[lo : lo + rows] @ coef.T
            se[lo : lo + rows, k] = pred.std(axis=1, ddof=1)
    return se


def _bulk_mask(cloud: ParticleCloud, trim: float) -> np.ndarray:
    """``[path, time]`` mask of states inside the central ``1 - 2 trim`` quantile band."""
    states = cloud.states
    if trim <= 0.0:
        return np.ones(states.shape[:2], dtype=bool)
    lo = np.quantile(states, trim, axis=0)
    hi = np.quantile(states, 1.0 - trim, axis=0)
    return np.all((states >= lo) & (states <= hi), axis=2)


def _solve_pair(scenario: ComparisonScenario, config: ComparisonConfig, index: int):
    seed = derive_seed(config.seed, f"comparison/{scenario.scenario_id}/{index}")
    cloud, bundle = _forward(scenario, config, seed)
    pairs = []
    xis = []
    for drv, term in zip(scenario.drivers, scenario.terminals):
        xi = term.evaluate(bundle, cloud)
        xis.append(xi)
        pairs.append(solve_meanfield_bsde(drv, xi, cloud, bundle, config.picard))
    return cloud, bundle, pairs, xis, seed


def _run_one(scenario: ComparisonScenario, config: ComparisonConfig, index: int) -> ScenarioOutcome:
    if scenario.check_hypotheses:
        rng = np.random.default_rng(derive_seed(config.seed, f"probe/{scenario.scenario_id}/{index}"))
        scenario.validate(rng, config.n_probes)
    cloud, _, (p1, p2), (xi1, xi2), seed = _solve_pair(scenario, config, index)
    if scenario.check_hypotheses and np.any(xi1 > xi2 + 1e-12):
        raise HypothesisViolation(f"{scenario.scenario_id}: xi1 > xi2 on a simulated path")
    diff = p1.Y - p2.Y
    se = bootstrap_prediction_se(
        cloud, diff, config.picard.regression_degree, config.n_resamples, derive_seed(seed, "bootstrap")
    )
    threshold = config.threshold_factor * se
    excess = np.where(_bulk_mask(cloud, config.tail_trim), diff - threshold, -np.inf)
    worst = np.unravel_index(int(np.argmax(excess)), excess.shape)
    tested = np.where(np.isfinite(excess), diff, -np.inf)
    peak = np.unravel_index(int(np.argmax(tested)), tested.shape)
    return ScenarioOutcome(
        scenario.scenario_id,
        float(max(tested[peak], 0.0)),
        float(threshold[peak]),
        bool(excess[worst] <= 1e-12),
        (p1, p2),
        float(excess[worst]),
        (p1.diagnostics, p2.diagnostics),
    )


def run_comparison_suite(
    scenarios: list,
    config: ComparisonConfig | None = None,
    keep_pairs: bool = False,
) -> list[ScenarioOutcome]:
    """Solve every scenario's pair on shared paths and test ``Y1 <= Y2``.

    A scenario passes when ``Y1 - Y2`` never exceeds ``threshold_factor``
    bootstrap std-errors of its regression estimate at the same path and time.
    Paths in the outer ``tail_trim`` quantiles of the state at a node are
    excluded at that node; ``violation_measure`` is the max of ``(Y1 - Y2)^+``
    over the tested entries.

    Args:
        scenarios: the scenarios; compliant ones are probed before solving.
        config: grid, sample size, Picard and bootstrap settings.
        keep_pairs: keep the solved pairs on the outcomes (memory heavy).

    Returns:
        One outcome per scenario, in input order.

    Raises:
        HypothesisViolation: a scenario flagged compliant fails a probe.
    """
    config = config or ComparisonConfig()

    def work(item):
        i, sc = item
        out = _run_one(sc, config, i)
        return out if keep_pairs else ScenarioOutcome(
            out.scenario_id, out.violation_measure, out.threshold, out.passed, (), out.max_excess, out.traces
        )

    workers = worker_count()
    items = list(enumerate(scenarios))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(work, items))
    return [work(item) for item in items]


def write_suite_json(outcomes: list, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump([o.as_record() for o in outcomes], fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_curve_csv(times, mean_y, reference, path) -> None:
    """CSV with columns ``t, E[Y], reference_curve``."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "E[Y]", "reference_curve"])
        for t, m, r in zip(times, mean_y, reference):
            w.writerow([repr(float(t)), repr(float(m)), repr(float(r))])


# ---------------------------------------------------------------------------
# the two counterexamples


def _zprime_driver() -> Driver:
    return Driver(Interaction(primed=lambda t, xp, yp, zp: -zp[..., 0]), 1.0, name="minus_zprime")


def _yprime_driver() -> Driver:
    return Driver(Interaction(primed=lambda t, xp, yp, zp: -yp), 1.0, name="minus_yprime")


def zprime_scenario() -> ComparisonScenario:
    """``f = -z'`` with ``xi1 = -(B_1^+)^3 <= 0 = xi2`` on ``[0, 1]``."""
    drv = _zprime_driver()
    return ComparisonScenario(
        "counterexample_zprime",
        (drv, drv),
        (
            TerminalFunctional(lambda b, x: -np.maximum(b[:, -1, 0], 0.0) ** 3, "minus_positive_cube"),
            TerminalFunctional(lambda b, x: np.zeros(b.shape[0]), "zero"),
        ),
        T=1.0,
        check_hypotheses=False,
    )


def decreasing_yprime_scenario() -> ComparisonScenario:
    """``f = -y'`` with ``xi1 = 0 <= B_1^2 = xi2`` on ``[0, 2]`` (state ``(B_t, B_{t^1})``)."""
    drv = _yprime_driver()
    return ComparisonScenario(
        "counterexample_decreasing_yprime",
        (drv, drv),
        (
            TerminalFunctional(lambda b, x: np.zeros(b.shape[0]), "zero"),
            TerminalFunctional(lambda b, x: x[:, -1, 1] ** 2, "stopped_square"),
        ),
        T=2.0,
        forward=stopped_brownian_coefficients(1.0),
        check_hypotheses=False,
    )


def counterexample_zprime(
    n_paths: int = 100_000,
    n_steps: int = 64,
    seed: int = 0,
    picard: PicardConfig | None = None,
    csv_path=None,
) -> dict:
    """Solve the ``f = -z'`` pair and report the comparison failure at time 0.

    Returns:
        Dict with ``Y0_1``, ``Y0_2``, the reference ``3/2 - E[(B_1^+)^3]``,
        interior ``E[Z_t]`` values against ``-3/2``, and ``violated``.
    """
    config = ComparisonConfig(n_steps=n_steps, n_paths=n_paths, seed=seed, picard=picard or PicardConfig())
    sc = zprime_scenario()
    cloud, bundle, (p1, p2), (xi1, xi2), _ = _solve_pair(sc, config, 0)
    t = p1.grid.nodes
    mean_y = p1.Y.mean(axis=0)
    reference = -POSITIVE_CUBE_MOMENT + 1.5 * (sc.T - t)
    mean_z = p1.Z[:, 1:-1, 0].mean(axis=0)
    if csv_path is not None:
        write_curve_csv(t, mean_y, reference, csv_path)
    y0_ref = 1.5 - POSITIVE_CUBE_MOMENT
    return {
        "Y0_1": p1.Y0,
        "Y0_2": p2.Y0,
        "Y0_reference": y0_ref,
        "Y0_rel_error": abs(p1.Y0 - y0_ref) / y0_ref,
        "mean_Z_interior": mean_z.tolist(),
        "max_Z_rel_error": float(np.max(np.abs(mean_z / -1.5 - 1.0))),
        "terminal_ordered": bool(np.all(xi1 <= xi2)),
        "prob_terminal_strict": float(np.mean(xi1 < xi2)),
        "violated": bool(p1.Y0 > p2.Y0),
        "picard_iterations": p1.iterations,
        "mean_Y": mean_y,
        "reference": reference,
    }


def counterexample_decreasing_yprime(
    n_paths: int = 100_000,
    n_steps: int = 256,
    seed: int = 0,
    picard: PicardConfig | None = None,
    csv_path=None,
) -> dict:
    """Solve the ``f = -y'`` pair on ``[0, 2]`` and report ``P(Y_1 < 0)``.

    The default 256 steps (``dt = 1/128``) keep the explicit scheme's
    ``(1 + dt)^{-K}`` bias on ``E[Y_0]`` under one percent.
    """
    config = ComparisonConfig(n_steps=n_steps, n_paths=n_paths, seed=seed, picard=picard or PicardConfig())
    sc = decreasing_yprime_scenario()
    cloud, bundle, (p_zero, p_sq), _, _ = _solve_pair(sc, config, 0)
    grid = p_sq.grid
    t = grid.nodes
    mean_y = p_sq.Y.mean(axis=0)
    reference = np.exp(-(sc.T - t))
    k1 = grid.index_of(1.0)
    b1 = cloud.states[:, -1, 1]
    late = slice(k1, grid.n_steps + 1)
    closed = b1[:, None] ** 2 - (1.0 - np.exp(-(sc.T - t[late])))[None, :]
    oracle = 2.0 * norm.cdf(math.sqrt(1.0 - math.exp(-1.0))) - 1.0
    if csv_path is not None:
        write_curve_csv(t, mean_y, reference, csv_path)
    prob = float(np.mean(p_sq.Y[:, k1] < p_zero.Y[:, k1]))
    return {
        "max_mean_rel_error": float(np.max(np.abs(mean_y / reference - 1.0))),
        "prob_Y1_negative": float(np.mean(p_sq.Y[:, k1] < 0.0)),
        "prob_Y1_below_zero_solution": prob,
        "prob_reference": oracle,
        "late_rmse_vs_closed_form": float(np.sqrt(np.mean((p_sq.Y[:, late] - closed) ** 2))),
        "zero_solution_max_abs": float(np.max(np.abs(p_zero.Y))),
        "violated": prob > 0.0,
        "picard_iterations": p_sq.iterations,
        "mean_Y": mean_y,
        "reference": reference,
    }


# ---------------------------------------------------------------------------
# converse direction


def converse_consistency(
    scenario: ComparisonScenario,
    t_index: int,
    config: ComparisonConfig | None = None,
    tol: float = 1e-5,
) -> dict:
    """Check ``Y1 = Y2`` and equal driver averages on ``[t, T]``.

    The scenario must carry equal terminals and drivers that coincide from
    ``t`` on, so ``Y1_t = Y2_t`` holds by construction; the report measures
    how closely the solver reproduces the equality on the remaining nodes.

    Returns:
        Dict with ``max_abs_Y_diff``, ``max_driver_residual`` (the absolute
        gap between ``E'[f1(Y1', Z1', Y2, Z2)]`` and ``E'[f2(Y2', Z2', Y2, Z2)]``)
        and ``pass`` against ``tol * (1 + max|Y|)``.
    """
    config = config or ComparisonConfig()
    cloud, _, (p1, p2), _, _ = _solve_pair(scenario, config, 0)
    f1, f2 = scenario.drivers
    M = cloud.n_paths
    K = p1.grid.n_steps
    y_gap = float(np.max(np.abs(p1.Y[:, t_index:] - p2.Y[:, t_index:])))
    resid = 0.0
    for k in range(t_index, K):
        t = p1.grid.node(k)
        x = cloud.at(k)
        own = (x, p2.Y[:, k], p2.Z[:, k, :])
        e1 = f1.f.average(t, (x, p1.Y[:, k], p1.Z[:, k, :]), own, M)
        e2 = f2.f.average(t, (x, p2.Y[:, k], p2.Z[:, k, :]), own, M)
        resid = max(resid, float(np.max(np.abs(e1 - e2))))
    bound = tol * (1.0 + float(np.max(np.abs(p1.Y))))
    return {
        "max_abs_Y_diff": y_gap,
        "max_driver_residual": resid,
        "tolerance": bound,
        "pass": bool(y_gap <= bound and resid <= bound),
    }


# ---------------------------------------------------------------------------
# randomized compliant scenarios


def _driver(own_terms, primed_terms, C, zfree, ymono, name) -> Driver:
    def own(t, x, y, z):
        return sum(term(t, x, y, z) for term in own_terms) if own_terms else np.zeros(np.shape(y))

    def primed(t, xp, yp, zp):
        return sum(term(t, xp, yp, zp) for term in primed_terms)

    return Driver(
        Interaction(own=own, primed=primed if primed_terms else None),
        C,
        independent_of_zprime=zfree,
        nondecreasing_in_yprime=ymono,
        name=name,
    )


def random_compliant_scenario(seed: int, index: int, T: float = 1.0) -> ComparisonScenario:
    """A random pair satisfying both comparison hypotheses by construction.

    The base driver ``a tanh(y') + m sin(x') + b y + c sin(z) + g cos(x)`` is
    nondecreasing in ``y'`` and free of ``z'``.  One of four layouts is
    drawn: both hypotheses on ``f1`` or on ``f2``, or split between them.
    The other driver differs by a nonnegative piece that may depend on
    ``z'`` or decrease in ``y'``, and ``xi2 - xi1`` is nonnegative.
    """
    rng = np.random.default_rng(derive_seed(seed, f"random_scenario/{index}"))
    a, m, c, g = rng.uniform(0.0, 0.5, 4)
    b = rng.uniform(-0.5, 0.5)
    d, e, h = rng.uniform(0.0, 0.5, 3)
    s1, s2 = rng.uniform(-1.0, 1.0, 2)
    q1, q2 = rng.uniform(0.0, 0.3, 2)
    layout = int(rng.integers(4))

    base_own = [
        lambda t, x, y, z: b * y,
        lambda t, x, y, z: c * np.sin(z[..., 0]),
        lambda t, x, y, z: g * np.cos(x[..., 0]),
    ]
    base_primed = [lambda t, xp, yp, zp: a * np.tanh(yp), lambda t, xp, yp, zp: m * np.sin(xp[..., 0])]
    bump_y = lambda t, x, y, z: d * (1.0 + np.sin(y))  # noqa: E731
    bump_z = lambda t, xp, yp, zp: h * np.abs(zp[..., 0])  # noqa: E731
    bump_yp = lambda t, xp, yp, zp: e * (1.0 - np.tanh(yp))  # noqa: E731
    dip_yp = lambda t, xp, yp, zp: -e * (1.0 + np.tanh(yp))  # noqa: E731
    neg = lambda fn: (lambda *args: -fn(*args))  # noqa: E731
    C = a + m + abs(b) + c + g + d + e + h

    if layout == 0:  # f1 satisfies both, f2 = f1 + nonnegative extras
        f1 = _driver(base_own, base_primed, C, True, True, "base")
        f2 = _driver(base_own + [bump_y], base_primed + [bump_z, bump_yp], C, False, False, "base_plus")
    elif layout == 1:  # f2 satisfies both, f1 = f2 - nonnegative extras
        f1 = _driver(base_own + [neg(bump_y)], base_primed + [neg(bump_z), dip_yp], C, False, False, "base_minus")
        f2 = _driver(base_own, base_primed, C, True, True, "base")
    elif layout == 2:  # f1 free of z' only, f2 nondecreasing in y' only
        f1 = _driver(base_own + [neg(bump_y)], base_primed + [dip_yp], C, True, False, "dip")
        f2 = _driver(base_own, base_primed + [bump_z], C, False, True, "zbump")
    else:  # f1 nondecreasing in y' only, f2 free of z' only
        f1 = _driver(base_own + [neg(bump_y)], base_primed + [neg(bump_z)], C, False, True, "zdip")
        f2 = _driver(base_own, base_primed + [bump_yp], C, True, False, "ybump")

    xi1 = TerminalFunctional(lambda bp, x: s1 * np.sin(x[:, -1, 0]) + s2 * x[:, -1, 0], "smooth")
    xi2 = TerminalFunctional(
        lambda bp, x: s1 * np.sin(x[:, -1, 0]) + s2 * x[:, -1, 0] + q1 + q2 * (1.0 + np.cos(x[:, -1, 0])),
        "smooth_plus",
    )
    return ComparisonScenario(f"random_{seed}_{index}_layout{layout}", (f1, f2), (xi1, xi2), T=T)


def split_time_scenario(seed: int, t_split: float, T: float = 1.0) -> ComparisonScenario:
    """Compliant pair whose drivers differ only before ``t_split`` and share the terminal."""
    base = random_compliant_scenario(seed, 0, T)
    f1 = base.drivers[0]
    d = 0.3

    def early(t, x, y, z):
        return d * (1.0 + np.sin(y)) if t < t_split - 1e-12 else np.zeros(np.shape(y))

    own1 = f1.f.own
    f2 = Driver(
        Interaction(own=lambda t, x, y, z: own1(t, x, y, z) + early(t, x, y, z), primed=f1.f.primed),
        f1.lipschitz_C + d,
        f1.independent_of_zprime,
        f1.nondecreasing_in_yprime,
        f"{f1.name}_early_bump",
    )
    return ComparisonScenario(
        f"split_{seed}_{t_split}",
        (f1, f2),
        (base.terminals[0], base.terminals[0]),
        T=T,
    )
