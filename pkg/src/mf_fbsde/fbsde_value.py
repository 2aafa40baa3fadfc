"""Value function of the decoupled mean-field forward-backward system.

The law of the forward process started at ``(0, x0)`` and the matching
backward solution are computed once (:class:`MeanFieldBackground`).  With
both frozen, the system started at ``(t, x)`` is a classical FBSDE whose
time-``t`` value defines the deterministic function ``u(t, x)``.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import linregress

from .meanfield_bsde import BsdePair, Driver, PicardConfig, solve_classical_bsde, solve_meanfield_bsde
from .meanfield_sde import ForwardCoefficients, FrozenLaw, ParticleCloud, solve_conditional_flow, solve_mckean
from .stochastic_engine import (
    BrownianBundle,
    Interaction,
    TimeGrid,
    bootstrap_std_error,
    derive_seed,
    sample_brownian,
    worker_count,
)

__all__ = [
    "MarkovProblem",
    "MeanFieldBackground",
    "ValueConfig",
    "ValueEstimate",
    "ValueSurface",
    "DppRecord",
    "build_background",
    "flow_bundle",
    "solve_from",
    "value_estimate",
    "value_function",
    "build_value_surface",
    "backward_semigroup",
    "dpp_check",
    "dpp_residual",
    "write_dpp_csv",
    "regularity_probe",
]


@dataclass(frozen=True)
class MarkovProblem:
    """Deterministic data ``(b, sigma, f, Phi, x0)`` of the decoupled system.

    ``f`` is an :class:`Interaction` with primed arguments ``(x', y')`` and
    own arguments ``(x, y, z)``; ``Phi`` has primed ``(x',)`` and own ``(x,)``
    and ignores its time argument.
    """

    forward: ForwardCoefficients
    f: Interaction
    Phi: Interaction
    x0: object
    T: float
    lipschitz_C: float = 1.0
    growth_C: float = 1.0
    name: str = ""

    def driver(self) -> Driver:
        """The backward driver in the ``(x', y', z')`` / ``(x, y, z)`` layout of the BSDE solver."""
        f = self.f
        return Driver(
            Interaction(
                own=None if f.own is None else (lambda t, x, y, z: f.own(t, x, y, z)),
                primed=None if f.primed is None else (lambda t, xp, yp, zp: f.primed(t, xp, yp)),
                pair=None if f.pair is None else (lambda t, xp, yp, zp, x, y, z: f.pair(t, xp, yp, x, y, z)),
            ),
            self.lipschitz_C,
            independent_of_zprime=True,
            nondecreasing_in_yprime=True,
            name=self.name,
        )

    def validate(self, rng: np.random.Generator, n_pairs: int = 1000) -> float:
        """Probe monotonicity of ``f`` in ``y'`` on ordered pairs; returns the worst drop."""
        n, d = self.forward.n_dim, self.forward.d_dim
        return self.driver().probe(rng, n, d, n_pairs, self.T)["max_yprime_decrease"]

    def terminal(self, atoms: np.ndarray, states: np.ndarray, max_atoms: int | None = None) -> np.ndarray:
        """``E'[Phi(X_T', x)]`` for every row of ``states`` against the law ``atoms``."""
        return self.Phi.average(self.T, (atoms,), (states,), states.shape[0], max_atoms=max_atoms)


@dataclass(frozen=True, eq=False)
class MeanFieldBackground:
    """The frozen ``(0, x0)`` solution: forward law and backward values per node."""

    problem: MarkovProblem
    grid: TimeGrid
    frozen: FrozenLaw
    pair: BsdePair = field(repr=False)
    bundle_id: str = ""

    def X(self, k: int) -> np.ndarray:
        return self.frozen.at(k)

    def Y(self, k: int) -> np.ndarray:
        return self.pair.Y[:, k]

    @property
    def n_atoms(self) -> int:
        return self.frozen.n_atoms


def build_background(
    problem: MarkovProblem,
    M: int,
    bundle: BrownianBundle,
    config: PicardConfig | None = None,
) -> MeanFieldBackground:
    """One McKean-Vlasov solve and one mean-field BSDE solve from ``(0, x0)``."""
    config = config or PicardConfig()
    if abs(bundle.grid.t1 - problem.T) > 1e-12:
        raise ValueError(f"bundle grid ends at {bundle.grid.t1}, problem horizon is {problem.T}")
    cloud, frozen = solve_mckean(problem.forward, problem.x0, M, bundle, config.max_atoms)
    xT = cloud.at(bundle.grid.n_steps)
    xi = problem.terminal(xT, xT, config.max_atoms)
    pair = solve_meanfield_bsde(problem.driver(), xi, cloud, bundle, config)
    pair.Y.flags.writeable = False
    pair.Z.flags.writeable = False
    return MeanFieldBackground(problem, bundle.grid, frozen, pair, bundle.bundle_id)


@dataclass(frozen=True)
class ValueConfig:
    n_paths: int = 20000
    seed: int = 1
    regression_degree: int = 3
    max_atoms: int | None = None
    n_resamples: int = 200


def flow_bundle(background: MeanFieldBackground, config: ValueConfig) -> BrownianBundle:
    """The Brownian increments shared by every flow started on the background grid.

    A flow from node ``k`` uses the global increments from step ``k`` on, so
    flows from different start times are driven by common random numbers.
    """
    seed = derive_seed(config.seed, "flow")
    return sample_brownian(background.grid, background.problem.forward.d_dim, config.n_paths, seed)


def _frozen_driver(background: MeanFieldBackground, start: int, max_atoms, y_override=None):
    f = background.problem.f

    def g(k, t, x, y, z):
        kk = start + k
        own_y = y if y_override is None else y_override[:, k]
        return f.average(t, (background.X(kk), background.Y(kk)), (x, own_y, z), x.shape[0], max_atoms=max_atoms)

    return g


def solve_from(
    background: MeanFieldBackground,
    t: float,
    init,
    config: ValueConfig,
    bundle: BrownianBundle | None = None,
) -> tuple[ParticleCloud, BsdePair, np.ndarray]:
    """Forward flow from ``(t, init)`` and the classical backward solve against the background.

    Returns:
        ``(cloud, pair, xi)`` with the flow on the subgrid from ``t``.
    """
    problem = background.problem
    k0 = background.grid.index_of(t)
    if k0 == background.grid.n_steps:
        raise ValueError("solve_from needs t < T; use value_estimate for the terminal slice")
    bundle = bundle or flow_bundle(background, config)
    cloud = solve_conditional_flow(
        problem.forward, background.frozen, k0, init, bundle, config.n_paths, config.max_atoms
    )
    xi = problem.terminal(background.X(background.grid.n_steps), cloud.at(cloud.grid.n_steps), config.max_atoms)
    pair = solve_classical_bsde(
        _frozen_driver(background, k0, config.max_atoms),
        xi,
        cloud,
        bundle,
        PicardConfig(regression_degree=config.regression_degree),
    )
    return cloud, pair, xi


@dataclass(frozen=True)
class ValueEstimate:
    t: float
    x: np.ndarray
    value: float
    pathwise: float
    std_error: float
    n_paths: int

    @property
    def consistent(self) -> bool:
        """Regression value and pathwise average agree within 3 std-errors."""
        return abs(self.value - self.pathwise) <= 3.0 * self.std_error + 1e-12 * (1.0 + abs(self.value))


def value_estimate(
    background: MeanFieldBackground,
    t: float,
    x,
    config: ValueConfig | None = None,
    bundle: BrownianBundle | None = None,
) -> ValueEstimate:
    """``u(t, x)`` with its Monte Carlo standard error.

    ``value`` is the time-``t`` regression value; ``pathwise`` is the average of
    ``xi + sum_k g_k dt`` along the paths, which coincides with it whenever the
    basis contains constants.  The standard error is the bootstrap error of
    the pathwise average.
    """
    config = config or ValueConfig()
    problem = background.problem
    x = np.atleast_1d(np.asarray(x, dtype=float))
    K = background.grid.n_steps
    if background.grid.index_of(t) == K:
        v = float(problem.terminal(background.X(K), x[None, :], config.max_atoms)[0])
        return ValueEstimate(t, x, v, v, 0.0, 0)
    cloud, pair, xi = solve_from(background, t, x, config, bundle)
    contributions = xi + pair.driver_values[:, :-1].sum(axis=1) * pair.grid.dt
    se = bootstrap_std_error(contributions, config.n_resamples, derive_seed(config.seed, "value_se"))
    return ValueEstimate(t, x, float(np.mean(pair.Y[:, 0])), float(np.mean(contributions)), se, cloud.n_paths)


def value_function(
    background: MeanFieldBackground,
    t: float,
    x,
    config: ValueConfig | None = None,
    bundle: BrownianBundle | None = None,
) -> float:
    """``u(t, x)``: the time-``t`` value of the system started at ``(t, x)``."""
    return value_estimate(background, t, x, config, bundle).value


# ---------------------------------------------------------------------------
# surfaces


@dataclass(frozen=True, eq=False)
class ValueSurface:
    """Values ``u[time, space]`` on a 1-D tensor grid with linear interpolation in ``x``.

    ``std_errors`` is set for probabilistic surfaces; ``diagnostics`` holds
    solver-specific records (extrapolation flags, CFL data).
    """

    times: np.ndarray
    xs: np.ndarray
    values: np.ndarray = field(repr=False)
    provenance: str
    std_errors: np.ndarray | None = field(default=None, repr=False)
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.values.shape != (len(self.times), len(self.xs)):
            raise ValueError(f"values shape {self.values.shape} does not match grid {(len(self.times), len(self.xs))}")
        if not np.all(np.isfinite(self.values)):
            raise FloatingPointError(f"{self.provenance} surface has non-finite values")
        if np.any(np.diff(self.xs) <= 0):
            raise ValueError("space nodes must be strictly increasing")

    def time_index(self, t: float) -> int:
        i = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[i] - t) > 1e-9 * max(1.0, abs(t)):
            raise ValueError(f"time {t} is not a surface node")
        return i

    def interpolate(self, t: float, x, extrapolate: bool = False) -> np.ndarray:
        """Linear interpolation of the time-``t`` slice at points ``x``.

        Raises:
            ValueError: a point lies outside the space range and
                ``extrapolate`` is off.
        """
        row = self.values[self.time_index(t)]
        x = np.asarray(x, dtype=float)
        lo, hi = self.xs[0], self.xs[-1]
        outside = (x < lo - 1e-12) | (x > hi + 1e-12)
        if np.any(outside) and not extrapolate:
            raise ValueError(f"point {x[outside].ravel()[0]!r} outside the surface domain [{lo}, {hi}]")
        out = np.interp(x, self.xs, row)
        left, right = x < lo, x > hi
        if np.any(left):
            out[left] = row[0] + (x[left] - lo) * (row[1] - row[0]) / (self.xs[1] - self.xs[0])
        if np.any(right):
            out[right] = row[-1] + (x[right] - hi) * (row[-1] - row[-2]) / (self.xs[-1] - self.xs[-2])
        return out

    def resample(self, times, xs) -> "ValueSurface":
        """The surface restricted to ``times`` (existing nodes) and interpolated at ``xs``."""
        times = np.asarray(times, dtype=float)
        xs = np.asarray(xs, dtype=float)
        values = np.stack([self.interpolate(t, xs) for t in times])
        return ValueSurface(times, xs, values, self.provenance, None, dict(self.diagnostics))

    def growth_constant(self) -> float:
        """Smallest ``C`` with ``|u(t, x)| <= C (1 + |x|)`` on the nodes."""
        return float(np.max(np.abs(self.values) / (1.0 + np.abs(self.xs))[None, :]))

    def second_difference_bound(self, t: float) -> float:
        """``max |u_xx|`` estimated by second differences on the time-``t`` slice."""
        row = self.values[self.time_index(t)]
        if row.size < 3:
            return 0.0
        h = np.diff(self.xs)
        d2 = 2.0 * ((row[2:] - row[1:-1]) / h[1:] - (row[1:-1] - row[:-2]) / h[:-1]) / (h[1:] + h[:-1])
        return float(np.max(np.abs(d2)))

    def write_csv(self, path) -> None:
        """CSV with columns ``t, x, u, provenance``."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "x", "u", "provenance"])
            for i, t in enumerate(self.times):
                for j, x in enumerate(self.xs):
                    w.writerow([repr(float(t)), repr(float(x)), repr(float(self.values[i, j])), self.provenance])


def build_value_surface(
    background: MeanFieldBackground,
    times,
    xs,
    config: ValueConfig | None = None,
) -> ValueSurface:
    """Probabilistic ``u`` on ``times x xs`` (1-D state), one independent solve per node.

    Nodes share the flow bundle, so the surface is smooth in ``x`` and
    deterministic node by node whatever the worker count.
    """
    config = config or ValueConfig()
    if background.problem.forward.n_dim != 1:
        raise ValueError("value surfaces are built for one-dimensional states")
    times = np.asarray(times, dtype=float)
    xs = np.asarray(xs, dtype=float)
    bundle = flow_bundle(background, config)
    nodes = [(i, j) for i in range(len(times)) for j in range(len(xs))]

    def work(node):
        i, j = node
        return value_estimate(background, float(times[i]), xs[j], config, bundle)

    workers = worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            estimates = list(pool.map(work, nodes))
    else:
        estimates = [work(n) for n in nodes]
    values = np.array([e.value for e in estimates]).reshape(len(times), len(xs))
    ses = np.array([e.std_error for e in estimates]).reshape(len(times), len(xs))
    return ValueSurface(times, xs, values, "probabilistic", ses, {"n_paths": config.n_paths, "seed": config.seed})


# ---------------------------------------------------------------------------
# backward semigroup and dynamic programming


def _head_cloud(cloud: ParticleCloud, bundle: BrownianBundle, n_steps: int):
    head = bundle.head(n_steps)
    states = cloud.states[:, : n_steps + 1, :]
    return ParticleCloud(head.grid, states, cloud.bundle_ref, cloud.initial, cloud.offset), head


def _semigroup(
    background: MeanFieldBackground,
    t: float,
    x,
    delta: float,
    eta: Callable[[np.ndarray], np.ndarray],
    config: ValueConfig,
    bundle: BrownianBundle,
    self_referential: bool,
):
    grid = background.grid
    k0 = grid.index_of(t)
    k1 = grid.index_of(t + delta)
    cloud, pair, xi = solve_from(background, t, np.atleast_1d(np.asarray(x, dtype=float)), config, bundle)
    window = bundle.window(k0)
    short_cloud, short_bundle = _head_cloud(cloud, window, k1 - k0)
    terminal = np.asarray(eta(short_cloud.at(k1 - k0)), dtype=float).reshape(cloud.n_paths)
    y_slot = None if self_referential else pair.Y
    semi = solve_classical_bsde(
        _frozen_driver(background, k0, config.max_atoms, y_slot),
        terminal,
        short_cloud,
        short_bundle,
        PicardConfig(regression_degree=config.regression_degree),
    )
    return semi, terminal, pair, xi


def backward_semigroup(
    background: MeanFieldBackground,
    t: float,
    x,
    delta: float,
    eta: Callable[[np.ndarray], np.ndarray],
    config: ValueConfig | None = None,
    bundle: BrownianBundle | None = None,
    self_referential: bool = False,
) -> float:
    """Value at ``t`` of the BSDE on ``[t, t + delta]`` with terminal ``eta(X_{t+delta})``.

    The driver's own ``y`` slot is filled with the separately solved ``Y`` of
    the system from ``(t, x)``, so only ``Z`` is solved for on the short
    interval.  ``self_referential=True`` puts the short BSDE's own value in
    that slot instead; this variant is exploratory and is not the semigroup
    used by the dynamic programming identity.

    Args:
        background: the frozen ``(0, x0)`` solution.
        t: start node.
        x: start point.
        delta: horizon; ``t + delta`` must be a node no later than ``T``.
        eta: map from states ``[path, n]`` to terminal values ``[path]``.
        config: flow size, seed and regression degree.
        bundle: flow increments (default: :func:`flow_bundle`).
        self_referential: use the exploratory variant described above.

    Returns:
        The semigroup value at time ``t``.
    """
    config = config or ValueConfig()
    bundle = bundle or flow_bundle(background, config)
    if delta == 0:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return float(np.asarray(eta(x[None, :])).ravel()[0])
    semi, *_ = _semigroup(background, t, x, delta, eta, config, bundle, self_referential)
    return float(np.mean(semi.Y[:, 0]))


@dataclass(frozen=True)
class DppRecord:
    t: float
    x: float
    delta: float
    lhs: float
    rhs: float
    residual: float
    threshold: float
    outside_fraction: float = 0.0

    @property
    def passed(self) -> bool:
        return self.residual <= self.threshold


def dpp_check(
    background: MeanFieldBackground,
    surface: ValueSurface,
    t: float,
    x: float,
    delta: float,
    config: ValueConfig | None = None,
    bundle: BrownianBundle | None = None,
) -> DppRecord:
    """Compare ``u(t, x)`` with ``G_{t, t+delta}[u(t + delta, X_{t+delta})]``.

    Both sides use the same flow paths.  The threshold is three times the sum
    of (a) the bootstrap error of the per-path difference of the two
    estimators combined with the surface's own error at the reached
    points ``X_{t+delta}`` and
    (b) the linear-interpolation bound ``h^2/8 max|u_xx|``.

    Raises:
        ValueError: ``x`` lies outside the surface domain.
    """
    config = config or ValueConfig()
    if not surface.xs[0] - 1e-12 <= x <= surface.xs[-1] + 1e-12:
        raise ValueError(f"x = {x} outside the surface domain [{surface.xs[0]}, {surface.xs[-1]}]")
    if delta == 0:
        u = float(surface.interpolate(t, np.array([x]))[0])
        return DppRecord(t, x, 0.0, u, u, 0.0, 0.0)
    bundle = bundle or flow_bundle(background, config)
    s = t + delta
    reached = []

    def eta(states):
        reached.append(states[:, 0])
        return surface.interpolate(s, states[:, 0], extrapolate=True)

    semi, terminal, pair, xi = _semigroup(background, t, x, delta, eta, config, bundle, False)
    dt = pair.grid.dt
    n_short = semi.grid.n_steps
    lhs_paths = xi + pair.driver_values[:, :-1].sum(axis=1) * dt
    rhs_paths = terminal + semi.driver_values[:, :n_short].sum(axis=1) * dt
    lhs = float(np.mean(pair.Y[:, 0]))
    rhs = float(np.mean(semi.Y[:, 0]))
    se_diff = bootstrap_std_error(lhs_paths - rhs_paths, config.n_resamples, derive_seed(config.seed, "dpp"))
    pts = reached[0]
    outside = float(np.mean((pts < surface.xs[0]) | (pts > surface.xs[-1])))
    i = surface.time_index(s)
    # surface error where the flow actually lands, not its worst node
    se_surf = 0.0 if surface.std_errors is None else float(np.mean(np.interp(pts, surface.xs, surface.std_errors[i])))
    h = float(np.max(np.diff(surface.xs)))
    interp = h * h / 8.0 * surface.second_difference_bound(s)
    threshold = 3.0 * (math.sqrt(se_diff**2 + se_surf**2) + interp)
    return DppRecord(t, float(x), delta, lhs, rhs, abs(lhs - rhs), threshold, outside)


def dpp_residual(
    background: MeanFieldBackground,
    surface: ValueSurface,
    t: float,
    x: float,
    delta: float,
    config: ValueConfig | None = None,
    bundle: BrownianBundle | None = None,
) -> float:
    """``|u(t, x) - G_{t, t+delta}[u(t + delta, X_{t+delta})]|``; see :func:`dpp_check`."""
    return dpp_check(background, surface, t, x, delta, config, bundle).residual


def write_dpp_csv(records, path) -> None:
    """CSV with columns ``t, x, delta, lhs, rhs, residual, threshold``."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "x", "delta", "lhs", "rhs", "residual", "threshold"])
        for r in records:
            w.writerow([repr(float(v)) for v in (r.t, r.x, r.delta, r.lhs, r.rhs, r.residual, r.threshold)])


# ---------------------------------------------------------------------------
# regularity


def regularity_probe(surface: ValueSurface, flat_tol: float = 1e-12) -> dict:
    """Fitted Lipschitz constant in ``x`` and Hoelder exponent in ``t``.

    For every time lag ``h`` between surface nodes the probe takes
    ``sup |u(t + h, x) - u(t, x)| / (1 + |x|)`` over nodes and fits its
    log-log slope against ``h``.  A surface that does not move in time
    reports ``holder_t = "flat"``.

    Raises:
        ValueError: fewer than 8 time nodes.
    """
    times = np.asarray(surface.times)
    if len(times) < 8:
        raise ValueError(f"regularity probe needs at least 8 time nodes, got {len(times)}")
    u = surface.values
    slopes = np.abs(np.diff(u, axis=1)) / np.diff(surface.xs)[None, :]
    lipschitz = float(np.max(slopes)) if slopes.size else 0.0
    weight = 1.0 + np.abs(surface.xs)[None, :]
    lags, sups = [], []
    for m in range(1, len(times)):
        lag = float(np.max(times[m:] - times[:-m]))
        sup = float(np.max(np.abs(u[m:] - u[:-m]) / weight))
        lags.append(lag)
        sups.append(sup)
    lags_a, sups_a = np.array(lags), np.array(sups)
    if np.all(sups_a <= flat_tol * (1.0 + np.max(np.abs(u)))):
        return {"lipschitz_x": lipschitz, "holder_t": "flat", "lags": lags, "sups": sups}
    keep = sups_a > 0
    fit = linregress(np.log(lags_a[keep]), np.log(sups_a[keep]))
    return {
        "lipschitz_x": lipschitz,
        "holder_t": float(fit.slope),
        "holder_stderr": float(fit.stderr),
        "lag_decades": float(np.log10(lags_a.max() / lags_a.min())),
        "lags": lags,
        "sups": sups,
    }
