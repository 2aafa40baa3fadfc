"""Regression Monte Carlo for classical and mean-field BSDEs.

The classical solver walks the grid backwards and replaces conditional
expectations by least-squares projections on polynomials of the forward
state at ``t_k``.  The mean-field solver wraps it in a Picard loop that
freezes the cross-path law of ``(Y', Z')`` at the previous iterate.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg

from .meanfield_sde import NumericalBlowUp, ParticleCloud
from .stochastic_engine import BrownianBundle, Interaction, TimeGrid

__all__ = [
    "Driver",
    "TerminalFunctional",
    "BsdePair",
    "PicardConfig",
    "PicardNotConverged",
    "SingularRegression",
    "Regressor",
    "ContractionReport",
    "StabilityReport",
    "default_beta",
    "beta_norm",
    "solve_classical_bsde",
    "solve_meanfield_bsde",
    "contraction_report",
    "stability_gap",
    "write_solution_csv",
    "write_diagnostics_json",
]


class SingularRegression(np.linalg.LinAlgError):
    """The polynomial design matrix is rank deficient."""


class PicardNotConverged(RuntimeError):
    """Raised when the Picard loop hits ``max_iter``; carries the gap history."""

    def __init__(self, message: str, history: list[dict]):
        super().__init__(message)
        self.history = history


def default_beta(lipschitz_C: float) -> float:
    """Exponential weight making the Picard map a 1/sqrt(2)-contraction."""
    C = float(lipschitz_C)
    return 16.0 * C * C + 4.0 * C + 1.0


@dataclass(frozen=True)
class PicardConfig:
    beta: float | None = None
    tol: float = 1e-6
    max_iter: int = 50
    regression_degree: int = 3
    max_atoms: int | None = None

    def __post_init__(self) -> None:
        if self.beta is not None and not self.beta > 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if not self.tol > 0:
            raise ValueError(f"tol must be positive, got {self.tol}")
        if self.max_iter < 1:
            raise ValueError(f"max_iter must be >= 1, got {self.max_iter}")
        if self.regression_degree < 0:
            raise ValueError(f"regression_degree must be >= 0, got {self.regression_degree}")

    def beta_for(self, lipschitz_C: float) -> float:
        return default_beta(lipschitz_C) if self.beta is None else float(self.beta)


@dataclass(frozen=True)
class Driver:
    """Mean-field driver ``f(t, x', x, y', y, z', z)``.

    ``f`` is an :class:`Interaction` whose primed arguments are ``(x', y', z')``
    and own arguments ``(x, y, z)``; drivers that ignore some slots simply do
    not read them.  ``x`` has shape ``[..., n]``, ``y`` ``[...]`` and ``z``
    ``[..., d]``.
    """

    f: Interaction
    lipschitz_C: float
    independent_of_zprime: bool = False
    nondecreasing_in_yprime: bool = False
    name: str = ""

    @property
    def is_mean_field(self) -> bool:
        return self.f.primed is not None or self.f.pair is not None

    def __call__(self, t, xp, yp, zp, x, y, z) -> np.ndarray:
        return self.f(t, (xp, yp, zp), (x, y, z))

    def probe(
        self,
        rng: np.random.Generator,
        n_dim: int = 1,
        d_dim: int = 1,
        n_pairs: int = 1000,
        T: float = 1.0,
        scale: float = 3.0,
    ) -> dict:
        """Spot-check the declared flags on random probes.

        Returns the worst monotonicity decrease in ``y'`` and the largest
        response to a ``z'`` perturbation; raises if a declared flag fails.
        """
        t = rng.uniform(0.0, T, n_pairs)
        xp, x = rng.normal(scale=scale, size=(2, n_pairs, n_dim))
        y, y1, y2 = rng.normal(scale=scale, size=(3, n_pairs))
        zp, z, dz = rng.normal(scale=scale, size=(3, n_pairs, d_dim))
        lo, hi = np.minimum(y1, y2), np.maximum(y1, y2)
        worst_drop = 0.0
        worst_z = 0.0
        for i in range(n_pairs):
            f_lo = self(t[i], xp[i], lo[i], zp[i], x[i], y[i], z[i])
            f_hi = self(t[i], xp[i], hi[i], zp[i], x[i], y[i], z[i])
            worst_drop = max(worst_drop, float(f_lo - f_hi))
            f_z = self(t[i], xp[i], lo[i], zp[i] + dz[i], x[i], y[i], z[i])
            worst_z = max(worst_z, float(abs(f_z - f_lo)))
        if self.nondecreasing_in_yprime and worst_drop > 1e-12:
            raise ValueError(f"driver {self.name!r} declared nondecreasing in y' but drops by {worst_drop:.3g}")
        if self.independent_of_zprime and worst_z > 1e-12:
            raise ValueError(f"driver {self.name!r} declared independent of z' but moves by {worst_z:.3g}")
        return {"max_yprime_decrease": worst_drop, "max_zprime_response": worst_z}


@dataclass(frozen=True)
class TerminalFunctional:
    """Terminal value ``xi(brownian_paths, forward_states) -> [path]``."""

    xi: Callable[[np.ndarray, np.ndarray], np.ndarray]
    name: str = ""

    def evaluate(self, bundle: BrownianBundle, cloud: ParticleCloud) -> np.ndarray:
        M = cloud.n_paths
        values = np.asarray(self.xi(bundle.paths()[:M], cloud.states), dtype=float).reshape(M)
        if not np.all(np.isfinite(values)):
            raise NumericalBlowUp("terminal value", int(np.flatnonzero(~np.isfinite(values))[0]), cloud.grid.n_steps)
        if not math.isfinite(float(np.mean(values**2))):
            raise ValueError(f"terminal {self.name!r} has no finite second moment")
        return values


@dataclass(frozen=True, eq=False)
class BsdePair:
    """Discrete solution ``Y[path, time]``, ``Z[path, time, d]``.

    ``Z`` at the terminal node repeats the last step value.  ``diagnostics``
    holds one record per Picard gap (empty for classical solves).
    """

    grid: TimeGrid
    Y: np.ndarray = field(repr=False)
    Z: np.ndarray = field(repr=False)
    diagnostics: list = field(default_factory=list)
    regression_degree: int = 3
    beta: float | None = None
    offset: int = 0
    driver_values: np.ndarray | None = field(default=None, repr=False)

    @property
    def Y0(self) -> float:
        return float(np.mean(self.Y[:, 0]))

    @property
    def iterations(self) -> int:
        return len(self.diagnostics) + 1 if self.diagnostics else 1


# ---------------------------------------------------------------------------
# regression


class Regressor:
    """Least-squares projection on total-degree polynomials of a state sample.

    Coordinates are standardised; constant coordinates and coordinates that are
    linear combinations of others are dropped first, so a degenerate state
    falls back to a smaller basis (intercept-only when the state is a point).
    ``keep_design`` stores the basis matrix for one-off use; otherwise it is
    rebuilt on each fit.  The triangular QR factor is kept, so repeated fits against the same
    state sample (one per Picard iterate) only cost two matrix products.
    """

    def __init__(self, states: np.ndarray, degree: int, rcond: float = 1e-10, keep_design: bool = False):
        states = np.asarray(states, dtype=float)
        if states.ndim == 1:
            states = states[:, None]
        M = states.shape[0]
        mean = states.mean(axis=0)
        std = states.std(axis=0)
        keep = np.flatnonzero(std > 1e-12 * (1.0 + np.abs(mean)))
        if keep.size > 1:
            cols = (states[:, keep] - mean[keep]) / std[keep]
            _, r, piv = scipy.linalg.qr(cols, mode="economic", pivoting=True)
            diag = np.abs(np.diag(r))
            rank = int(np.sum(diag > 1e-9 * diag[0]))
            keep = keep[np.sort(piv[:rank])]
        self._states = states
        self._keep = keep
        self._mean = mean[keep]
        self._std = std[keep]
        self.n_coords = keep.size
        self.degree = degree if self.n_coords else 0
        self._combos = [
            combo
            for deg in range(1, self.degree + 1)
            for combo in itertools.combinations_with_replacement(range(self.n_coords), deg)
        ]
        self.n_basis = 1 + len(self._combos)
        if self.n_basis > M:
            raise SingularRegression(f"{self.n_basis} basis functions for {M} paths; reduce regression_degree")
        self._design = None
        if self.n_basis == 1:
            return
        design = self.design()
        if keep_design:
            self._design = design
        r = np.linalg.qr(design, mode="r")
        diag = np.abs(np.diag(r))
        if diag.min() <= rcond * diag.max():
            raise SingularRegression(
                f"rank-deficient regression basis (degree {degree}, {self.n_coords} state coordinates); "
                "reduce regression_degree"
            )
        self._r = r

    def design(self) -> np.ndarray:
        """Basis functions evaluated at the sample, ``[path, basis]``."""
        if self._design is not None:
            return self._design
        cols = (self._states[:, self._keep] - self._mean) / self._std
        design = np.empty((self._states.shape[0], self.n_basis))
        design[:, 0] = 1.0
        for j, combo in enumerate(self._combos, start=1):
            design[:, j] = np.prod(cols[:, combo], axis=1)
        return design

    def fit(self, targets: np.ndarray) -> np.ndarray:
        """Fitted values of the projection of ``targets`` (shape ``[path]`` or ``[path, m]``)."""
        if self.n_basis == 1:
            return np.broadcast_to(np.mean(targets, axis=0), np.shape(targets)).copy()
        design = self.design()
        coef = self._solve(design.T @ targets)
        # one refinement step recovers QR accuracy from the semi-normal equations
        coef = coef + self._solve(design.T @ (targets - design @ coef))
        return design @ coef

    def _solve(self, rhs: np.ndarray) -> np.ndarray:
        w = scipy.linalg.solve_triangular(self._r, rhs, trans="T")
        return scipy.linalg.solve_triangular(self._r, w)


# ---------------------------------------------------------------------------
# solvers


def _aligned_increments(cloud: ParticleCloud, bundle: BrownianBundle) -> np.ndarray:
    if bundle.grid == cloud.grid:
        inc = bundle.increments
    elif cloud.offset and bundle.first_step == 0 and bundle.grid.subgrid(cloud.offset) == cloud.grid:
        inc = bundle.increments[:, cloud.offset:, :]
    else:
        raise ValueError("bundle and cloud do not share a time grid")
    if inc.shape[0] < cloud.n_paths:
        raise ValueError(f"bundle has {inc.shape[0]} paths, cloud has {cloud.n_paths}")
    return inc[: cloud.n_paths]


def beta_norm(dY: np.ndarray, dZ: np.ndarray, grid: TimeGrid, beta: float) -> float:
    """Discrete ``(E sum_k e^{beta t_k} (|Y_k|^2 + |Z_k|^2) dt)^{1/2}`` over ``k < K``."""
    K = grid.n_steps
    w = np.exp(beta * (grid.nodes[:K] - grid.t0)) * grid.dt
    sq = dY[:, :K] ** 2 + np.sum(dZ[:, :K, :] ** 2, axis=2)
    return float(math.sqrt(np.sum(sq.mean(axis=0) * w)))


ClassicalDriver = Callable[[int, float, np.ndarray, np.ndarray, np.ndarray], np.ndarray]


def solve_classical_bsde(
    driver: ClassicalDriver | None,
    terminal,
    cloud: ParticleCloud,
    bundle: BrownianBundle,
    config: PicardConfig | None = None,
    regressors: dict | None = None,
) -> BsdePair:
    """Backward regression scheme for ``-dY = g(t, Y, Z) dt - Z dB``, ``Y_T = xi``.

    Args:
        driver: ``g(k, t, x, y, z) -> [path]`` evaluated at grid index ``k``
            with the forward state ``x``, the regressed ``E[Y_{k+1} | x]`` as
            ``y`` and the step's ``Z`` as ``z``.  ``None`` means ``g = 0``.
        terminal: per-path terminal values or a :class:`TerminalFunctional`.
        cloud: forward states supplying the regression state at every node.
        bundle: Brownian increments on the cloud's grid.
        config: only ``regression_degree`` is used.
        regressors: optional cache of per-node :class:`Regressor` objects,
            filled on first use and reused by later calls on the same cloud.

    Returns:
        The discrete pair; ``driver_values[path, k]`` records ``g`` along the solution.
    """
    config = config or PicardConfig()
    grid = cloud.grid
    M, K = cloud.n_paths, grid.n_steps
    inc = _aligned_increments(cloud, bundle)
    d = inc.shape[2]
    if isinstance(terminal, TerminalFunctional):
        xi = terminal.evaluate(bundle, cloud)
    else:
        xi = np.asarray(terminal, dtype=float).reshape(M)
    dt = grid.dt
    Y = np.empty((M, K + 1))
    Z = np.empty((M, K + 1, d))
    G = np.zeros((M, K + 1))
    Y[:, K] = xi
    for k in range(K - 1, -1, -1):
        x = cloud.at(k)
        reg = None if regressors is None else regressors.get(k)
        if reg is None:
            reg = Regressor(x, config.regression_degree, keep_design=regressors is None)
            if regressors is not None:
                regressors[k] = reg
        y_next = Y[:, k + 1]
        ey = reg.fit(y_next)
        z = reg.fit((y_next - ey)[:, None] * inc[:, k, :] / dt)
        g = np.zeros(M) if driver is None else np.broadcast_to(driver(k, grid.node(k), x, ey, z), (M,))
        y = ey + g * dt
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(z))):
            bad = np.flatnonzero(~(np.isfinite(y) & np.isfinite(z).all(axis=1)))[0]
            raise NumericalBlowUp("BSDE value", int(bad), k)
        Y[:, k] = y
        Z[:, k, :] = z
        G[:, k] = g
    Z[:, K, :] = Z[:, K - 1, :]
    return BsdePair(grid, Y, Z, [], config.regression_degree, None, cloud.offset, G)


def solve_meanfield_bsde(
    driver: Driver,
    terminal,
    cloud: ParticleCloud,
    bundle: BrownianBundle,
    config: PicardConfig | None = None,
) -> BsdePair:
    """Picard iteration for ``Y_t = xi + int E'[f(s, X', X, Y', Y, Z', Z)] ds - int Z dB``.

    Iterate 0 solves with ``(Y', Z') = 0``; iterate ``j`` freezes the
    cross-path law of iterate ``j-1`` at every node and solves the resulting
    classical BSDE.  The loop stops when the gap between successive iterates
    falls below ``tol`` relative to the iterate's norm, both in the discrete
    beta-norm and in the unweighted norm.

    Raises:
        PicardNotConverged: ``max_iter`` solves without meeting ``tol``.
    """
    config = config or PicardConfig()
    beta = config.beta_for(driver.lipschitz_C)
    grid = cloud.grid
    M, K = cloud.n_paths, grid.n_steps
    inc = _aligned_increments(cloud, bundle)
    d = inc.shape[2]
    if isinstance(terminal, TerminalFunctional):
        xi = terminal.evaluate(bundle, cloud)
    else:
        xi = np.asarray(terminal, dtype=float).reshape(M)

    prev_Y = np.zeros((M, K + 1))
    prev_Z = np.zeros((M, K + 1, d))
    history: list[dict] = []
    last_gap = None
    regressors: dict = {}

    for it in range(config.max_iter):
        frozen_Y, frozen_Z = prev_Y, prev_Z

        def g(k, t, x, y, z, _Y=frozen_Y, _Z=frozen_Z):
            primed = (cloud.at(k), _Y[:, k], _Z[:, k, :])
            return driver.f.average(t, primed, (x, y, z), M, max_atoms=config.max_atoms)

        pair = solve_classical_bsde(g, xi, cloud, bundle, config, regressors)
        if it > 0:
            gap = beta_norm(pair.Y - prev_Y, pair.Z - prev_Z, grid, beta)
            norm = beta_norm(pair.Y, pair.Z, grid, beta)
            # the beta weight discounts early times by up to e^{-beta T}, so the
            # unweighted gap must also be small before early values are trusted
            gap0 = beta_norm(pair.Y - prev_Y, pair.Z - prev_Z, grid, 0.0)
            norm0 = beta_norm(pair.Y, pair.Z, grid, 0.0)
            ratio = gap / last_gap if last_gap else None
            history.append(
                {"iteration": it, "gap_beta_norm": gap, "ratio": ratio, "norm": norm, "gap_plain": gap0}
            )
            last_gap = gap
            if gap <= config.tol * max(norm, 1e-300) and gap0 <= config.tol * max(norm0, 1e-300):
                return BsdePair(grid, pair.Y, pair.Z, history, config.regression_degree, beta, cloud.offset,
                                pair.driver_values)
        prev_Y, prev_Z = pair.Y, pair.Z

    raise PicardNotConverged(
        f"Picard loop did not reach tol={config.tol} in {config.max_iter} iterations "
        f"(last gap {history[-1]['gap_beta_norm'] if history else float('nan'):.3g})",
        history,
    )


# ---------------------------------------------------------------------------
# diagnostics


@dataclass(frozen=True)
class ContractionReport:
    gaps: list
    ratios: list
    bound: float
    slack: float
    immediate: bool
    within_bound: bool

    def as_records(self) -> list[dict]:
        return [
            {"iteration": i + 1, "gap_beta_norm": g, "ratio": r}
            for i, (g, r) in enumerate(zip(self.gaps, [None] + self.ratios))
        ]


def contraction_report(trace, slack: float = 0.1, floor: float = 1e-10) -> ContractionReport:
    """Successive gap ratios of a Picard trace.

    ``trace`` is a :class:`BsdePair` or its diagnostics list.  Gaps below
    ``floor`` times the iterate norm are treated as converged and excluded
    from the ratio test, since their ratios only measure round-off.
    """
    records = trace.diagnostics if isinstance(trace, BsdePair) else list(trace)
    gaps = [float(r["gap_beta_norm"]) for r in records]
    norms = [float(r.get("norm", 1.0)) for r in records]
    bound = 1.0 / math.sqrt(2.0)
    immediate = bool(gaps) and gaps[0] <= floor * max(norms[0], 1e-300)
    ratios: list[float] = []
    for j in range(1, len(gaps)):
        if gaps[j - 1] <= floor * max(norms[j - 1], 1e-300):
            break
        ratios.append(gaps[j] / gaps[j - 1])
    within = all(r <= bound + slack for r in ratios)
    return ContractionReport(gaps, ratios, bound, slack, immediate, within)


@dataclass(frozen=True)
class StabilityReport:
    times: np.ndarray
    lhs: np.ndarray
    rhs: np.ndarray
    beta: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(np.all(self.lhs <= self.rhs * (1.0 + self.tol) + 1e-15))

    @property
    def worst_ratio(self) -> float:
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.where(self.rhs > 0, self.lhs / self.rhs, np.where(self.lhs > 0, np.inf, 0.0))
        return float(r.max())


def stability_gap(
    pair1: BsdePair,
    pair2: BsdePair,
    xi1: np.ndarray,
    xi2: np.ndarray,
    phi1: np.ndarray | None = None,
    phi2: np.ndarray | None = None,
    lipschitz_C: float = 1.0,
    tol: float = 0.05,
) -> StabilityReport:
    """Both sides of the mean-field BSDE stability estimate at every grid time.

    ``phi1``/``phi2`` are the per-path driver perturbations ``[path, time]``.
    LHS: ``E|dY_t|^2 + 1/2 E sum_{s>=t} e^{beta(s-t)} (|dY_s|^2 + |dZ_s|^2) dt``;
    RHS: ``E[e^{beta(T-t)} |dxi|^2] + E sum_{s>=t} e^{beta(s-t)} |dphi_s|^2 dt``,
    with ``beta = 16 (1 + C^2)``.
    """
    if pair1.grid != pair2.grid or pair1.Y.shape != pair2.Y.shape:
        raise ValueError("stability_gap needs both solutions on the same grid and paths")
    grid = pair1.grid
    K = grid.n_steps
    beta = 16.0 * (1.0 + lipschitz_C**2)
    t = grid.nodes
    dY = pair1.Y - pair2.Y
    dZ = pair1.Z - pair2.Z
    sq = (dY[:, :K] ** 2 + np.sum(dZ[:, :K] ** 2, axis=2)).mean(axis=0)
    dphi = np.zeros(K) if phi1 is None and phi2 is None else (
        ((np.zeros_like(pair1.Y) if phi1 is None else phi1) - (np.zeros_like(pair1.Y) if phi2 is None else phi2))[:, :K]
        ** 2
    ).mean(axis=0)
    dxi = float(np.mean((np.asarray(xi1) - np.asarray(xi2)) ** 2))
    lhs = np.empty(K + 1)
    rhs = np.empty(K + 1)
    for k in range(K + 1):
        w = np.exp(beta * (t[k:K] - t[k])) * grid.dt
        lhs[k] = float(np.mean(dY[:, k] ** 2)) + 0.5 * float(np.sum(w * sq[k:]))
        rhs[k] = math.exp(beta * (grid.t1 - t[k])) * dxi + float(np.sum(w * dphi[k:]))
    return StabilityReport(t, lhs, rhs, beta, tol)


# ---------------------------------------------------------------------------
# export


def write_solution_csv(pair: BsdePair, path) -> None:
    """CSV with columns ``path, t, Y, Z_1..Z_d``."""
    times = pair.grid.nodes
    d = pair.Z.shape[2]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "t", "Y"] + [f"Z_{i + 1}" for i in range(d)])
        for p in range(pair.Y.shape[0]):
            for k, t in enumerate(times):
                w.writerow([p, repr(float(t)), repr(float(pair.Y[p, k]))] + [repr(float(v)) for v in pair.Z[p, k]])


def write_diagnostics_json(pair: BsdePair, path) -> None:
    """JSON list of ``{iteration, gap_beta_norm, ratio}`` records."""
    records = [
        {"iteration": r["iteration"], "gap_beta_norm": r["gap_beta_norm"], "ratio": r["ratio"]}
        for r in pair.diagnostics
    ]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(records, fh, indent=2, sort_keys=True)
        fh.write("\n")
