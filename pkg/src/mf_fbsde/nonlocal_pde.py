"""One-dimensional finite differences for the nonlocal value PDE and growth diagnostics.

The PDE is solved backwards from the terminal slice ``E[Phi(X_T', x)]`` with
coefficients averaged against the same frozen law that the probabilistic
solver uses, so the two value surfaces can be compared directly.  The
module also carries the exponential change of unknown, the polynomial-growth
supersolution certificate and the growth-class boundary check.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erfc, logsumexp

from .fbsde_value import MarkovProblem, MeanFieldBackground, ValueSurface
from .stochastic_engine import TimeGrid

__all__ = [
    "PdeGrid1D",
    "GrowthSpec",
    "ChiCertificate",
    "TransformedDriver",
    "make_pde_grid",
    "solve_nonlocal_pde_1d",
    "boundary_influence",
    "viscosity_crosscheck",
    "transform_surface",
    "exp_transform",
    "chi_supersolution_check",
    "growth_critical_time",
    "write_certificate_json",
    "write_growth_csv",
]

CFL_SAFETY = 0.9


@dataclass(frozen=True)
class PdeGrid1D:
    """Uniform space nodes and a time grid refining the background grid by ``refine``.

    ``cfl_ratio`` is ``dt * max sigma~^2 / dx^2`` and must not exceed the
    safety factor; ``drift_ratio`` is ``dt * max|b~| / dx``.
    """

    xs: np.ndarray = field(repr=False)
    time_grid: TimeGrid
    refine: int
    cfl_ratio: float
    drift_ratio: float = 0.0
    safety: float = CFL_SAFETY

    def __post_init__(self) -> None:
        if len(self.xs) < 5:
            raise ValueError(f"need at least 3 interior nodes, got {len(self.xs) - 2}")
        steps = np.diff(self.xs)
        if np.any(steps <= 0) or np.ptp(steps) > 1e-9 * steps.mean():
            raise ValueError("space nodes must be uniform and increasing")
        if self.cfl_ratio > self.safety + 1e-12:
            raise ValueError(
                f"explicit scheme unstable: dt*sigma^2/dx^2 = {self.cfl_ratio:.4g} exceeds {self.safety}"
            )
        if self.drift_ratio > 1.0 + 1e-12:
            raise ValueError(f"explicit scheme unstable: dt*|b|/dx = {self.drift_ratio:.4g} exceeds 1")

    @property
    def dx(self) -> float:
        return float(self.xs[1] - self.xs[0])


def _coefficient_tables(problem: MarkovProblem, background: MeanFieldBackground, xs: np.ndarray):
    """``b~[k, j]`` and ``sigma~[k, j]`` at every background node against its law."""
    fwd = problem.forward
    if fwd.n_dim != 1 or fwd.d_dim != 1:
        raise ValueError("the finite-difference solver handles n = d = 1 only")
    grid = background.grid
    own = xs[:, None]
    b = np.empty((grid.n_steps + 1, len(xs)))
    s = np.empty_like(b)
    for k in range(grid.n_steps + 1):
        t = grid.node(k)
        atoms = background.X(k)
        b[k] = fwd.b.average(t, (atoms,), (own,), len(xs))[:, 0]
        s[k] = fwd.sigma.average(t, (atoms,), (own,), len(xs))[:, 0, 0]
    return b, s


def make_pde_grid(
    problem: MarkovProblem,
    background: MeanFieldBackground,
    x_min: float,
    x_max: float,
    n_nodes: int,
    refine: int | None = None,
    safety: float = CFL_SAFETY,
) -> PdeGrid1D:
    """Space grid on ``[x_min, x_max]`` and the coarsest stable time refinement.

    Args:
        problem: supplies the forward coefficients.
        background: its law fixes ``sigma~`` and its grid is refined.
        x_min: left end.
        x_max: right end.
        n_nodes: number of space nodes (at least 5).
        refine: force this refinement factor; the CFL check still applies.
        safety: CFL safety factor.

    Raises:
        ValueError: the forced refinement violates the CFL bound.
    """
    xs = np.linspace(float(x_min), float(x_max), int(n_nodes))
    b, s = _coefficient_tables(problem, background, xs)
    dx = xs[1] - xs[0]
    s2 = float(np.max(s**2))
    bmax = float(np.max(np.abs(b)))
    dt_bg = background.grid.dt
    if refine is None:
        limit = safety * dx * dx / s2 if s2 > 0 else math.inf
        if bmax > 0:
            limit = min(limit, dx / bmax)
        refine = max(1, math.ceil(dt_bg / limit * (1.0 + 1e-12)))
    dt = dt_bg / refine
    return PdeGrid1D(xs, background.grid.refine(refine), int(refine), dt * s2 / (dx * dx), dt * bmax / dx, safety)


def _interp_extrap(xs: np.ndarray, row: np.ndarray, pts: np.ndarray) -> np.ndarray:
    out = np.interp(pts, xs, row)
    left, right = pts < xs[0], pts > xs[-1]
    if np.any(left):
        out[left] = row[0] + (pts[left] - xs[0]) * (row[1] - row[0]) / (xs[1] - xs[0])
    if np.any(right):
        out[right] = row[-1] + (pts[right] - xs[-1]) * (row[-1] - row[-2]) / (xs[-1] - xs[-2])
    return out


def solve_nonlocal_pde_1d(
    problem: MarkovProblem,
    background: MeanFieldBackground,
    grid: PdeGrid1D,
) -> ValueSurface:
    """Explicit backward scheme for the nonlocal PDE on ``grid``.

    Each step from ``t_{m+1}`` to ``t_m`` uses coefficients and the law at the
    background node nearest ``t_{m+1}``.  First derivatives are central unless
    the cell Peclet number ``|b~| dx / sigma~^2`` exceeds 1, where the upwind
    difference is used.  The nonlocal source averages ``f`` over the law
    atoms with ``u`` at atom positions linearly interpolated (and linearly
    extrapolated outside the domain, which is counted in the diagnostics).
    End nodes are extrapolated quadratically from the three nearest
    interior nodes.

    Returns:
        The ``pde`` surface on the background time nodes.
    """
    bg_grid = background.grid
    xs = grid.xs
    nx = len(xs)
    dx = grid.dx
    r = grid.refine
    b, s = _coefficient_tables(problem, background, xs)
    f = problem.f
    K = bg_grid.n_steps
    own_x = xs[:, None]

    values = np.empty((K + 1, nx))
    u = problem.terminal(background.X(K), own_x)
    values[K] = u
    dt = grid.time_grid.dt
    outside_max = 0.0
    upwind_nodes = 0
    for m in range(grid.time_grid.n_steps - 1, -1, -1):
        t = grid.time_grid.node(m + 1)
        k = min(K, int(round((m + 1) / r)))
        bk, sk = b[k, 1:-1], s[k, 1:-1]
        fwd_d = (u[2:] - u[1:-1]) / dx
        bwd_d = (u[1:-1] - u[:-2]) / dx
        du = 0.5 * (fwd_d + bwd_d)
        s2 = sk * sk
        upwind = np.abs(bk) * dx > s2
        if np.any(upwind):
            upwind_nodes += int(np.sum(upwind))
            du = np.where(upwind, np.where(bk > 0, fwd_d, bwd_d), du)
        d2u = (fwd_d - bwd_d) / dx
        atoms = background.X(k)
        u_atoms = _interp_extrap(xs, u, atoms[:, 0])
        outside_max = max(outside_max, float(np.mean((atoms[:, 0] < xs[0]) | (atoms[:, 0] > xs[-1]))))
        z = (np.concatenate([[0.0], du, [0.0]]) * np.concatenate([[0.0], sk, [0.0]]))[:, None]
        source = f.average(t, (atoms, u_atoms), (own_x, u, z), nx)
        new = u.copy()
        new[1:-1] = u[1:-1] + dt * (bk * du + 0.5 * s2 * d2u + source[1:-1])
        new[0] = 3.0 * (new[1] - new[2]) + new[3]
        new[-1] = 3.0 * (new[-2] - new[-3]) + new[-4]
        if not np.all(np.isfinite(new)):
            raise FloatingPointError(f"non-finite PDE value at step {m}, node {int(np.flatnonzero(~np.isfinite(new))[0])}")
        u = new
        if m % r == 0:
            values[m // r] = u
    diagnostics = {
        "refine": r,
        "cfl_ratio": grid.cfl_ratio,
        "drift_ratio": grid.drift_ratio,
        "max_atoms_outside_domain": outside_max,
        "upwind_node_steps": upwind_nodes,
    }
    return ValueSurface(bg_grid.nodes.copy(), xs.copy(), values, "pde", None, diagnostics)


def boundary_influence(
    problem: MarkovProblem,
    background: MeanFieldBackground,
    grid: PdeGrid1D,
) -> float:
    """Max change on the interior nodes when the domain is widened by its own width on each side.

    Both solves share ``dx`` and the time refinement needed by the wide grid,
    since ``sigma~`` may grow with ``|x|``.
    """
    xs = grid.xs
    width = xs[-1] - xs[0]
    big = make_pde_grid(problem, background, xs[0] - width, xs[-1] + width, 3 * (len(xs) - 1) + 1, safety=grid.safety)
    big = make_pde_grid(
        problem, background, big.xs[0], big.xs[-1], len(big.xs), refine=max(big.refine, grid.refine), safety=grid.safety
    )
    same = make_pde_grid(problem, background, xs[0], xs[-1], len(xs), refine=big.refine, safety=grid.safety)
    wide = solve_nonlocal_pde_1d(problem, background, big)
    base = solve_nonlocal_pde_1d(problem, background, same)
    offset = len(xs) - 1
    inner = wide.values[:, offset : offset + len(xs)]
    return float(np.max(np.abs(inner - base.values)[:, 1:-1]))


def viscosity_crosscheck(prob_surface: ValueSurface, pde_surface: ValueSurface, tol: float = 2e-2) -> dict:
    """Max and RMS discrepancy between two surfaces on interior space nodes.

    The two surfaces solve the same equation by unrelated methods; agreement
    is the executable stand-in for "the value function is the unique
    viscosity solution", which no finite test can certify directly.

    Raises:
        ValueError: the surfaces are not on the same footprint.
    """
    if prob_surface.values.shape != pde_surface.values.shape or not (
        np.allclose(prob_surface.times, pde_surface.times, rtol=0, atol=1e-12)
        and np.allclose(prob_surface.xs, pde_surface.xs, rtol=0, atol=1e-12)
    ):
        raise ValueError("surfaces have different footprints; resample one onto the other first")
    diff = np.abs(prob_surface.values - pde_surface.values)[:, 1:-1]
    per_time = diff.max(axis=1)
    max_d = float(diff.max())
    return {
        "max_discrepancy": max_d,
        "rms_discrepancy": float(np.sqrt(np.mean(diff**2))),
        "per_time_max": per_time.tolist(),
        "times": np.asarray(prob_surface.times).tolist(),
        "tolerance": tol,
        "pass": bool(max_d <= tol),
        "note": "cross-solver agreement substitutes for a direct viscosity-solution test",
    }


# ---------------------------------------------------------------------------
# exponential change of unknown


def transform_surface(surface: ValueSurface, nu: float) -> ValueSurface:
    """Pointwise ``u(t, x) e^{nu t}``."""
    scale = np.exp(nu * np.asarray(surface.times))[:, None]
    return ValueSurface(
        surface.times, surface.xs, surface.values * scale, surface.provenance,
        None if surface.std_errors is None else surface.std_errors * scale,
        dict(surface.diagnostics, exp_transform_nu=nu),
    )


@dataclass(frozen=True)
class TransformedDriver:
    """``f_bar(t, x', x, y', y, z) = e^{nu t} f(t, x', x, e^{-nu t} y', e^{-nu t} y, e^{-nu t} z) - nu y``."""

    f: object
    nu: float
    K: float

    def __call__(self, t, xp, x, yp, y, z):
        e = math.exp(-self.nu * t)
        return self.f(t, (xp, e * yp), (x, e * y, e * z)) / e - self.nu * y

    def monotonicity_probe(self, rng: np.random.Generator, n_probes: int = 1000, T: float = 1.0, scale: float = 3.0):
        """Worst ``(f_bar(y1) - f_bar(y2)) / (y1 - y2)`` over random ``y1 > y2``; must be ``<= -(nu - K)``."""
        worst = -math.inf
        for _ in range(n_probes):
            t = rng.uniform(0.0, T)
            xp, x, yp, z = rng.normal(scale=scale, size=4)
            y1, y2 = np.sort(rng.normal(scale=scale, size=2))[::-1]
            if y1 - y2 < 1e-9:
                continue
            num = self(t, np.array([xp]), np.array([x]), yp, y1, np.array([z])) - self(
                t, np.array([xp]), np.array([x]), yp, y2, np.array([z])
            )
            worst = max(worst, float(num) / (y1 - y2))
        return worst


def exp_transform(surface: ValueSurface, nu: float, K: float = 0.0, f=None, rng=None, n_probes: int = 1000):
    """Transformed surface ``u e^{nu t}`` and the induced driver.

    Args:
        surface: the surface to transform.
        nu: exponent rate; must exceed ``K``.
        K: Lipschitz constant of ``f`` in ``(y', y, z)``.
        f: the driver :class:`Interaction` (optional; without it only the
            surface is transformed).
        rng: generator for the monotonicity probe.
        n_probes: number of probes.

    Returns:
        ``(surface, driver, worst_slope)``; ``driver`` and ``worst_slope`` are
        ``None`` when ``f`` is not given.

    Raises:
        ValueError: ``nu <= K``, or the probe finds a slope above ``-(nu - K)``.
    """
    if not nu > K:
        raise ValueError(f"the transform needs nu > K, got nu={nu}, K={K}")
    out = transform_surface(surface, nu)
    if f is None:
        return out, None, None
    driver = TransformedDriver(f, nu, K)
    worst = driver.monotonicity_probe(rng or np.random.default_rng(0), n_probes, float(surface.times[-1]))
    if worst > -(nu - K) + 1e-9:
        raise ValueError(f"transformed driver slope {worst:.4g} exceeds -(nu - K) = {-(nu - K):.4g}")
    return out, driver, worst


# ---------------------------------------------------------------------------
# polynomial-growth supersolution certificate


@dataclass(frozen=True)
class ChiCertificate:
    A: float
    C1: float
    p: float
    K: float
    C: float
    C_p_est: float
    C_p_raw: float
    times: np.ndarray = field(repr=False)
    xs: np.ndarray = field(repr=False)
    lhs: np.ndarray = field(repr=False)
    passed: bool
    diagnostic: str = ""

    @property
    def max_lhs(self) -> float:
        return float(np.max(self.lhs)) if self.lhs.size else math.nan

    @property
    def min_lhs(self) -> float:
        return float(np.min(self.lhs)) if self.lhs.size else math.nan

    def as_record(self) -> dict:
        return {
            "A": self.A,
            "p": self.p,
            "C1": self.C1,
            "C_p_est": self.C_p_est,
            "C_p_raw": self.C_p_raw,
            "K": self.K,
            "C": self.C,
            "min_lhs": self.min_lhs,
            "max_lhs": self.max_lhs,
            "pass": self.passed,
            "diagnostic": self.diagnostic,
        }


def chi_supersolution_check(
    problem: MarkovProblem,
    background: MeanFieldBackground,
    A: float,
    p: float,
    K: float,
    xs=None,
    time_indices=None,
    C1: float | None = None,
    inflation: float = 1.2,
) -> ChiCertificate:
    """Evaluate the strict supersolution inequality for ``chi = A e^{C1 (T - t)} psi``.

    ``psi(x) = (x^2 + 1)^{p/2}``.  The growth-moment constant is estimated as
    ``inflation * sup_k E[psi(X_k)]`` over the background law; since
    ``psi >= 1`` this bounds ``E[psi(X_t)] <= C_p psi(x)`` for every ``x``.
    ``C1`` defaults to ``p^2 C + K + K C_p + 1`` with ``C`` the larger of the
    declared Lipschitz and growth constants of the forward coefficients.

    The certificate passes iff the left-hand side
    ``chi_t + sigma~^2 chi_xx / 2 + chi_x b~ + K chi + K |chi_x sigma~| + K E[chi(t, X_t)]``
    is strictly negative at every lattice point.
    """
    if not A > 1:
        raise ValueError(f"A must exceed 1, got {A}")
    if not p > 1:
        raise ValueError(f"p must exceed 1, got {p}")
    fwd = problem.forward
    if fwd.n_dim != 1 or fwd.d_dim != 1:
        raise ValueError("the certificate is evaluated for n = d = 1")
    grid = background.grid
    C = max(fwd.lipschitz_C, fwd.growth_C)
    xs = np.linspace(-10.0, 10.0, 201) if xs is None else np.asarray(xs, dtype=float)
    ks = list(range(grid.n_steps + 1)) if time_indices is None else list(time_indices)

    def psi(x):
        return (x * x + 1.0) ** (p / 2.0)

    with np.errstate(over="ignore", invalid="ignore"):
        moments = np.array([np.mean(psi(background.X(k)[:, 0])) for k in range(grid.n_steps + 1)])
    x0 = float(np.atleast_1d(problem.x0)[0])
    if not np.all(np.isfinite(moments)):
        return ChiCertificate(A, math.nan, p, K, C, math.inf, math.inf, grid.nodes[ks], xs, np.array([]), False,
                              "empirical E[psi(X_t)] is not finite (heavy tails)")
    raw = float(moments.max())
    cp = inflation * raw
    c1 = p * p * C + K + K * cp + 1.0 if C1 is None else float(C1)

    ps = psi(xs)
    dpsi = p * ps * xs / (xs * xs + 1.0)
    d2psi = p * ps / (xs * xs + 1.0) + p * (p - 2.0) * ps * xs * xs / (xs * xs + 1.0) ** 2
    b, s = _coefficient_tables(problem, background, xs)
    lhs = np.empty((len(ks), len(xs)))
    for i, k in enumerate(ks):
        t = grid.node(k)
        scale = A * math.exp(c1 * (problem.T - t))
        chi, dchi, d2chi = scale * ps, scale * dpsi, scale * d2psi
        lhs[i] = (
            -c1 * chi
            + 0.5 * s[k] ** 2 * d2chi
            + dchi * b[k]
            + K * chi
            + K * np.abs(dchi * s[k])
            + K * scale * moments[k]
        )
    passed = bool(np.all(lhs < 0.0))
    note = f"raw sup E[psi(X_t)] = {raw:.6g}; ratio to psi(x0) = {raw / float(psi(np.array(x0))):.6g}"
    return ChiCertificate(A, c1, p, K, C, cp, raw, grid.nodes[ks], xs, lhs, passed, note)


def write_certificate_json(cert: ChiCertificate, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cert.as_record(), fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# growth-class boundary


@dataclass(frozen=True)
class GrowthSpec:
    A_tilde: float
    sigma: float
    T: float
    p: float = 2.0

    def __post_init__(self) -> None:
        if not self.A_tilde > 0:
            raise ValueError(f"A_tilde must be positive, got {self.A_tilde}")
        if not self.T > 0:
            raise ValueError(f"T must be positive, got {self.T}")
        if self.sigma < 0:
            raise ValueError(f"sigma must be nonnegative, got {self.sigma}")


def _log_integrand(b: np.ndarray, A: float, sigma: float, t: float) -> np.ndarray:
    g = 0.5 * np.logaddexp(2.0 * sigma * b, 0.0)
    return A * g * g - b * b / (2.0 * t) - 0.5 * math.log(2.0 * math.pi * t)


def _tail_bound(R: float, A: float, sigma: float, t: float) -> float:
    """Upper bound on the integral over ``|b| > R`` when ``A sigma^2 t < 1/2``."""
    a = 0.5 * math.log(2.0)
    kappa = 1.0 / (2.0 * t) - A * sigma * sigma
    beta = 2.0 * A * sigma * a
    gamma = A * a * a
    centre = beta / (2.0 * kappa)
    one_side = math.exp(beta * beta / (4.0 * kappa) + gamma) * 0.5 * math.sqrt(math.pi / kappa) * erfc(
        math.sqrt(kappa) * (R - centre)
    )
    return 2.0 * one_side / math.sqrt(2.0 * math.pi * t)


def growth_critical_time(
    spec: GrowthSpec,
    probe_times=None,
    ladder=(2.0, 4.0, 8.0, 16.0, 32.0),
    points_per_unit: int = 400,
) -> dict:
    """Critical time ``1 / (2 A sigma^2)`` and truncated-integral evidence around it.

    For each probe time ``t`` and truncation ``R`` the integral of
    ``exp{A [log((e^{2 sigma b} + 1)^{1/2})]^2} phi_t(b)`` over ``[-R, R]`` is
    computed in log space.  The verdict is analytic: the integral over the
    real line is finite iff ``A sigma^2 t < 1/2``; for finite cases a Gaussian
    tail bound beyond ``R`` is also reported.

    Returns:
        ``{"t_star", "rows"}`` with one row per ``(t, R)``: ``integral``,
        ``log_integral``, ``tail_bound`` and ``verdict``.
    """
    A, sigma = spec.A_tilde, spec.sigma
    t_star = math.inf if sigma == 0 else 1.0 / (2.0 * A * sigma * sigma)
    if probe_times is None:
        probe_times = np.linspace(spec.T / 10.0, spec.T, 10)
    rows = []
    for t in probe_times:
        t = float(t)
        finite = A * sigma * sigma * t < 0.5
        for R in ladder:
            n = max(2001, int(2 * R * points_per_unit) | 1)
            b = np.linspace(-R, R, n)
            w = np.full(n, (b[1] - b[0]))
            w[0] = w[-1] = 0.5 * (b[1] - b[0])
            log_int = float(logsumexp(_log_integrand(b, A, sigma, t) + np.log(w)))
            rows.append(
                {
                    "t": t,
                    "truncation_R": float(R),
                    "log_integral": log_int,
                    "integral": math.exp(log_int) if log_int < 709.0 else math.inf,
                    "tail_bound": float(_tail_bound(R, A, sigma, t)) if finite else math.inf,
                    "verdict": "finite" if finite else "divergent",
                }
            )
    return {"t_star": t_star, "rows": rows}


def write_growth_csv(report: dict, path) -> None:
    """CSV with columns ``t, truncation_R, integral_value, verdict``."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "truncation_R", "integral_value", "verdict"])
        for r in report["rows"]:
            w.writerow([repr(r["t"]), repr(r["truncation_R"]), repr(r["integral"]), r["verdict"]])
