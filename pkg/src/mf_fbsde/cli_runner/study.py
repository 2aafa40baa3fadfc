"""Convergence ladders: rerun one quantity along a parameter and fit the log-log slope."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy import stats

from ..fbsde_value import build_background
from ..meanfield_bsde import PicardConfig
from ..meanfield_sde import solve_conditional_flow, solve_mckean, solve_n_particle
from ..nonlocal_pde import make_pde_grid, solve_nonlocal_pde_1d
from ..stochastic_engine import BrownianBundle, EmpiricalLaw, build_grid, derive_seed, empirical_expectation, sample_brownian
from ..comparison_lab import POSITIVE_CUBE_MOMENT
from .registry import FAMILIES, LINEAR_MF
from .runner import write_json
from .scenario import ScenarioError, ScenarioFile

__all__ = ["StudyResult", "parse_ladder", "convergence_study", "STUDY_FAMILIES", "SLOPE_BANDS"]

# which family each ladder runs on, and the acceptance band for its slope
STUDY_FAMILIES = {"dt": ("linear_mf",), "M": ("example_3_1",), "N": ("linear_mf",), "dx": ("abs_terminal", "heat")}
SLOPE_BANDS = {"dt": (0.7, 1.3), "M": (-0.65, -0.35), "N": (-0.65, -0.35), "dx": None}
LABELS = {
    "dt": "weak order of the explicit backward scheme on a driver whose mean solves a linear ODE",
    "M": "Monte Carlo RMS error of the empirical mean of (B_1^+)^3 against its exact value",
    "N": "empirical propagation-of-chaos rate of the tagged particle; measured, not a proven rate",
    "dx": "finite-difference error at t = 0 on the middle half of the domain against the closed form",
}


@dataclass(frozen=True)
class StudyResult:
    param: str
    values: list
    estimates: list
    errors: list
    slope: float
    ci_low: float
    ci_high: float
    band: tuple | None
    label: str

    @property
    def passed(self) -> bool | None:
        if self.band is None:
            return None
        return bool(self.band[0] <= self.slope <= self.band[1])

    def as_record(self) -> dict:
        return {
            "param": self.param,
            "values": self.values,
            "estimates": self.estimates,
            "errors": self.errors,
            "slope": self.slope,
            "slope_ci95": [self.ci_low, self.ci_high],
            "band": list(self.band) if self.band else None,
            "pass": self.passed,
            "label": self.label,
        }


def parse_ladder(spec: str) -> tuple[str, list[float]]:
    """``"dt=1/16,1/32,1/64,1/128"`` to ``("dt", [0.0625, ...])``.

    Raises:
        ScenarioError: unknown parameter, malformed value, or fewer than 4 points.
    """
    if "=" not in spec:
        raise ScenarioError(f"ladder {spec!r} must look like param=v1,v2,...")
    param, _, rest = spec.partition("=")
    param = param.strip()
    if param not in SLOPE_BANDS:
        raise ScenarioError(f"ladder parameter {param!r} not in {sorted(SLOPE_BANDS)}")
    try:
        values = [float(Fraction(v.strip())) for v in rest.split(",") if v.strip()]
    except ValueError as exc:
        raise ScenarioError(f"ladder {spec!r}: {exc}") from exc
    if len(values) < 4:
        raise ScenarioError(f"ladder needs at least 4 points, got {len(values)}")
    if len(set(values)) != len(values) or min(values) <= 0:
        raise ScenarioError("ladder values must be positive and distinct")
    return param, values


def _fit(values, errors):
    x, y = np.log(values), np.log(errors)
    fit = stats.linregress(x, y)
    half = stats.t.ppf(0.975, len(values) - 2) * fit.stderr
    return float(fit.slope), float(fit.slope - half), float(fit.slope + half)


def _dt_point(scn: ScenarioFile, dt: float):
    s = scn.with_overrides("simulation", dt=dt)
    sim = s.values["simulation"]
    problem = FAMILIES[s.family].build(s)
    grid = build_grid(0.0, problem.T, s.n_steps)
    bundle = sample_brownian(grid, 1, sim["M"], derive_seed(sim["seed"], "background"))
    bg = build_background(problem, sim["M"], bundle, PicardConfig(tol=sim["picard_tol"], max_iter=sim["picard_max_iter"]))
    rate = LINEAR_MF["gamma"]
    # the basis holds constants, so the sample mean of Y solves the discrete ODE exactly;
    # comparing with the same sample's terminal mean removes Monte Carlo noise
    reference = float(bg.Y(grid.n_steps).mean()) * math.exp(rate * problem.T)
    estimate = float(bg.Y(0).mean())
    return estimate, abs(estimate - reference)


def _m_point(scn: ScenarioFile, M: int, replications: int = 50):
    seed = scn.get("simulation", "seed")
    grid = build_grid(0.0, 1.0, 1)
    estimates = []
    for r in range(replications):
        b1 = sample_brownian(grid, 1, int(M), derive_seed(seed, f"m_ladder/{int(M)}/{r}")).paths()[:, -1, :]
        estimates.append(empirical_expectation(EmpiricalLaw(b1), lambda x: np.maximum(x[:, 0], 0.0) ** 3))
    estimates = np.array(estimates)
    return float(estimates.mean()), float(np.sqrt(np.mean((estimates - POSITIVE_CUBE_MOMENT) ** 2)))


def _n_point(scn: ScenarioFile, N: int, replications: int = 400, law_atoms: int = 200_000):
    problem = FAMILIES[scn.family].build(scn)
    seed = scn.get("simulation", "seed")
    grid = build_grid(0.0, problem.T, scn.n_steps)
    law_bundle = sample_brownian(grid, 1, law_atoms, derive_seed(seed, "n_ladder/law"))
    _, frozen = solve_mckean(problem.forward, problem.x0, law_atoms, law_bundle)
    group = int(N) + 1
    bundle = sample_brownian(grid, 1, replications * group, derive_seed(seed, f"n_ladder/{int(N)}"))
    tagged = solve_n_particle(problem.forward, int(N), problem.x0, bundle, replications)[0]
    own = BrownianBundle(grid, 1, replications, bundle.master_seed, bundle.increments[::group][:replications])
    limit = solve_conditional_flow(problem.forward, frozen, 0, problem.x0, own)
    gap = tagged.states[:, -1, 0] - limit.states[:, -1, 0]
    return float(tagged.states[:, -1, 0].mean()), float(np.sqrt(np.mean(gap**2)))


def _dx_point(scn: ScenarioFile, dx: float):
    family = FAMILIES[scn.family]
    sim = scn.values["simulation"]
    problem = family.build(scn)
    grid = build_grid(0.0, problem.T, scn.n_steps)
    bundle = sample_brownian(grid, 1, sim["M"], derive_seed(sim["seed"], "background"))
    bg = build_background(problem, sim["M"], bundle)
    n = int(round((sim["x_max"] - sim["x_min"]) / dx)) + 1
    pg = make_pde_grid(problem, bg, sim["x_min"], sim["x_max"], n)
    surface = solve_nonlocal_pde_1d(problem, bg, pg)
    # the middle half of the domain, away from the extrapolated ends
    lo, hi = 0.75 * sim["x_min"] + 0.25 * sim["x_max"], 0.25 * sim["x_min"] + 0.75 * sim["x_max"]
    inner = (surface.xs >= lo - 1e-12) & (surface.xs <= hi + 1e-12)
    truth = family.closed_form(scn, 0.0, surface.xs[inner])
    return float(np.interp(0.0, surface.xs, surface.values[0])), float(np.max(np.abs(surface.values[0, inner] - truth)))


POINTS = {"dt": _dt_point, "M": _m_point, "N": _n_point, "dx": _dx_point}


def convergence_study(scn: ScenarioFile, param: str, values, out_dir=None) -> StudyResult:
    """Rerun the scenario along ``values`` of ``param`` and fit the error slope.

    Args:
        scn: the scenario; its family must support the ladder (see
            ``STUDY_FAMILIES``).
        param: one of ``dt``, ``M``, ``N``, ``dx``.
        values: at least four ladder values.
        out_dir: if given, ``study_<param>.csv`` and ``study_<param>.json`` are
            written there.

    Raises:
        ScenarioError: unsupported family or a ladder shorter than 4.
    """
    if param not in POINTS:
        raise ScenarioError(f"unknown ladder parameter {param!r}")
    if scn.family not in STUDY_FAMILIES[param]:
        raise ScenarioError(f"a {param} ladder runs on {', '.join(STUDY_FAMILIES[param])}, not {scn.family!r}")
    values = [float(v) for v in values]
    if len(values) < 4:
        raise ScenarioError(f"ladder needs at least 4 points, got {len(values)}")
    estimates, errors = [], []
    for v in values:
        est, err = POINTS[param](scn, int(v) if param in ("M", "N") else v)
        estimates.append(est)
        errors.append(err)
    if min(errors) <= 0:
        raise FloatingPointError(f"zero error on the {param} ladder; the slope is undefined")
    slope, lo, hi = _fit(values, errors)
    result = StudyResult(param, values, estimates, errors, slope, lo, hi, SLOPE_BANDS[param], LABELS[param])
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / f"study_{param}.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow([param, "estimate", "error"])
            for v, e, r in zip(values, estimates, errors):
                w.writerow([repr(v), repr(e), repr(r)])
        write_json(result.as_record(), out / f"study_{param}.json")
    return result
