"""Task execution for a resolved scenario.

Tasks run in dependency order (background, value surface, PDE, then the
checks that need them).  Every artifact is written with ``repr`` floats and
sorted JSON keys so a scenario and seed fix every byte; stage wall-clock
times go to a separate ``timings.json`` for the same reason.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import __version__
from ..comparison_lab import ComparisonConfig, counterexample_decreasing_yprime, counterexample_zprime, run_comparison_suite
from ..fbsde_value import (
    ValueConfig,
    build_background,
    build_value_surface,
    dpp_check,
    flow_bundle,
    regularity_probe,
    write_dpp_csv,
)
from ..meanfield_bsde import PicardConfig, PicardNotConverged, SingularRegression, contraction_report
from ..meanfield_sde import NumericalBlowUp
from ..nonlocal_pde import (
    GrowthSpec,
    boundary_influence,
    chi_supersolution_check,
    growth_critical_time,
    make_pde_grid,
    solve_nonlocal_pde_1d,
    viscosity_crosscheck,
    write_certificate_json,
    write_growth_csv,
)
from ..stochastic_engine import derive_seed, sample_brownian
from .registry import FAMILIES, battery_scenarios
from .scenario import TASKS, ScenarioFile

__all__ = ["RunReport", "StageError", "run", "write_json", "EXIT_OK", "EXIT_CHECK", "EXIT_CONFIG", "EXIT_NUMERIC"]

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3
NUMERIC_ERRORS = (PicardNotConverged, SingularRegression, NumericalBlowUp, FloatingPointError, np.linalg.LinAlgError)


class StageError(RuntimeError):
    """A solver failure tagged with the task that raised it."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class RunReport:
    scenario_hash: str
    tool_version: str
    output_dir: str
    resolved: dict
    timings: dict = field(default_factory=dict)
    artifacts: list = field(default_factory=list)
    checks: dict = field(default_factory=dict)
    results: dict = field(default_factory=dict)
    error: dict | None = None

    @property
    def exit_code(self) -> int:
        if self.error is not None:
            return EXIT_CONFIG if self.error.get("kind") == "config" else EXIT_NUMERIC
        return EXIT_OK if all(self.checks.values()) else EXIT_CHECK

    def as_record(self) -> dict:
        return {
            "scenario_hash": self.scenario_hash,
            "tool_version": self.tool_version,
            "resolved_config": self.resolved,
            "artifacts": sorted(self.artifacts),
            "checks": self.checks,
            "results": self.results,
            "error": self.error,
            "exit_code": self.exit_code,
        }


def _clean(obj):
    """JSON-ready copy: numpy scalars and arrays to Python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    return obj


def write_json(obj, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_clean(obj), fh, indent=2, sort_keys=True, ensure_ascii=False)
        fh.write("\n")


class _Context:
    def __init__(self, scn: ScenarioFile, out: Path, report: RunReport):
        self.scn = scn
        self.out = out
        self.report = report
        self.family = FAMILIES[scn.family]
        self.cache: dict = {}
        sim = scn.values["simulation"]
        self.picard = PicardConfig(tol=sim["picard_tol"], max_iter=sim["picard_max_iter"], regression_degree=sim["regression_degree"])
        self.value_config = ValueConfig(
            n_paths=sim["value_paths"],
            seed=derive_seed(sim["seed"], "value"),
            regression_degree=sim["regression_degree"],
            n_resamples=sim["n_resamples"],
        )

    @property
    def csv_on(self) -> bool:
        return "csv" in self.scn.get("output", "formats")

    def artifact(self, name: str) -> Path:
        path = self.out / name
        self.report.artifacts.append(name)
        return path

    def xs(self) -> np.ndarray:
        sim = self.scn.values["simulation"]
        n = int(round((sim["x_max"] - sim["x_min"]) / sim["dx"])) + 1
        return np.linspace(sim["x_min"], sim["x_max"], n)

    def problem(self):
        if "problem" not in self.cache:
            self.cache["problem"] = self.family.build(self.scn)
        return self.cache["problem"]


# ---------------------------------------------------------------------------
# tasks


def _task_bsde(ctx: _Context) -> None:
    scn, sim, tol = ctx.scn, ctx.scn.values["simulation"], ctx.scn.values["tasks"]
    seed = derive_seed(sim["seed"], "bsde")
    csv_path = ctx.artifact("mean_curve.csv") if ctx.csv_on else None
    if ctx.family.kind == "example_3_1":
        res = counterexample_zprime(sim["M"], scn.n_steps, seed, ctx.picard, csv_path)
        ctx.report.checks["y0_within_band"] = res["Y0_rel_error"] <= tol["tol_y0_rel"]
        ctx.report.checks["mean_z_within_band"] = res["max_Z_rel_error"] <= tol["tol_z_rel"]
        ctx.report.checks["comparison_violated"] = res["violated"]
    else:
        res = counterexample_decreasing_yprime(sim["M"], scn.n_steps, seed, ctx.picard, csv_path)
        ctx.report.checks["mean_tracks_reference"] = res["max_mean_rel_error"] <= tol["tol_mean_rel"]
        ctx.report.checks["probability_within_band"] = abs(res["prob_Y1_negative"] - res["prob_reference"]) <= tol["tol_prob"]
        ctx.report.checks["comparison_violated"] = res["violated"]
    ctx.report.results["bsde"] = {k: v for k, v in res.items() if k not in ("mean_Y", "reference")}


def _suite(ctx: _Context):
    if "suite" not in ctx.cache:
        sim, tol = ctx.scn.values["simulation"], ctx.scn.values["tasks"]
        config = ComparisonConfig(
            n_steps=ctx.scn.n_steps,
            n_paths=sim["M"],
            seed=sim["seed"],
            picard=ctx.picard,
            n_resamples=sim["n_resamples"],
            threshold_factor=tol["tol_comparison_factor"],
        )
        scenarios = battery_scenarios(ctx.scn)
        outcomes = run_comparison_suite(scenarios, config)
        ctx.cache["suite"] = (scenarios, outcomes)
    return ctx.cache["suite"]


def _task_comparison(ctx: _Context) -> None:
    scenarios, outcomes = _suite(ctx)
    compliant = [o for s, o in zip(scenarios, outcomes) if s.check_hypotheses]
    counter = [o for s, o in zip(scenarios, outcomes) if not s.check_hypotheses]
    ctx.report.checks["compliant_no_violation"] = all(o.passed for o in compliant)
    if counter:
        ctx.report.checks["counterexamples_violate"] = all(not o.passed for o in counter)
    write_json([o.as_record() for o in outcomes], ctx.artifact("comparison_suite.json"))
    ctx.report.results["comparison"] = {
        "n_compliant": len(compliant),
        "n_compliant_violations": sum(not o.passed for o in compliant),
        "counterexamples": {o.scenario_id: o.violation_measure for o in counter},
    }


def _task_contraction(ctx: _Context) -> None:
    scenarios, outcomes = _suite(ctx)
    slack = ctx.scn.get("tasks", "tol_contraction_slack")
    rows, ok = [], True
    for sc, outcome in zip(scenarios, outcomes):
        for j, trace in enumerate(outcome.traces):
            rep = contraction_report(trace, slack=slack)
            ok &= rep.within_bound
            rows.append({
                "scenario_id": sc.scenario_id,
                "solution": j + 1,
                "ratios": rep.ratios,
                "max_ratio": max(rep.ratios) if rep.ratios else None,
                "within_bound": rep.within_bound,
            })
    ctx.report.checks["contraction_ratios"] = bool(ok)
    write_json(rows, ctx.artifact("contraction.json"))
    ratios = [r for row in rows for r in row["ratios"]]
    ctx.report.results["contraction"] = {"bound": 1 / math.sqrt(2) + slack, "max_ratio": max(ratios) if ratios else None}


def _background(ctx: _Context):
    if "background" not in ctx.cache:
        sim = ctx.scn.values["simulation"]
        problem = ctx.problem()
        from ..stochastic_engine import build_grid

        grid = build_grid(0.0, problem.T, ctx.scn.n_steps)
        bundle = sample_brownian(grid, problem.forward.d_dim, sim["M"], derive_seed(sim["seed"], "background"))
        ctx.cache["background"] = build_background(problem, sim["M"], bundle, ctx.picard)
    return ctx.cache["background"]


def _task_background(ctx: _Context) -> None:
    bg = _background(ctx)
    grid = bg.grid
    means = [float(bg.X(k)[:, 0].mean()) for k in range(grid.n_steps + 1)]
    ys = [float(bg.Y(k).mean()) for k in range(grid.n_steps + 1)]
    if ctx.csv_on:
        with open(ctx.artifact("background.csv"), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "mean_X", "std_X", "mean_Y"])
            for k, t in enumerate(grid.nodes):
                w.writerow([repr(float(t)), repr(means[k]), repr(float(bg.X(k)[:, 0].std())), repr(ys[k])])
    ctx.report.results["background"] = {
        "Y0": ys[0],
        "picard_iterations": bg.pair.iterations,
        "gap_history": [d["gap_beta_norm"] for d in bg.pair.diagnostics],
    }


def _surface_times(ctx: _Context) -> np.ndarray:
    grid = _background(ctx).grid
    count = ctx.scn.get("simulation", "surface_times")
    if grid.n_steps % (count - 1):
        raise ValueError(f"surface_times - 1 = {count - 1} must divide the {grid.n_steps} time steps")
    return grid.nodes[:: grid.n_steps // (count - 1)]


def _value_surface(ctx: _Context):
    if "surface" not in ctx.cache:
        ctx.cache["surface"] = build_value_surface(_background(ctx), _surface_times(ctx), ctx.xs(), ctx.value_config)
    return ctx.cache["surface"]


def _truth_error(ctx: _Context, surface) -> float | None:
    truth = ctx.family.closed_form
    if truth is None:
        return None
    err = [np.max(np.abs(surface.values[i, 1:-1] - truth(ctx.scn, t, surface.xs[1:-1]))) for i, t in enumerate(surface.times)]
    return float(max(err))


def _task_value_surface(ctx: _Context) -> None:
    surface = _value_surface(ctx)
    if ctx.csv_on:
        surface.write_csv(ctx.artifact("value_surface.csv"))
    ctx.report.results["value_surface"] = {
        "n_times": len(surface.times),
        "n_space": len(surface.xs),
        "max_std_error": float(np.max(surface.std_errors)) if surface.std_errors is not None else None,
        "max_error_vs_closed_form": _truth_error(ctx, surface),
    }


def _pde(ctx: _Context):
    if "pde" not in ctx.cache:
        bg = _background(ctx)
        xs = ctx.xs()
        grid = make_pde_grid(ctx.problem(), bg, xs[0], xs[-1], len(xs))
        ctx.cache["pde"] = (grid, solve_nonlocal_pde_1d(ctx.problem(), bg, grid))
    return ctx.cache["pde"]


def _task_pde(ctx: _Context) -> None:
    grid, surface = _pde(ctx)
    if ctx.csv_on:
        surface.write_csv(ctx.artifact("pde_surface.csv"))
    influence = boundary_influence(ctx.problem(), _background(ctx), grid)
    ctx.report.results["pde"] = {
        "refine": grid.refine,
        "cfl_ratio": grid.cfl_ratio,
        "boundary_influence": influence,
        "max_atoms_outside_domain": surface.diagnostics["max_atoms_outside_domain"],
        "max_error_vs_closed_form": _truth_error(ctx, surface),
    }


def _task_crosscheck(ctx: _Context) -> None:
    prob = _value_surface(ctx)
    _, pde = _pde(ctx)
    tol = ctx.scn.get("tasks", "tol_crosscheck")
    rep = viscosity_crosscheck(prob, pde.resample(prob.times, prob.xs), tol)
    ctx.report.checks["crosscheck"] = rep["pass"]
    for name, surface in (("probabilistic", prob), ("pde", pde)):
        err = _truth_error(ctx, surface)
        if err is not None:
            rep[f"{name}_vs_closed_form"] = err
            ctx.report.checks[f"{name}_vs_closed_form"] = err <= tol
    write_json(rep, ctx.artifact("crosscheck.json"))
    ctx.report.results["crosscheck"] = {k: rep[k] for k in rep if k not in ("per_time_max", "times")}


def _task_dpp(ctx: _Context) -> None:
    bg = _background(ctx)
    surface = _value_surface(ctx)
    tol = ctx.scn.values["tasks"]
    config = ctx.value_config
    bundle = flow_bundle(bg, config)
    rng = np.random.default_rng(derive_seed(ctx.scn.get("simulation", "seed"), "dpp_probes"))
    times = surface.times
    xs = surface.xs
    lo, hi = xs[0] + 0.25 * (xs[-1] - xs[0]), xs[-1] - 0.25 * (xs[-1] - xs[0])
    records = []
    for _ in range(tol["dpp_points"]):
        i = int(rng.integers(0, len(times) - 1))
        j = int(rng.integers(i + 1, len(times)))
        x = float(rng.uniform(lo, hi))
        r = dpp_check(bg, surface, float(times[i]), x, float(times[j] - times[i]), config, bundle)
        records.append(r)
    factor = tol["tol_dpp_factor"] / 3.0
    passed = [r.residual <= factor * r.threshold for r in records]
    fraction = float(np.mean(passed))
    ctx.report.checks["dpp_fraction"] = fraction >= tol["tol_dpp_fraction"]
    if ctx.csv_on:
        write_dpp_csv(records, ctx.artifact("dpp.csv"))
    ctx.report.results["dpp"] = {
        "n_points": len(records),
        "pass_fraction": fraction,
        "max_residual": max(r.residual for r in records),
        "max_outside_fraction": max(r.outside_fraction for r in records),
    }


def _task_regularity(ctx: _Context) -> None:
    rep = regularity_probe(_value_surface(ctx))
    write_json(rep, ctx.artifact("regularity.json"))
    ctx.report.results["regularity"] = rep


def _task_chi(ctx: _Context) -> None:
    tol = ctx.scn.values["tasks"]
    c1 = None if tol["chi_C1"] == "formula" else float(tol["chi_C1"])
    cert = chi_supersolution_check(
        ctx.problem(), _background(ctx), tol["chi_A"], tol["chi_p"], tol["chi_K"], xs=ctx.xs(), C1=c1
    )
    write_certificate_json(cert, ctx.artifact("chi_certificate.json"))
    ctx.report.checks["chi_certificate"] = cert.passed
    ctx.report.results["chi_certificate"] = cert.as_record()


def growth_verdicts_consistent(report: dict) -> bool:
    """Finite rows settle along the ladder; divergent rows keep growing."""
    by_t: dict = {}
    for row in report["rows"]:
        by_t.setdefault(row["t"], []).append(row)
    ok = True
    for rows in by_t.values():
        logs = [r["log_integral"] for r in sorted(rows, key=lambda r: r["truncation_R"])]
        if rows[0]["verdict"] == "finite":
            ok &= abs(logs[-1] - logs[-2]) <= 1e-6 and rows[-1]["tail_bound"] <= 1e-6 * math.exp(logs[-1])
        else:
            steps = np.diff(logs)
            ok &= bool(np.all(steps > 0)) and steps[-1] >= math.log(1.1)
    return bool(ok)


def _task_growth(ctx: _Context) -> None:
    problem = ctx.scn.values["problem"]
    spec = GrowthSpec(ctx.scn.get("tasks", "growth_A_tilde"), problem["sigma"] or 0.0, problem["T"])
    t_star = math.inf if spec.sigma == 0 else 1.0 / (2.0 * spec.A_tilde * spec.sigma**2)
    probes = list(np.linspace(spec.T / 10.0, spec.T, 10))
    if math.isfinite(t_star):
        probes += [0.8 * t_star, t_star, 1.2 * t_star]
    report = growth_critical_time(spec, sorted(set(probes)))
    if ctx.csv_on:
        write_growth_csv(report, ctx.artifact("growth.csv"))
    ctx.report.checks["growth_boundary"] = growth_verdicts_consistent(report) and report["t_star"] == t_star
    ctx.report.results["growth"] = {"t_star": report["t_star"], "A_tilde": spec.A_tilde, "sigma": spec.sigma}


TASK_FUNCS = {
    "bsde": _task_bsde,
    "comparison": _task_comparison,
    "contraction": _task_contraction,
    "background": _task_background,
    "value_surface": _task_value_surface,
    "pde": _task_pde,
    "crosscheck": _task_crosscheck,
    "dpp": _task_dpp,
    "regularity": _task_regularity,
    "chi_certificate": _task_chi,
    "growth": _task_growth,
}


def run(scn: ScenarioFile, out_dir=None) -> RunReport:
    """Execute the scenario's tasks and write artifacts plus ``run_report.json``.

    Solver failures are caught per stage and recorded in the report (exit
    code 3) together with the Picard gap history when there is one;
    parameter combinations a solver rejects are recorded as config errors
    (exit code 2).
    """
    out = Path(out_dir if out_dir is not None else scn.get("output", "directory"))
    out.mkdir(parents=True, exist_ok=True)
    report = RunReport(scn.scenario_hash(), __version__, str(out), scn.values)
    ctx = _Context(scn, out, report)
    write_json(scn.values, ctx.artifact("resolved_scenario.json"))
    for task in sorted(set(scn.tasks), key=TASKS.index):
        start = time.perf_counter()
        try:
            TASK_FUNCS[task](ctx)
        except (ValueError, *NUMERIC_ERRORS) as exc:
            numeric = isinstance(exc, NUMERIC_ERRORS)
            report.error = {
                "stage": task,
                "kind": "numeric" if numeric else "config",
                "type": type(exc).__name__,
                "message": str(StageError(task, exc)),
            }
            if isinstance(exc, PicardNotConverged):
                report.error["gap_history"] = exc.history
            report.timings[task] = time.perf_counter() - start
            break
        report.timings[task] = time.perf_counter() - start
    write_json(report.timings, ctx.artifact("timings.json"))
    report.artifacts.append("run_report.json")
    write_json(report.as_record(), out / "run_report.json")
    return report
