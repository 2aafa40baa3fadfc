import json
import math

import numpy as np
import pytest
from scipy.stats import norm

from mf_fbsde.comparison_lab import (
    POSITIVE_CUBE_MOMENT,
    ComparisonConfig,
    ComparisonScenario,
    HypothesisViolation,
    converse_consistency,
    counterexample_decreasing_yprime,
    counterexample_zprime,
    decreasing_yprime_scenario,
    random_compliant_scenario,
    run_comparison_suite,
    split_time_scenario,
    write_suite_json,
    zprime_scenario,
)
from mf_fbsde.meanfield_bsde import Driver, TerminalFunctional
from mf_fbsde.stochastic_engine import Interaction

SMALL = ComparisonConfig(n_steps=16, n_paths=3000, seed=1, n_resamples=100, n_probes=200)


def test_positive_cube_moment_value():
    assert POSITIVE_CUBE_MOMENT == pytest.approx(0.7978845608, rel=1e-9)


def test_random_scenarios_cover_all_layouts_and_pass():
    scenarios = [random_compliant_scenario(3, i) for i in range(12)]
    layouts = {s.scenario_id.rsplit("layout", 1)[1] for s in scenarios}
    assert layouts == {"0", "1", "2", "3"}
    picked = {s.scenario_id.rsplit("layout", 1)[1]: s for s in scenarios}
    outcomes = run_comparison_suite(list(picked.values()), SMALL)
    assert [o.passed for o in outcomes] == [True] * 4
    assert all(o.traces and not o.pairs for o in outcomes)


def test_counterexamples_fail_comparison_in_suite():
    outcomes = run_comparison_suite([zprime_scenario(), decreasing_yprime_scenario()], SMALL)
    assert [o.passed for o in outcomes] == [False, False]
    assert all(o.violation_measure > o.threshold for o in outcomes)


def test_zprime_counterexample_against_closed_form():
    rep = counterexample_zprime(n_paths=40_000, n_steps=32, seed=2)
    assert rep["violated"] and rep["terminal_ordered"]
    assert rep["Y0_reference"] == pytest.approx(1.5 - 2 / math.sqrt(2 * math.pi))
    assert rep["Y0_rel_error"] < 0.05
    assert rep["max_Z_rel_error"] < 0.1


def test_decreasing_yprime_counterexample_probability():
    rep = counterexample_decreasing_yprime(n_paths=10_000, n_steps=128, seed=4)
    # P(B_1^2 < 1 - e^{-1}) for a standard normal B_1
    assert rep["prob_reference"] == pytest.approx(2 * norm.cdf(math.sqrt(1 - math.exp(-1))) - 1)
    assert rep["violated"]
    assert abs(rep["prob_Y1_negative"] - rep["prob_reference"]) < 0.04
    assert rep["zero_solution_max_abs"] == 0.0


def _const_driver(value, zfree=True, ymono=True):
    return Driver(Interaction(own=lambda t, x, y, z: np.full(np.shape(y), value)), 1.0, zfree, ymono)


def test_validate_rejects_bad_scenarios():
    rng = np.random.default_rng(0)
    xi = TerminalFunctional(lambda bp, x: x[:, -1, 0])
    unordered = ComparisonScenario("unordered", (_const_driver(1.0), _const_driver(0.0)), (xi, xi))
    with pytest.raises(HypothesisViolation):
        unordered.validate(rng, 50)
    flagless = ComparisonScenario("flagless", (_const_driver(0.0, False, False),) * 2, (xi, xi))
    with pytest.raises(HypothesisViolation):
        flagless.validate(rng, 50)
    liar = Driver(Interaction(primed=lambda t, xp, yp, zp: zp[..., 0]), 1.0, True, True)
    with pytest.raises(HypothesisViolation):
        ComparisonScenario("liar", (liar, liar), (xi, xi)).validate(rng, 50)


def test_unordered_terminal_is_caught_on_paths():
    xi1 = TerminalFunctional(lambda bp, x: x[:, -1, 0])
    xi2 = TerminalFunctional(lambda bp, x: np.zeros(x.shape[0]))
    sc = ComparisonScenario("bad_terminal", (_const_driver(0.0),) * 2, (xi1, xi2))
    with pytest.raises(HypothesisViolation):
        run_comparison_suite([sc], SMALL)


def test_converse_consistency_after_split():
    sc = split_time_scenario(5, 0.5)
    rep = converse_consistency(sc, 8, SMALL)
    assert rep["pass"], rep
    # before the split the drivers differ, so the equality must break there
    early = converse_consistency(sc, 0, SMALL)
    assert not early["pass"]


def test_suite_json(tmp_path):
    outcomes = run_comparison_suite([random_compliant_scenario(0, 0)], SMALL)
    write_suite_json(outcomes, tmp_path / "suite.json")
    rec = json.load(open(tmp_path / "suite.json"))
    assert set(rec[0]) == {"scenario_id", "violation_measure", "threshold", "pass"}
