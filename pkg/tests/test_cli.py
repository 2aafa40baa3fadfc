import json
from pathlib import Path

import pytest

from mf_fbsde.cli_runner import main
from mf_fbsde.cli_runner.scenario import ScenarioError, parse_scenario, parse_scenario_text
from mf_fbsde.cli_runner.runner import run
from mf_fbsde.cli_runner.study import parse_ladder

MINIMAL = """[problem]
family = heat
"""


def test_minimal_scenario_resolves_defaults():
    scn = parse_scenario_text(MINIMAL)
    assert scn.family == "heat"
    assert scn.get("simulation", "seed") == 0
    assert scn.get("problem", "T") == 0.5
    assert scn.get("tasks", "tol_crosscheck") == 1e-2
    assert scn.n_steps == 16
    assert "simulation.seed" in scn.defaulted


def test_fractional_dt_and_overrides():
    scn = parse_scenario_text(MINIMAL + "[simulation]\ndt = 1/64\n")
    assert scn.get("simulation", "dt") == 1 / 64 and scn.n_steps == 32
    assert scn.with_overrides("simulation", dt=1 / 8).n_steps == 4


def test_unknown_key_reports_line():
    text = MINIMAL + "\n[simulation]\nM = 100\nsigma_jump = 0.3\n"
    with pytest.raises(ScenarioError) as info:
        parse_scenario_text(text, "bad.ini")
    assert info.value.line == 6
    assert "sigma_jump" in str(info.value) and "bad.ini:6" in str(info.value)


@pytest.mark.parametrize(
    "text",
    [
        "[problem]\nfamily = no_such_family\n",
        MINIMAL + "[tasks]\nrun = bsde\n",
        MINIMAL + "[simulation]\ndt = 0.3\n",
        MINIMAL + "[simulation]\nx_min = 2\nx_max = 1\n",
        MINIMAL + "[output]\nformats = xml\n",
        MINIMAL + "[bogus]\na = 1\n",
        MINIMAL + "[simulation]\nM = -5\n",
    ],
)
def test_rejected_scenarios(text):
    with pytest.raises(ScenarioError):
        parse_scenario_text(text)


def test_hash_changes_iff_a_parameter_changes():
    a = parse_scenario_text(MINIMAL)
    b = parse_scenario_text("# a comment\n" + MINIMAL + "[simulation]\nseed = 0\n")
    c = parse_scenario_text(MINIMAL + "[simulation]\nseed = 1\n")
    assert a.scenario_hash() == b.scenario_hash()
    assert a.scenario_hash() != c.scenario_hash()
    d = parse_scenario_text(MINIMAL + "[output]\ndirectory = elsewhere\n")
    assert d.scenario_hash() != a.scenario_hash()


def test_ladder_parsing():
    assert parse_ladder("dt=1/16,1/32,1/64,1/128") == ("dt", [1 / 16, 1 / 32, 1 / 64, 1 / 128])
    with pytest.raises(ScenarioError):
        parse_ladder("dt=1/16,1/32,1/64")
    with pytest.raises(ScenarioError):
        parse_ladder("gamma=1,2,3,4")


def write(tmp_path, text, name="s.ini"):
    p = tmp_path / name
    p.write_text(text)
    return p


GROWTH = """[problem]
family = example_7_1
sigma = 1.0
T = 0.5
[simulation]
M = 500
[tasks]
run = growth
growth_A_tilde = 2.0
"""


def test_run_is_byte_deterministic(tmp_path):
    scn = parse_scenario(write(tmp_path, GROWTH))
    r1 = run(scn, tmp_path / "a")
    r2 = run(scn, tmp_path / "b")
    assert r1.exit_code == 0 and r1.checks
    for name in r1.artifacts:
        if name != "timings.json":
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
    rec = json.loads((tmp_path / "a" / "run_report.json").read_text())
    assert rec["scenario_hash"] == scn.scenario_hash() and rec["results"]["growth"]["t_star"] == 0.25


def test_picard_failure_exit_code_and_history(tmp_path, capsys):
    text = """[problem]
family = example_7_1
[simulation]
M = 500
dt = 1/16
picard_max_iter = 2
[tasks]
run = background
"""
    out = tmp_path / "out"
    code = main(["run", str(write(tmp_path, text)), "--out", str(out)])
    assert code == 3
    rec = json.loads((out / "run_report.json").read_text())
    assert rec["error"]["type"] == "PicardNotConverged"
    assert len(rec["error"]["gap_history"]) == 1
    assert main(["report", str(out)]) == 3


def test_config_errors_exit_2(tmp_path, capsys):
    assert main(["run", str(write(tmp_path, MINIMAL + "[simulation]\nsigma_jump = 1\n"))]) == 2
    assert "sigma_jump" in capsys.readouterr().err
    assert main(["study", str(write(tmp_path, MINIMAL, "h.ini")), "--ladder", "dt=1/8,1/16"]) == 2
    # a dt ladder needs the ODE-reducible family
    assert main(["study", str(write(tmp_path, MINIMAL, "h.ini")), "--ladder", "dt=1/8,1/16,1/32,1/64"]) == 2
    assert main(["report", str(tmp_path / "missing")]) == 2


def test_list_scenarios(capsys):
    assert main(["list-scenarios"]) == 0
    out = capsys.readouterr().out
    for name in ("example_3_1", "example_3_2", "randomized_battery", "heat", "abs_terminal", "example_7_1", "linear_mf"):
        assert name in out


def test_shipped_scenarios_parse():
    files = sorted(Path(__file__).resolve().parents[1].joinpath("scenarios").glob("*.ini"))
    assert len(files) >= 7
    for f in files:
        parse_scenario(f)
