"""Scenario-driven command line front end (``mf-fbsde``)."""

from .registry import FAMILIES, Family
from .runner import EXIT_CHECK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, RunReport, StageError, run
from .scenario import ScenarioError, ScenarioFile, parse_scenario, parse_scenario_text
from .study import StudyResult, convergence_study, parse_ladder

__all__ = [
    "FAMILIES",
    "Family",
    "RunReport",
    "StageError",
    "ScenarioError",
    "ScenarioFile",
    "StudyResult",
    "parse_scenario",
    "parse_scenario_text",
    "run",
    "convergence_study",
    "parse_ladder",
    "main",
    "EXIT_OK",
    "EXIT_CHECK",
    "EXIT_CONFIG",
    "EXIT_NUMERIC",
]


def main(argv=None) -> int:
    from .__main__ import main as _main

    return _main(argv)
