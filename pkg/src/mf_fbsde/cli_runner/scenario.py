"""Scenario files: sectioned key/value text, validated against a typed schema.

A scenario names a coefficient family from the registry and sets numeric
parameters.  Anything not given falls back to a family default or a global
default; the resolved dictionary is what gets hashed, so two files that
resolve to the same parameters share a hash.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import re
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

__all__ = ["ScenarioError", "ScenarioFile", "parse_scenario", "parse_scenario_text", "SCHEMA", "TASKS"]

TASKS = (
    "bsde",
    "comparison",
    "contraction",
    "background",
    "value_surface",
    "pde",
    "crosscheck",
    "dpp",
    "regularity",
    "chi_certificate",
    "growth",
)


class ScenarioError(ValueError):
    """Malformed or out-of-range scenario content, located by line where possible."""

    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        where = ""
        if path:
            where = f"{path}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}".strip())
        self.line = line


@dataclass(frozen=True)
class Param:
    kind: str
    default: object = None
    lo: float | None = None
    hi: float | None = None
    help: str = ""

    def convert(self, raw: str):
        raw = raw.strip()
        if self.kind == "int":
            value = int(raw.replace("_", ""))
        elif self.kind == "float":
            value = float(Fraction(raw)) if "/" in raw else float(raw)
        elif self.kind == "str":
            value = raw
        elif self.kind == "list":
            value = [item.strip() for item in raw.split(",") if item.strip()]
        elif self.kind == "bool":
            low = raw.lower()
            if low not in ("true", "false", "yes", "no", "1", "0"):
                raise ValueError(f"expected a boolean, got {raw!r}")
            value = low in ("true", "yes", "1")
        else:
            raise AssertionError(self.kind)
        if self.lo is not None and value < self.lo:
            raise ValueError(f"{value} is below the minimum {self.lo}")
        if self.hi is not None and value > self.hi:
            raise ValueError(f"{value} is above the maximum {self.hi}")
        return value


# ``None`` defaults are filled from the family, then from ``GLOBAL_DEFAULTS``.
SCHEMA: dict[str, dict[str, Param]] = {
    "problem": {
        "family": Param("str", help="registry name"),
        "T": Param("float", None, 1e-6, 100.0, "horizon"),
        "sigma": Param("float", None, 0.0, 10.0, "volatility for example_7_1"),
        "battery_seed": Param("int", 0, 0, 2**31 - 1),
        "battery_size": Param("int", 50, 1, 10_000),
        "include_counterexamples": Param("bool", True),
    },
    "simulation": {
        "M": Param("int", None, 10, 10_000_000, "law atoms / paths"),
        "N": Param("int", 100, 1, 1_000_000, "particles per system"),
        "dt": Param("float", None, 1e-6, 10.0, "time step; must divide T"),
        "seed": Param("int", 0, 0, 2**63 - 1),
        "regression_degree": Param("int", 3, 0, 8),
        "picard_tol": Param("float", 1e-6, 1e-14, 1.0),
        "picard_max_iter": Param("int", 50, 1, 10_000),
        "n_resamples": Param("int", 200, 10, 100_000),
        "value_paths": Param("int", None, 10, 10_000_000),
        "dx": Param("float", None, 1e-5, 10.0),
        "x_min": Param("float", None, -1e6, 1e6),
        "x_max": Param("float", None, -1e6, 1e6),
        "surface_times": Param("int", None, 2, 10_000),
    },
    "tasks": {
        "run": Param("list", None),
        "tol_y0_rel": Param("float", 0.02, 0.0, 10.0),
        "tol_z_rel": Param("float", 0.03, 0.0, 10.0),
        "tol_mean_rel": Param("float", 0.02, 0.0, 10.0),
        "tol_prob": Param("float", 0.02, 0.0, 1.0),
        "tol_comparison_factor": Param("float", 3.0, 0.0, 100.0),
        "tol_contraction_slack": Param("float", 0.1, 0.0, 10.0),
        "tol_crosscheck": Param("float", None, 0.0, 100.0),
        "tol_dpp_factor": Param("float", 3.0, 0.0, 100.0),
        "tol_dpp_fraction": Param("float", 0.95, 0.0, 1.0),
        "dpp_points": Param("int", 100, 1, 100_000),
        "chi_A": Param("float", 2.0, 1.0, 1e6),
        "chi_p": Param("float", 2.0, 1.0, 100.0),
        "chi_K": Param("float", None, 0.0, 1e6),
        "chi_C1": Param("str", "formula"),
        "growth_A_tilde": Param("float", 1.0, 1e-9, 1e6),
    },
    "output": {
        "directory": Param("str", "out"),
        "formats": Param("list", ["csv", "json"]),
    },
}

GLOBAL_DEFAULTS = {
    ("problem", "T"): 1.0,
    ("simulation", "M"): 20_000,
    ("simulation", "dt"): 1.0 / 32.0,
    ("simulation", "dx"): 0.05,
    ("simulation", "x_min"): -1.0,
    ("simulation", "x_max"): 1.0,
    ("simulation", "surface_times"): 5,
    ("tasks", "tol_crosscheck"): 2e-2,
    ("tasks", "chi_K"): 1.0,
}


@dataclass(frozen=True)
class ScenarioFile:
    """Fully resolved scenario; ``defaulted`` lists keys that came from defaults."""

    values: dict
    source: str = ""
    defaulted: tuple = field(default_factory=tuple)

    def get(self, section: str, key: str):
        return self.values[section][key]

    @property
    def family(self) -> str:
        return self.values["problem"]["family"]

    @property
    def n_steps(self) -> int:
        return int(round(self.values["problem"]["T"] / self.values["simulation"]["dt"]))

    @property
    def tasks(self) -> list[str]:
        return list(self.values["tasks"]["run"])

    def canonical_json(self) -> str:
        return json.dumps(self.values, sort_keys=True, separators=(",", ":"))

    def scenario_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()

    def with_overrides(self, section: str, **updates) -> "ScenarioFile":
        values = json.loads(json.dumps(self.values))
        values[section].update(updates)
        if section == "simulation" and "dt" in updates:
            _check_dt(values)
        return ScenarioFile(values, self.source, self.defaulted)


def _key_lines(text: str) -> dict:
    """Line numbers of ``key`` entries per section (1-based)."""
    lines: dict = {}
    section = None
    for n, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        m = re.match(r"^\[([^\]]+)\]$", s)
        if m:
            section = m.group(1).strip()
            lines.setdefault((section, None), n)
            continue
        m = re.match(r"^([^=:#;\s][^=:]*?)\s*[=:]", s)
        if m and section is not None:
            lines[(section, m.group(1).strip())] = n
    return lines


def _check_dt(values: dict) -> None:
    T, dt = values["problem"]["T"], values["simulation"]["dt"]
    steps = T / dt
    if abs(steps - round(steps)) > 1e-9 * max(1.0, steps) or round(steps) < 1:
        raise ScenarioError(f"dt = {dt} does not divide T = {T}")


def parse_scenario_text(text: str, source: str = "<string>") -> ScenarioFile:
    """Parse and resolve scenario text.

    Raises:
        ScenarioError: syntax errors, unknown sections or keys, unknown
            families or tasks, and out-of-range values, each with its line.
    """
    from .registry import FAMILIES

    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ScenarioError(f"malformed scenario: {exc.message if hasattr(exc, 'message') else exc}",
                            getattr(exc, "lineno", None), source) from exc
    lines = _key_lines(text)
    for section in parser.sections():
        if section not in SCHEMA:
            raise ScenarioError(f"unknown section [{section}]", lines.get((section, None)), source)
        for key in parser[section]:
            if key not in SCHEMA[section]:
                raise ScenarioError(f"unknown key {key!r} in [{section}]", lines.get((section, key)), source)

    if not parser.has_option("problem", "family"):
        raise ScenarioError("[problem] family is required", lines.get(("problem", None)), source)
    family_name = parser["problem"]["family"].strip()
    if family_name not in FAMILIES:
        raise ScenarioError(
            f"unknown coefficient family {family_name!r}; known: {', '.join(sorted(FAMILIES))}",
            lines.get(("problem", "family")),
            source,
        )
    family = FAMILIES[family_name]

    values: dict = {}
    defaulted = []
    for section, params in SCHEMA.items():
        values[section] = {}
        for key, param in params.items():
            if parser.has_option(section, key):
                try:
                    values[section][key] = param.convert(parser[section][key])
                except ValueError as exc:
                    raise ScenarioError(f"[{section}] {key}: {exc}", lines.get((section, key)), source) from exc
                continue
            if (section, key) in family.defaults:
                value = family.defaults[(section, key)]
            elif param.default is not None:
                value = param.default
            else:
                value = GLOBAL_DEFAULTS.get((section, key))
            values[section][key] = value
            defaulted.append(f"{section}.{key}")

    if values["simulation"]["value_paths"] is None:
        values["simulation"]["value_paths"] = values["simulation"]["M"]
    if values["tasks"]["run"] is None:
        values["tasks"]["run"] = list(family.default_tasks)
    for task in values["tasks"]["run"]:
        if task not in TASKS:
            raise ScenarioError(f"unknown task {task!r}; known: {', '.join(TASKS)}", lines.get(("tasks", "run")), source)
        if task not in family.tasks:
            raise ScenarioError(
                f"task {task!r} is not available for family {family_name!r} (available: {', '.join(family.tasks)})",
                lines.get(("tasks", "run")),
                source,
            )
    for fmt in values["output"]["formats"]:
        if fmt not in ("csv", "json"):
            raise ScenarioError(f"unknown output format {fmt!r}", lines.get(("output", "formats")), source)
    c1 = values["tasks"]["chi_C1"]
    if c1 != "formula":
        try:
            float(c1)
        except ValueError:
            raise ScenarioError(f"chi_C1 must be 'formula' or a number, got {c1!r}", lines.get(("tasks", "chi_C1")), source)
    if values["simulation"]["x_min"] >= values["simulation"]["x_max"]:
        raise ScenarioError("x_min must be below x_max", lines.get(("simulation", "x_min")), source)
    try:
        _check_dt(values)
    except ScenarioError as exc:
        raise ScenarioError(str(exc), lines.get(("simulation", "dt")), source) from None
    return ScenarioFile(values, source, tuple(defaulted))


def parse_scenario(path) -> ScenarioFile:
    """Read and resolve a scenario file."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario: {exc}", None, str(path)) from exc
    return parse_scenario_text(text, str(path))
