"""Run configuration: sectioned key=value files with explicit defaults.

Every field has a section, a type and either a default or is required. The
resolved configuration (all defaults filled in) is written next to each run
as ``config.cfg`` and ``config.json``.
"""

from __future__ import annotations

import configparser
import io
import json
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Callable

from .accountant import HorizontalMode
from .models import LOGISTIC, MLP
from .trainers import PUBLIC_ALGORITHMS

CONFIG_SCHEMA = "subjectdp.config/1"


class ConfigError(ValueError):
    """Invalid configuration; ``problems`` lists one message per field."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


def _positive_int(v: str) -> int:
    x = int(v)
    if x < 1:
        raise ValueError("must be >= 1")
    return x


def _nonneg_int(v: str) -> int:
    x = int(v)
    if x < 0:
        raise ValueError("must be >= 0")
    return x


def _positive_float(v: str) -> float:
    x = float(v)
    if not x > 0 or x != x or x == float("inf"):
        raise ValueError("must be a finite number > 0")
    return x


def _fraction(v: str) -> float:
    x = float(v)
    if not 0 <= x < 1:
        raise ValueError("must lie in [0, 1)")
    return x


def _open_unit(v: str) -> float:
    x = float(v)
    if not 0 < x < 1:
        raise ValueError("must lie in (0, 1)")
    return x


def _choice(*options: str) -> Callable[[str], str]:
    def parse(v: str) -> str:
        if v not in options:
            raise ValueError(f"must be one of {', '.join(options)}")
        return v

    return parse


def _int_tuple(v: str) -> tuple[int, ...]:
    v = v.strip()
    if not v:
        return ()
    out = tuple(int(x) for x in v.split(","))
    if any(x < 1 for x in out):
        raise ValueError("entries must be >= 1")
    return out


def _str(v: str) -> str:
    return v.strip()


@dataclass(frozen=True)
class _Field:
    section: str
    key: str
    parse: Callable[[str], Any]
    default: Any = None
    required: bool = False

    def format(self, value) -> str:
        if value is None:
            return ""
        if isinstance(value, tuple):
            return ",".join(str(x) for x in value)
        return str(value)


_FIELDS = [
    _Field("data", "source", _choice("synthetic", "csv"), "synthetic"),
    _Field("data", "csv_path", _str, ""),
    _Field("data", "test_csv_path", _str, ""),
    _Field("data", "subject_column", _str, ""),
    _Field("data", "label_column", _str, "label"),
    _Field("data", "feature_columns", _str, ""),
    _Field("data", "num_classes", _nonneg_int, 0),
    _Field("data", "n_subjects", _positive_int, 400),
    _Field("data", "items_per_subject", _str, "const:40"),
    _Field("data", "d_in", _positive_int, 32),
    _Field("data", "synthetic_classes", _positive_int, 10),
    _Field("data", "class_sep", _positive_float, 3.0),
    _Field("data", "subject_offset", float, 0.5),
    _Field("data", "validation_fraction", _fraction, 0.2),
    _Field("federation", "n_users", _positive_int, 16),
    _Field("federation", "partition", _choice("uniform", "power"), "power"),
    _Field("federation", "alpha", _positive_float, 8.0),
    _Field("federation", "rounds", _positive_int, required=True),
    _Field("federation", "users_per_round", _positive_int, required=True),
    _Field("federation", "horizontal_mode", _choice(*(m.value for m in HorizontalMode)),
           HorizontalMode.ROUND_REDUCTION.value),
    _Field("training", "algorithm", _choice(*(a.value for a in PUBLIC_ALGORITHMS)), required=True),
    _Field("training", "model", _choice(LOGISTIC, MLP), LOGISTIC),
    _Field("training", "hidden", _int_tuple, ()),
    _Field("training", "bias", _choice("true", "false"), "false"),
    _Field("training", "B", _positive_int, required=True),
    _Field("training", "T", _nonneg_int, required=True),
    _Field("training", "C", _positive_float, required=True),
    _Field("training", "eta", _positive_float, required=True),
    _Field("training", "subject_k", _choice("max", "mean"), "max"),
    _Field("privacy", "epsilon", _positive_float, 4.0),
    _Field("privacy", "delta", _open_unit, 1e-5),
    _Field("run", "seed", _nonneg_int, 0),
]

SECTIONS = ("data", "federation", "training", "privacy", "run")
_BY_NAME = {(f.section, f.key): f for f in _FIELDS}


@dataclass(frozen=True)
class RunConfig:
    source: str
    csv_path: str
    test_csv_path: str
    subject_column: str
    label_column: str
    feature_columns: str
    num_classes: int
    n_subjects: int
    items_per_subject: str
    d_in: int
    synthetic_classes: int
    class_sep: float
    subject_offset: float
    validation_fraction: float
    n_users: int
    partition: str
    alpha: float
    rounds: int
    users_per_round: int
    horizontal_mode: str
    algorithm: str
    model: str
    hidden: tuple[int, ...]
    bias: str
    B: int
    T: int
    C: float
    eta: float
    subject_k: str
    epsilon: float
    delta: float
    seed: int

    def to_cfg(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        for section in SECTIONS:
            cp[section] = {f.key: f.format(getattr(self, f.key))
                           for f in _FIELDS if f.section == section}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def to_json(self) -> dict:
        out: dict[str, Any] = {"schema": CONFIG_SCHEMA}
        for section in SECTIONS:
            out[section] = {
                f.key: list(v) if isinstance(v := getattr(self, f.key), tuple) else v
                for f in _FIELDS if f.section == section
            }
        return out

    def write(self, directory: Path) -> None:
        directory = Path(directory)
        (directory / "config.cfg").write_text(self.to_cfg())
        (directory / "config.json").write_text(json.dumps(self.to_json(), indent=2) + "\n")


assert [f.name for f in fields(RunConfig)] == [f.key for f in _FIELDS]


def _read(text: str, origin: str) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text, source=origin)
    except configparser.Error as exc:
        raise ConfigError([f"{origin}: {exc}"]) from exc
    return cp


def parse_override(text: str) -> tuple[str, str, str]:
    """``section.key=value`` -> (section, key, value)."""
    name, sep, value = text.partition("=")
    section, dot, key = name.strip().partition(".")
    if not sep or not dot or (section, key) not in _BY_NAME:
        raise ConfigError([f"override {text!r}: expected section.key=value with a known key"])
    return section, key, value.strip()


def resolve(text: str, overrides: list[str] = (), origin: str = "<config>") -> RunConfig:
    """Parses configuration text, applies overrides and checks every field.

    Raises:
      ConfigError: listing every invalid, unknown or missing field.
    """
    cp = _read(text, origin)
    problems = []
    for section in cp.sections():
        if section not in SECTIONS:
            problems.append(f"[{section}]: unknown section")
            continue
        for key in cp[section]:
            if (section, key) not in _BY_NAME:
                problems.append(f"{section}.{key}: unknown key")
    raw: dict[tuple[str, str], str] = {}
    for section in SECTIONS:
        if cp.has_section(section):
            for key, value in cp[section].items():
                raw[(section, key)] = value
    for ov in overrides:
        try:
            section, key, value = parse_override(ov)
        except ConfigError as exc:
            problems.extend(exc.problems)
            continue
        raw[(section, key)] = value

    values = {}
    for f in _FIELDS:
        if (f.section, f.key) not in raw:
            if f.required:
                problems.append(f"{f.section}.{f.key}: required")
            else:
                values[f.key] = f.default
            continue
        try:
            values[f.key] = f.parse(raw[(f.section, f.key)])
        except ValueError as exc:
            problems.append(f"{f.section}.{f.key}: {exc} (got {raw[(f.section, f.key)]!r})")
    if not problems:
        problems.extend(_cross_checks(values))
    if problems:
        raise ConfigError(problems)
    return RunConfig(**values)


def _cross_checks(v: dict) -> list[str]:
    problems = []
    if v["source"] == "csv":
        if not v["csv_path"]:
            problems.append("data.csv_path: required when data.source = csv")
        if not v["subject_column"]:
            problems.append("data.subject_column: required when data.source = csv")
    if v["users_per_round"] > v["n_users"]:
        problems.append("federation.users_per_round: must not exceed federation.n_users")
    if v["model"] == LOGISTIC and v["hidden"]:
        problems.append("training.hidden: only valid for model = mlp")
    return problems


def load(path, overrides: list[str] = ()) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError([f"{path}: {exc.strerror}"]) from exc
    return resolve(text, overrides, origin=str(path))


def bundled_config(name: str) -> Path:
    """Path of a configuration shipped with the package."""
    from importlib import resources

    return Path(str(resources.files("subjectdp") / "configs" / f"{name}.cfg"))
