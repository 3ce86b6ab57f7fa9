"""Run configuration: YAML loading with line-numbered validation errors."""

from __future__ import annotations

import copy
import hashlib
import json
import dataclasses
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Mapping

import yaml

from .census import AGE_LABELS, ADULT_TEEN_BRACKET, MARITAL_LABELS, is_adult
from .errors import ConfigError
from .impact import EconomicFigures
from .providers import BehaviorProfile

DEFAULT_CONFIG_NAME = "default_config.yaml"


def _positive(v):
    return v > 0 or "must be positive"


def _nonneg(v):
    return v >= 0 or "must be nonnegative"


def _unit_open(v):
    return 0 < v < 1 or "must be in (0, 1)"


def _fraction(v):
    return 0 < v <= 1 or "must be in (0, 1]"


def _at_least_one(v):
    return v >= 1 or "must be at least 1"


def _one_of(*choices):
    def check(v):
        return v in choices or f"must be one of {', '.join(choices)}"
    return check


def _fips(width):
    def check(v):
        return (len(v) == width and v.isdigit()) or f"must be a {width}-digit FIPS code"
    return check


@dataclass(frozen=True)
class Field:
    kind: str  # int | float | str | bool | map
    default: Any = None
    required: bool = False
    check: Callable | None = None
    nullable: bool = False


SCHEMA: dict[str, dict[str, Field]] = {
    "region": {
        "state_fips": Field("str", required=True, check=_fips(2)),
        "county_fips": Field("str", required=True, check=_fips(3)),
        "state_name": Field("str", required=True),
        "county_name": Field("str", required=True),
        "year": Field("int", 2023, check=_positive),
    },
    "state_context": {
        "year": Field("int", 2023, check=_positive),
        "dc_energy_mwh": Field("float", required=True, check=_positive),
    },
    "project": {
        "rated_capacity_mw": Field("float", 100.0, check=_positive),
        "capacity_factor": Field("float", 0.70, check=_fraction),
        "pue": Field("float", 1.1, check=lambda v: v >= 1 or "must be at least 1"),
        "wue_l_per_kwh": Field("float", 0.36, check=_nonneg),
        "ewif_l_per_kwh": Field("float", 3.14, check=_nonneg),
        "state_emission_factor": Field("float", required=True, check=_nonneg),
        "pollutant_intensities": Field("map", required=True),
        "economics": Field("map", {}),
    },
    "population": {
        "agent_count": Field("int", 1000, check=_at_least_one),
        "seed": Field("int", required=True, check=_nonneg),
        "max_iterations": Field("int", 10, check=_at_least_one),
        "epsilon": Field("float", 1e-9, check=_positive),
        "max_retries": Field("int", 5, check=_nonneg),
        "alpha": Field("float", 0.05, check=_unit_open),
        "marital_multipliers": Field("map", None, nullable=True),
    },
    "poll": {
        "provider": Field("str", "mock", check=_one_of("mock", "http_batch")),
        "model_name": Field("str", "mock"),
        "base_url": Field("str", None, nullable=True),
        "temperature": Field("float", None, nullable=True, check=_nonneg),
        "max_output_tokens": Field("int", None, nullable=True, check=_at_least_one),
        "max_retries": Field("int", 2, check=_nonneg),
        "batch_size": Field("int", 250, check=_at_least_one),
        "concurrency": Field("int", 4, check=_at_least_one),
        "poll_interval": Field("float", 30.0, check=_nonneg),
        "max_wait": Field("float", None, nullable=True, check=_positive),
        "submit_attempts": Field("int", 5, check=_at_least_one),
        "backoff_base": Field("float", 1.0, check=_nonneg),
        "seed": Field("int", 0, check=_nonneg),
        "mock": Field("map", {}),
    },
    "topics": {
        "enabled": Field("bool", True),
        "provider": Field("str", "mock", check=_one_of("mock", "http_batch")),
        "model_name": Field("str", "mock"),
        "max_themes": Field("int", 10, check=_at_least_one),
    },
    "calibration": {
        "alpha": Field("float", 0.1, check=_unit_open),
        "pairs_csv": Field("str", None, nullable=True),
        "grouping": Field("str", "pooled", check=_one_of("pooled", "question")),
    },
    "paths": {
        "cache_dir": Field("str", "cache"),
        "out_dir": Field("str", "out"),
        "offline": Field("bool", False),
    },
    "questionnaire": {
        "path": Field("str", None, nullable=True),
    },
}
REQUIRED_SECTIONS = ("region", "state_context", "project", "population")
ADULT_AGE_LABELS = {ADULT_TEEN_BRACKET} | {a for a in AGE_LABELS if is_adult(a)}


def _marks(node, path=()) -> dict[tuple, int]:
    """Map each key path in a composed YAML tree to its 1-based line."""
    out = {path: node.start_mark.line + 1}
    if isinstance(node, yaml.MappingNode):
        for key, value in node.value:
            sub = path + (str(key.value),)
            out[sub] = key.start_mark.line + 1
            out.update({k: v for k, v in _marks(value, sub).items() if k != sub})
    return out


def _coerce(kind: str, value):
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise TypeError("expected an integer")
        return value
    if kind == "float":
        if isinstance(value, bool):
            raise TypeError("expected a number")
        if isinstance(value, str):
            try:
                return float(value)
            except ValueError:
                raise TypeError("expected a number") from None
        if not isinstance(value, (int, float)):
            raise TypeError("expected a number")
        return float(value)
    if kind == "str":
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            raise TypeError("expected a string (quote numeric codes)")
        if not isinstance(value, str):
            raise TypeError("expected a string")
        return value
    if kind == "bool":
        if not isinstance(value, bool):
            raise TypeError("expected true or false")
        return value
    if kind == "map":
        if not isinstance(value, dict):
            raise TypeError("expected a mapping")
        return value
    raise AssertionError(kind)


@dataclass(frozen=True)
class RunConfig:
    data: Mapping[str, Mapping[str, Any]]
    source: str = "<config>"
    base_dir: Path = Path(".")

    def __getitem__(self, section: str) -> Mapping[str, Any]:
        return self.data[section]

    @property
    def agent_count(self) -> int:
        return self.data["population"]["agent_count"]

    @property
    def seed(self) -> int:
        return self.data["population"]["seed"]

    def resolve(self, value: str | None) -> Path | None:
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def cache_dir(self) -> Path:
        return self.resolve(self.data["paths"]["cache_dir"])

    @property
    def out_dir(self) -> Path:
        return self.resolve(self.data["paths"]["out_dir"])

    def canonical(self, sections=None) -> str:
        keys = sorted(self.data) if sections is None else sections
        return json.dumps({k: self.data[k] for k in keys}, sort_keys=True, separators=(",", ":"))

    def hash(self, sections=None) -> str:
        return hashlib.sha256(self.canonical(sections).encode()).hexdigest()

    def with_overrides(self, **paths) -> "RunConfig":
        data = copy.deepcopy(dict(self.data))
        for key, value in paths.items():
            if value is not None:
                data["paths"][key] = value
        return RunConfig(data, self.source, self.base_dir)


def parse_config(text: str, source: str = "<config>", base_dir: Path | None = None) -> RunConfig:
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{source}:{mark.line + 1}" if mark else source
        raise ConfigError(f"{where}: invalid YAML: {getattr(exc, 'problem', exc)}") from exc
    if node is None or not isinstance(raw, dict):
        raise ConfigError(f"{source}:1: configuration must be a mapping")
    lines = _marks(node)

    def fail(path, message):
        line = lines.get(path) or lines.get(path[:-1]) or 1
        raise ConfigError(f"{source}:{line}: {'.'.join(path)}: {message}")

    data: dict[str, dict] = {}
    for section in raw:
        if section not in SCHEMA:
            fail((str(section),), "unknown section")
    for section in REQUIRED_SECTIONS:
        if section not in raw:
            fail((section,), "required section is missing")
    for section, fields in SCHEMA.items():
        given = raw.get(section) or {}
        if not isinstance(given, dict):
            fail((section,), "expected a mapping")
        for key in given:
            if key not in fields:
                fail((section, str(key)), "unknown key")
        out = {}
        for key, f in fields.items():
            path = (section, key)
            if key not in given:
                if f.required:
                    fail(path, "required key is missing")
                out[key] = copy.deepcopy(f.default)
                continue
            value = given[key]
            if value is None:
                if not f.nullable:
                    fail(path, "must not be null")
                out[key] = None
                continue
            try:
                value = _coerce(f.kind, value)
            except TypeError as exc:
                fail(path, str(exc))
            if f.check is not None:
                verdict = f.check(value)
                if verdict is not True:
                    fail(path, f"{value!r} {verdict}")
            out[key] = value
        data[section] = out

    intensities = data["project"]["pollutant_intensities"]
    for name in ("NOx", "VOCs", "PM2.5", "SO2"):
        path = ("project", "pollutant_intensities", name)
        if name not in intensities:
            fail(path, "required pollutant is missing")
        try:
            intensities[name] = _coerce("float", intensities[name])
        except TypeError as exc:
            fail(path, str(exc))
        if intensities[name] < 0:
            fail(path, "must be nonnegative")
    for name in intensities:
        if name not in ("NOx", "VOCs", "PM2.5", "SO2"):
            fail(("project", "pollutant_intensities", str(name)), "unknown pollutant")
    multipliers = data["population"]["marital_multipliers"]
    for age, tilt in (multipliers or {}).items():
        path = ("population", "marital_multipliers", str(age))
        if str(age) not in ADULT_AGE_LABELS:
            fail(path, "not an adult age group")
        if not isinstance(tilt, dict):
            fail(path, "expected a mapping of marital status to multiplier")
        for status, factor in tilt.items():
            if status not in MARITAL_LABELS:
                fail(path + (str(status),), "unknown marital status")
            if isinstance(factor, bool) or not isinstance(factor, (int, float)) or factor < 0:
                fail(path + (str(status),), "multiplier must be a nonnegative number")
    allowed = {f.name for f in dataclasses.fields(EconomicFigures)}
    for name in data["project"]["economics"]:
        if name not in allowed:
            fail(("project", "economics", str(name)), "unknown economic figure")
    try:
        BehaviorProfile.from_dict(data["poll"]["mock"])
    except ConfigError as exc:
        fail(("poll", "mock"), str(exc))
    if data["poll"]["provider"] == "http_batch" and not data["poll"]["base_url"]:
        fail(("poll", "provider"), "http_batch needs poll.base_url")
    return RunConfig(data, source, base_dir or Path("."))


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, str(path), path.resolve().parent)


def default_config_text() -> str:
    return (resources.files("communitypoll") / "data" / DEFAULT_CONFIG_NAME).read_text(encoding="utf-8")
