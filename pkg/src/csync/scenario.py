"""Scenario files: a versioned YAML schema with strict key checking."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, List, Optional

import yaml

from .engine import RadioConfig
from .gtsp import GtspConfig
from .protocol import ProtocolConfig
from .resilience import FaultKind, FaultSpec
from .topology import KINDS

SCENARIO_VERSION = 1


class ConfigError(ValueError):
    """Raised with a field path (and line when known) for bad scenario input."""


@dataclass
class ClockConfig:
    ppm_max: float = 40.0
    dco_min: float = 0.9
    dco_max: float = 1.1

    def __post_init__(self):
        if self.ppm_max < 0 or not 0.8 <= self.dco_min <= self.dco_max <= 1.2:
            raise ValueError("clock parameters out of range")


@dataclass
class TopologyConfig:
    kind: str = "dense"
    n: Optional[int] = None
    seed: Optional[int] = None
    file: Optional[str] = None

    def __post_init__(self):
        if self.kind == "file":
            if not self.file:
                raise ValueError("kind 'file' needs a file path")
        elif self.kind not in KINDS:
            raise ValueError(f"unknown kind {self.kind!r}")


@dataclass
class FaultConfig:
    target: int
    kind: str
    start_us: float = 0.0
    end_us: Optional[float] = None
    magnitude: float = 0.0

    def to_spec(self) -> FaultSpec:
        return FaultSpec(self.target, FaultKind(self.kind), self.start_us,
                         float("inf") if self.end_us is None else self.end_us, self.magnitude)

    def __post_init__(self):
        self.to_spec()


@dataclass
class OutputConfig:
    dir: str = "out"
    trace_level: str = "events"

    def __post_init__(self):
        if self.trace_level is False:  # YAML reads a bare `off` as a boolean
            self.trace_level = "off"
        if self.trace_level not in ("off", "events", "full"):
            raise ValueError(f"unknown trace level {self.trace_level!r}")


@dataclass
class Scenario:
    name: str = "scenario"
    protocol: str = "csync"
    topology: TopologyConfig = field(default_factory=TopologyConfig)
    duration_us: float = 200e6
    seed: int = 1
    boot_spread_us: float = 50e3
    sample_period_us: float = 1e6
    gtsp_warmup_us: float = 120e6
    protocol_config: ProtocolConfig = field(default_factory=ProtocolConfig)
    gtsp_config: GtspConfig = field(default_factory=GtspConfig)
    radio: RadioConfig = field(default_factory=RadioConfig)
    clock: ClockConfig = field(default_factory=ClockConfig)
    faults: List[FaultConfig] = field(default_factory=list)
    output: OutputConfig = field(default_factory=OutputConfig)
    base_dir: Optional[str] = field(default=None, compare=False)

    def __post_init__(self):
        if self.protocol not in ("csync", "gtsp"):
            raise ValueError(f"unknown protocol {self.protocol!r}")
        if self.duration_us <= 0 or self.sample_period_us <= 0:
            raise ValueError("duration and sample period must be positive")
        if self.protocol == "csync":
            pc = self.protocol_config
            cycle = 4 * pc.st_interval + pc.convergence_len + pc.round_len
            if self.duration_us < cycle:
                raise ValueError(f"duration_us shorter than one consensus cycle ({cycle:.0f} us)")

    def topology_path(self) -> Optional[Path]:
        if self.topology.kind != "file":
            return None
        p = Path(self.topology.file)
        if not p.is_absolute() and self.base_dir:
            p = Path(self.base_dir) / p
        return p


_NESTED = {"topology": TopologyConfig, "protocol_config": ProtocolConfig, "gtsp_config": GtspConfig,
           "radio": RadioConfig, "clock": ClockConfig, "output": OutputConfig}
_SKIP = {"base_dir"}


def _fields(cls) -> dict:
    return {f.name: f for f in dataclasses.fields(cls) if f.name not in _SKIP}


def _build(cls, data: Any, path: str, lines: dict):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or '<root>'}: expected a mapping{_line(lines, path)}")
    known = _fields(cls)
    for key in data:
        if key not in known:
            where = f"{path}.{key}" if path else key
            raise ConfigError(f"{where}: unknown key{_line(lines, where)}")
    kwargs = {}
    for key, value in data.items():
        where = f"{path}.{key}" if path else key
        if key in _NESTED and cls is Scenario:
            kwargs[key] = _build(_NESTED[key], value or {}, where, lines)
        elif key == "faults" and cls is Scenario:
            if not isinstance(value, list):
                raise ConfigError(f"faults: expected a list{_line(lines, where)}")
            kwargs[key] = [_build(FaultConfig, v, f"faults.{i}", lines) for i, v in enumerate(value)]
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or '<root>'}: {exc}{_line(lines, path)}") from None


def _line(lines: dict, path: str) -> str:
    return f" (line {lines[path]})" if path in lines else ""


def _key_lines(text: str) -> dict:
    """Map dotted key paths to 1-based source lines."""
    out = {}
    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return out

    def walk(node, prefix):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                p = f"{prefix}.{k.value}" if prefix else str(k.value)
                out[p] = k.start_mark.line + 1
                walk(v, p)
        elif isinstance(node, yaml.SequenceNode):
            for i, v in enumerate(node.value):
                p = f"{prefix}.{i}"
                out[p] = v.start_mark.line + 1
                walk(v, p)

    walk(root, "")
    return out


def scenario_from_dict(data: dict, lines: Optional[dict] = None, base_dir: Optional[str] = None) -> Scenario:
    lines = lines or {}
    if not isinstance(data, dict):
        raise ConfigError("scenario must be a mapping")
    data = dict(data)
    version = data.pop("csync_scenario", None)
    if version != SCENARIO_VERSION:
        raise ConfigError(f"missing or unsupported header 'csync_scenario: {SCENARIO_VERSION}'"
                          f" (got {version!r})")
    s = _build(Scenario, data, "", lines)
    s.base_dir = base_dir
    return s


def loads(text: str, base_dir: Optional[str] = None) -> Scenario:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ConfigError(f"YAML syntax error{where}: {getattr(exc, 'problem', exc)}") from None
    return scenario_from_dict(data, _key_lines(text), base_dir)


def load(path) -> Scenario:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"scenario file {path} not found")
    s = loads(path.read_text(encoding="utf-8"), base_dir=str(path.parent))
    tp = s.topology_path()
    if tp is not None and not tp.exists():
        raise ConfigError(f"topology.file: {tp} not found")
    return s


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return {k: _plain(getattr(obj, k)) for k in _fields(type(obj))}
    if isinstance(obj, list):
        return [_plain(v) for v in obj]
    return obj


def to_dict(s: Scenario) -> dict:
    return {"csync_scenario": SCENARIO_VERSION, **_plain(s)}


def dumps(s: Scenario) -> str:
    return yaml.safe_dump(to_dict(s), sort_keys=False)


def apply_overrides(s: Scenario, overrides: List[str]) -> Scenario:
    """Apply ``a.b.c=value`` overrides; values are parsed as YAML scalars."""
    data = to_dict(s)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like path=value")
        path, raw = item.split("=", 1)
        keys = path.strip().split(".")
        cur = data
        for k in keys[:-1]:
            if isinstance(cur, list):
                k = int(k)
            elif k not in cur:
                raise ConfigError(f"{path}: unknown key")
            cur = cur[k]
        last = keys[-1]
        if isinstance(cur, dict) and last not in cur:
            # optional fields may legitimately be absent only if declared
            raise ConfigError(f"{path}: unknown key")
        value = yaml.safe_load(raw)
        if isinstance(cur, list):
            cur[int(last)] = value
        else:
            cur[last] = value
    return scenario_from_dict(data, base_dir=s.base_dir)
