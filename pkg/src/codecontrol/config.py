"""Experiment configuration: one YAML file per experiment, unknown keys rejected."""

from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass, field
import hashlib
import json
import math
from pathlib import Path
import typing

import yaml

from .errors import ConfigError


@dataclass
class SystemConfig:
    kind: str = "ou"
    gamma: float = 1.0
    eta: float = 0.6
    b: float = 0.2
    omega: typing.Optional[float] = None
    channels: int = 1
    noise_convention: str = "intensity"


@dataclass
class CostConfig:
    q: typing.List[float] = field(default_factory=lambda: [0.1])
    r: typing.List[float] = field(default_factory=lambda: [0.1])
    q_T: typing.List[float] = field(default_factory=lambda: [0.001])
    T: float = 2.0


@dataclass
class GridConfig:
    min: float = 0.05
    max: float = 5.0
    num: int = 32
    spacing: str = "log"


@dataclass
class CodecConfig:
    family: str = "width"
    phi: float = 0.1
    delta_theta: float = 0.05
    p: float = 1.0
    zeta: float = math.pi / 4
    grid: GridConfig = field(default_factory=GridConfig)


@dataclass
class SimulationConfig:
    dt: float = 1e-3
    n_samples: int = 4096
    method: str = "mc"
    sigma0_scale: float = 10.0
    mmse_samples: int = 1024
    mmse_burn_in: float = 5.0
    mmse_window: float = 10.0
    episodes: int = 1
    common_random_numbers: bool = True
    bootstrap: int = 1000


@dataclass
class KalmanConfig:
    g: typing.Optional[float] = None
    F: typing.Optional[typing.List[typing.List[float]]] = None
    G: typing.Optional[typing.List[typing.List[float]]] = None


@dataclass
class MIConfig:
    mode: str = "time"
    times: typing.Optional[typing.List[float]] = None


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    seed: int = 0
    system: SystemConfig = field(default_factory=SystemConfig)
    cost: CostConfig = field(default_factory=CostConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    simulation: SimulationConfig = field(default_factory=SimulationConfig)
    kalman: KalmanConfig = field(default_factory=KalmanConfig)
    mi: MIConfig = field(default_factory=MIConfig)

    def to_dict(self):
        return dataclasses.asdict(self)

    def canonical_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def config_hash(self):
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    def to_yaml(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def replace(self, **changes):
        """Copy with dotted-path overrides, e.g. ``replace(**{"codec.p": 0.5})``."""
        data = self.to_dict()
        for path, value in changes.items():
            node = data
            *parents, leaf = path.split(".")
            for key in parents:
                node = node[key]
            if leaf not in node:
                raise ConfigError(f"unknown configuration key {path!r}")
            node[leaf] = value
        return from_dict(data)

    def validate(self):
        s, c, k, sim = self.system, self.cost, self.codec, self.simulation
        if s.kind not in ("ou", "oscillator"):
            raise ConfigError("system.kind must be 'ou' or 'oscillator'")
        if s.kind == "oscillator" and s.omega is None:
            raise ConfigError("system.omega is required for the oscillator")
        if s.channels not in (1, 2):
            raise ConfigError("system.channels must be 1 or 2")
        if s.noise_convention not in ("intensity", "squared"):
            raise ConfigError("system.noise_convention must be 'intensity' or 'squared'")
        for name in ("q", "r", "q_T"):
            if len(getattr(c, name)) != s.channels:
                raise ConfigError(f"cost.{name} needs one entry per channel ({s.channels})")
        if not c.T > 0:
            raise ConfigError("cost.T must be positive")
        if k.family not in ("width", "anisotropy"):
            raise ConfigError("codec.family must be 'width' or 'anisotropy'")
        if k.family == "anisotropy" and s.channels != 2:
            raise ConfigError("the anisotropy family needs a two-channel system")
        if not k.p > 0 or k.phi < 0 or not k.delta_theta > 0:
            raise ConfigError("codec needs p > 0, phi >= 0, delta_theta > 0")
        if not 0 < k.zeta < math.pi / 2:
            raise ConfigError("codec.zeta must lie in (0, pi/2)")
        g = k.grid
        if g.num < 1 or g.spacing not in ("log", "linear") or g.max < g.min or (g.num > 1 and g.max == g.min):
            raise ConfigError("codec.grid must be nonempty and strictly increasing (spacing log|linear)")
        if k.family == "width" and g.min <= 0:
            raise ConfigError("tuning widths on the grid must be positive")
        if k.family == "anisotropy" and not (0 < g.min and g.max < math.pi / 2):
            raise ConfigError("zeta grid must lie inside (0, pi/2)")
        if g.spacing == "log" and g.min <= 0:
            raise ConfigError("log-spaced grid needs a positive minimum")
        if not sim.dt > 0 or sim.n_samples < 2 or sim.mmse_samples < 2 or sim.episodes < 1:
            raise ConfigError("simulation needs dt > 0, at least two samples and one episode")
        if sim.method not in ("mc", "meanfield"):
            raise ConfigError("simulation.method must be 'mc' or 'meanfield'")
        if not sim.sigma0_scale >= 0:
            raise ConfigError("simulation.sigma0_scale must be non-negative")
        if self.mi.mode not in ("time", "grid"):
            raise ConfigError("mi.mode must be 'time' or 'grid'")
        if (self.kalman.F is None) != (self.kalman.G is None):
            raise ConfigError("kalman.F and kalman.G must be given together")
        n = round(c.T / sim.dt)
        if abs(n * sim.dt - c.T) > 1e-9 * max(1.0, c.T):
            raise ConfigError("simulation.dt must divide cost.T")
        return self


PRESETS = {
    "fig1a": {
        "name": "fig1a",
        "system": {"kind": "ou", "gamma": 1.0, "eta": 0.6, "b": 0.2, "channels": 1},
        "cost": {"q": [0.1], "r": [0.1], "q_T": [0.001], "T": 2.0},
        "codec": {"family": "width", "phi": 0.1, "delta_theta": 0.05, "p": 1.0,
                  "grid": {"min": 0.05, "max": 5.0, "num": 32, "spacing": "log"}},
        "simulation": {"dt": 1e-3},
    },
    "fig1b": {
        "name": "fig1b",
        "system": {"kind": "oscillator", "gamma": 0.4, "omega": 0.8, "eta": 0.4, "b": 1.0, "channels": 1},
        "cost": {"q": [0.4], "r": [0.4], "q_T": [0.0], "T": 5.0},
        "codec": {"family": "width", "phi": 0.5, "delta_theta": 0.1, "p": 1.0,
                  "grid": {"min": 0.05, "max": 5.0, "num": 32, "spacing": "log"}},
        "simulation": {"dt": 1e-3},
    },
    "fig2-ou": {
        "name": "fig2-ou",
        "system": {"kind": "ou", "gamma": 1.0, "eta": 0.6, "b": 0.2, "channels": 2},
        "cost": {"q": [1.0, 0.25], "r": [0.4, 0.4], "q_T": [0.0, 0.0], "T": 5.0},
        "codec": {"family": "anisotropy", "phi": 0.5, "delta_theta": 0.1, "p": 1.0,
                  "grid": {"min": 0.05, "max": math.pi / 2 - 0.05, "num": 31, "spacing": "linear"}},
        "simulation": {"dt": 2.5e-4, "n_samples": 1024, "mmse_samples": 256,
                       "mmse_burn_in": 1.0, "mmse_window": 4.0},
    },
    "fig2-osc": {
        "name": "fig2-osc",
        "system": {"kind": "oscillator", "gamma": 0.4, "omega": 0.8, "eta": 0.4, "b": 1.0, "channels": 2},
        "cost": {"q": [1.0, 0.25], "r": [0.4, 0.4], "q_T": [0.0, 0.0], "T": 5.0},
        "codec": {"family": "anisotropy", "phi": 0.5, "delta_theta": 0.1, "p": 1.0,
                  "grid": {"min": 0.05, "max": math.pi / 2 - 0.05, "num": 31, "spacing": "linear"}},
        "simulation": {"dt": 2.5e-4, "n_samples": 1024, "mmse_samples": 256,
                       "mmse_burn_in": 1.0, "mmse_window": 4.0},
    },
}


def _coerce(tp, value, path):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)][0]
        return _coerce(inner, value, path)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{path or 'config'} must be a mapping")
        return _build(tp, value, path)
    if origin in (list, typing.List):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path} must be a list")
        return [_coerce(args[0], v, f"{path}[{i}]") for i, v in enumerate(value)]
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path} must be true or false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path} must be an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path} must be a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path} must be a string")
        return value
    raise ConfigError(f"unsupported field type at {path}")


def _build(cls, data, path=""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        where = f" in {path}" if path else ""
        raise ConfigError(f"unknown configuration key(s){where}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        kwargs[name] = _coerce(hints[name], value, f"{path}.{name}" if path else name)
    return cls(**kwargs)


def _merge(base, override):
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def from_dict(data):
    """Build and validate a config; a top-level ``preset`` key seeds the defaults."""
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a mapping")
    data = dict(data)
    preset = data.pop("preset", None)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        data = _merge(PRESETS[preset], data)
    return _build(ExperimentConfig, data).validate()


def preset(name, **overrides):
    cfg = from_dict({"preset": name})
    return cfg.replace(**overrides) if overrides else cfg


CONFIG_HEADER_PREFIX = "# config: "


def load_config(path):
    """Read a YAML config, or recover one from a result table's header."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for line in text.splitlines():
        if line.startswith(CONFIG_HEADER_PREFIX):
            return from_dict(json.loads(line[len(CONFIG_HEADER_PREFIX):]))
        if not line.startswith("#"):
            break
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    return from_dict(data)
