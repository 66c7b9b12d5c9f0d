"""Run configuration: nested dataclasses, YAML files and dotted-name overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, get_type_hints

import yaml

from . import boat
from .actor import ActorConfig
from .conformal import CalibrationConfig
from .critics import CriticConfig
from .flow import FlowConfig
from .nn import ConfigError


@dataclass
class EnvConfig:
    dt: float = boat.DT
    horizon: int = boat.HORIZON
    n_traj: int = boat.N_TRAJ
    seed: int = 0

    def validate(self):
        if not self.dt > 0:
            raise ConfigError(f"env.dt must be positive, got {self.dt}")
        if self.horizon < 1 or self.n_traj < 1:
            raise ConfigError("env.horizon and env.n_traj must be >= 1")


@dataclass
class EvalConfig:
    n_episodes: int = 500
    rejection_n: tuple[int, ...] = (1, 4, 16)
    bench_calls: int = 10_000
    seed: int = 4

    def validate(self):
        if self.n_episodes < 1:
            raise ConfigError("eval.n_episodes must be >= 1")
        if not self.rejection_n or min(self.rejection_n) < 1:
            raise ConfigError("eval.rejection_n must list positive candidate counts")
        if self.bench_calls < 1:
            raise ConfigError("eval.bench_calls must be >= 1")


@dataclass
class OracleConfig:
    resolution: tuple[int, int] = (100, 100)
    n_directions: int = 16
    tol: float = 1e-6
    band: float = 0.1
    n_probes: int = 2000
    seed: int = 5

    def validate(self):
        if len(self.resolution) != 2 or min(self.resolution) < 2:
            raise ConfigError("oracle.resolution needs two sizes >= 2")
        if self.n_directions < 1 or self.n_probes < 1:
            raise ConfigError("oracle.n_directions and oracle.n_probes must be >= 1")
        if not self.tol > 0 or self.band < 0:
            raise ConfigError("oracle.tol must be positive and oracle.band non-negative")


@dataclass
class RunConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    critics: CriticConfig = field(default_factory=CriticConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)
    actor: ActorConfig = field(default_factory=ActorConfig)
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    oracle: OracleConfig = field(default_factory=OracleConfig)

    SECTIONS = ("env", "critics", "flow", "actor", "calibration", "eval", "oracle")
    # per-section offsets applied by ``with_seed``
    SEED_OFFSETS = {"env": 0, "critics": 0, "flow": 1, "actor": 2, "calibration": 3, "eval": 4,
                    "oracle": 5}

    def validate(self) -> RunConfig:
        try:
            for name in self.SECTIONS:
                section = getattr(self, name)
                if hasattr(section, "validate"):
                    section.validate()
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        if self.flow.k_steps < 1:
            raise ConfigError("flow.k_steps must be >= 1")
        for name in ("critics", "flow", "actor"):
            sec = getattr(self, name)
            if not sec.hidden or min(sec.hidden) < 1:
                raise ConfigError(f"{name}.hidden needs positive widths")
            if not sec.lr > 0 or sec.batch_size < 1 or sec.steps < 0:
                raise ConfigError(f"{name}: lr must be positive, batch_size >= 1, steps >= 0")
        return self

    def with_seed(self, seed: int) -> RunConfig:
        for name, off in self.SEED_OFFSETS.items():
            getattr(self, name).seed = seed + off
        return self

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def save(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def desk_config() -> RunConfig:
    """Reduced networks and step counts that finish on one CPU core in well under an hour."""
    cfg = RunConfig()
    cfg.env.n_traj = 250
    cfg.critics.hidden = (128, 128)
    cfg.critics.steps = 100_000
    cfg.flow.hidden = (64, 64, 64)
    cfg.flow.steps = 10_000
    cfg.actor.hidden = (64, 64, 64)
    cfg.actor.steps = 10_000
    return cfg


PRESETS = {"paper": RunConfig, "desk": desk_config}


def _coerce(value: Any, hint, key: str):
    origin = getattr(hint, "__origin__", None)
    try:
        if origin is tuple:
            if isinstance(value, str):
                value = [v for v in value.replace("(", "").replace(")", "").split(",") if v.strip()]
            args = [a for a in hint.__args__ if a is not Ellipsis]
            return tuple(_coerce(v, args[0], key) for v in value)
        if hint is bool:
            if isinstance(value, str):
                if value.lower() in ("1", "true", "yes", "on"):
                    return True
                if value.lower() in ("0", "false", "no", "off"):
                    return False
                raise ValueError(value)
            return bool(value)
        if hint is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(float(value)) if isinstance(value, str) and "e" in value.lower() else int(value)
        if hint is float:
            return float(value)
        if hint is str:
            return str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: cannot interpret {value!r} as {hint}") from exc
    return value


def field_hints(cfg: RunConfig) -> dict[str, Any]:
    """Map each dotted key (``critics.steps``) to its declared type."""
    out = {}
    for name in RunConfig.SECTIONS:
        section = getattr(cfg, name)
        hints = get_type_hints(type(section))
        for f in dataclasses.fields(section):
            out[f"{name}.{f.name}"] = hints[f.name]
    return out


def set_key(cfg: RunConfig, key: str, value: Any) -> None:
    hints = field_hints(cfg)
    if key not in hints:
        raise ConfigError(f"unknown config key {key!r}")
    section, name = key.split(".", 1)
    setattr(getattr(cfg, section), name, _coerce(value, hints[key], key))


def apply_mapping(cfg: RunConfig, data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a mapping")
    for key, value in data.items():
        if isinstance(value, dict) and key in RunConfig.SECTIONS:
            for sub, v in value.items():
                set_key(cfg, f"{key}.{sub}", v)
        elif key == "preset":
            continue
        else:
            set_key(cfg, key, value)
    return cfg


def load_config(path=None, overrides: dict[str, Any] | None = None,
                seed: int | None = None, preset: str | None = None) -> RunConfig:
    """Preset defaults, then the YAML file, then the seed, then per-key overrides.

    The preset comes from ``preset`` when given, else from the file's ``preset`` key,
    else "paper".
    """
    data = {}
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if preset is None:
        preset = data.get("preset", "paper") if isinstance(data, dict) else "paper"
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    cfg = PRESETS[preset]()
    apply_mapping(cfg, data)
    if seed is not None:
        cfg.with_seed(seed)
    for key, value in (overrides or {}).items():
        set_key(cfg, key, value)
    return cfg.validate()
