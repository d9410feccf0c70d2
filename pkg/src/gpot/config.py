"""Run configuration: nested dataclasses serialized to versioned JSON."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path

from gpot.divfree import BOUNDARY_MODES
from gpot.eulerreg import DEFAULT_DT, EulerPenaltyConfig
from gpot.graddesk import FitConfig
from gpot.toydata import NAMES

SCHEMA_VERSION = 1
BASE_KINDS = ("coupling", "synthetic", "identity")


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    name: str = "eight_gaussians"
    n_train: int = 12000
    n_test: int = 4000
    seed: int = 0


@dataclass
class BaseConfig:
    kind: str = "coupling"
    n_layers: int = 8
    hidden: int = 64
    inverse_available: bool = True
    epochs: int = 60
    batch_size: int = 500
    lr: float = 1e-3
    seed: int = 0


@dataclass
class GpConfig:
    mode: str = "forward"
    hidden: list = field(default_factory=lambda: [15, 15])
    n_steps: int = 15
    t_final: float = 1.0
    boundary: str = "cube"
    init_scale: float = 0.01


@dataclass
class EulerConfig:
    lambda0: float = 0.0
    decay_period: int = 200
    n_decays: int = 5
    decay_factor: float = 2.0
    dt: float = DEFAULT_DT
    probes_per_point: int = 1


@dataclass
class OptimConfig:
    lr: float = 1e-2
    epochs: int = 100
    batch_size: int = 1000
    buffer_size: int = 2000
    monitor_size: int = 1000
    monitor_every: int = 10
    checkpoint_every: int = 0
    seed: int = 0


@dataclass
class EvalConfig:
    n_eval: int = 2000
    seed: int = 0
    n_trajectories: int = 200


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    base: BaseConfig = field(default_factory=BaseConfig)
    gp: GpConfig = field(default_factory=GpConfig)
    euler: EulerConfig = field(default_factory=EulerConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output_dir: str = "runs/default"
    version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json() + "\n")
        return path


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be an object")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown keys in {where or 'config'}: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        default = getattr(cls(), name)
        if is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{where}.{name}".lstrip("."))
        else:
            kwargs[name] = value
    return cls(**kwargs)


def from_dict(data: dict) -> RunConfig:
    version = data.get("version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"config schema version {version!r} is not supported (expected {SCHEMA_VERSION})")
    cfg = _build(RunConfig, data, "")
    validate(cfg)
    return cfg


def load(path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} does not exist") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return from_dict(data)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: RunConfig, assignments) -> RunConfig:
    """Apply ``section.key=value`` strings (values parsed as JSON when possible)."""
    data = cfg.to_dict()
    for item in assignments or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        path, raw = item.split("=", 1)
        keys = path.strip().split(".")
        node = data
        for k in keys[:-1]:
            if not isinstance(node.get(k), dict):
                raise ConfigError(f"unknown config section {path!r}")
            node = node[k]
        if keys[-1] not in node:
            raise ConfigError(f"unknown config key {path!r}")
        node[keys[-1]] = _parse_value(raw)
    return from_dict(data)


def _positive(section, obj, *names):
    for name in names:
        value = getattr(obj, name)
        if not isinstance(value, (int, float)) or isinstance(value, bool) or value <= 0:
            raise ConfigError(f"{section}.{name} must be a positive number, got {value!r}")


def validate(cfg: RunConfig) -> None:
    """Shape and range checks that must pass before any computation starts."""
    if cfg.data.name not in NAMES:
        raise ConfigError(f"unknown dataset {cfg.data.name!r}; choose from {NAMES}")
    _positive("data", cfg.data, "n_train", "n_test")
    if cfg.base.kind not in BASE_KINDS:
        raise ConfigError(f"unknown base kind {cfg.base.kind!r}; choose from {BASE_KINDS}")
    _positive("base", cfg.base, "n_layers", "hidden", "batch_size", "lr")
    if cfg.base.epochs < 0:
        raise ConfigError("base.epochs must be non-negative")
    if cfg.gp.mode not in ("forward", "backward"):
        raise ConfigError(f"gp.mode must be 'forward' or 'backward', got {cfg.gp.mode!r}")
    if cfg.gp.boundary not in BOUNDARY_MODES:
        raise ConfigError(f"gp.boundary must be one of {BOUNDARY_MODES}")
    if not isinstance(cfg.gp.hidden, (list, tuple)) or not cfg.gp.hidden or any(
        not isinstance(h, int) or h < 1 for h in cfg.gp.hidden
    ):
        raise ConfigError(f"gp.hidden must be a non-empty list of positive widths, got {cfg.gp.hidden!r}")
    _positive("gp", cfg.gp, "n_steps", "t_final")
    if cfg.gp.mode == "backward" and not cfg.base.inverse_available:
        raise ConfigError("backward mode needs a base flow with an inverse (base.inverse_available is false)")
    if cfg.euler.lambda0 < 0:
        raise ConfigError("euler.lambda0 must be non-negative")
    _positive("euler", cfg.euler, "decay_period", "dt", "probes_per_point", "decay_factor")
    _positive("optim", cfg.optim, "lr", "batch_size", "buffer_size", "monitor_size", "monitor_every")
    if cfg.optim.epochs < 0:
        raise ConfigError("optim.epochs must be non-negative")
    _positive("eval", cfg.eval, "n_eval")
    if cfg.eval.n_eval > 4096:
        raise ConfigError("eval.n_eval is capped at 4096 (exact assignment size)")


def euler_config(cfg: RunConfig) -> EulerPenaltyConfig:
    e = cfg.euler
    return EulerPenaltyConfig(e.lambda0, e.dt, e.probes_per_point, e.decay_factor, e.decay_period, e.n_decays)


def fit_config(cfg: RunConfig) -> FitConfig:
    return FitConfig(
        mode=cfg.gp.mode,
        hidden=tuple(cfg.gp.hidden),
        n_steps=cfg.gp.n_steps,
        t_final=cfg.gp.t_final,
        boundary=cfg.gp.boundary,
        epochs=cfg.optim.epochs,
        batch_size=cfg.optim.batch_size,
        buffer_size=cfg.optim.buffer_size,
        lr=cfg.optim.lr,
        euler=euler_config(cfg),
        seed=cfg.optim.seed,
        init_scale=cfg.gp.init_scale,
        monitor_size=cfg.optim.monitor_size,
        monitor_every=cfg.optim.monitor_every,
    )


def with_output(cfg: RunConfig, output_dir) -> RunConfig:
    return replace(cfg, output_dir=str(output_dir))
