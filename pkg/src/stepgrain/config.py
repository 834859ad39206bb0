"""Experiment configuration: strict TOML loading and a resolved snapshot.

Sections are ``world``, ``train``, ``eval``, ``io`` and ``seeds``. A
missing section or key takes its default. Unknown sections or keys and
wrongly typed values are errors, raised before anything touches disk.
"""
from __future__ import annotations

import sys
from dataclasses import dataclass, field, fields, replace

from .env.world import WorldConfig
from .errors import ConfigError
from .evaluation import STRATEGIES
from .optim import TrainConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

TRAIN_PRESETS = ("default", "toy", "reference")
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")
_SEEDED = ("policy_seed", "rollout_seed")


@dataclass(frozen=True)
class EvalConfig:
    strategy: str = "sequential"
    n_runs: int = 3
    greedy: bool = False
    width: int = 3
    budget: int = 24
    unsure_credit: float = 0.5

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"eval.strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        for name in ("n_runs", "width", "budget"):
            if getattr(self, name) < 1:
                raise ConfigError(f"eval.{name} must be positive")
        if not 0 <= self.unsure_credit <= 1:
            raise ConfigError("eval.unsure_credit must lie in [0, 1]")


@dataclass(frozen=True)
class IOConfig:
    output_dir: str = "runs/default"
    checkpoint_interval: int = 50
    log_level: str = "INFO"

    def __post_init__(self):
        if self.checkpoint_interval < 0:
            raise ConfigError("io.checkpoint_interval must be non-negative (0 disables)")
        if self.log_level.upper() not in LOG_LEVELS:
            raise ConfigError(f"io.log_level must be one of {LOG_LEVELS}")


@dataclass(frozen=True)
class SeedConfig:
    world: int = 0
    policy: int = 0
    rollout: int = 0
    eval: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    io: IOConfig = field(default_factory=IOConfig)
    seeds: SeedConfig = field(default_factory=SeedConfig)
    preset: str = "default"

    def train_config(self, **overrides) -> TrainConfig:
        """TrainConfig with the seeds section applied."""
        return replace(self.train, policy_seed=self.seeds.policy, rollout_seed=self.seeds.rollout, **overrides)

    def with_seeds(self, **seeds) -> "ExperimentConfig":
        unknown = set(seeds) - {f.name for f in fields(SeedConfig)}
        if unknown:
            raise ConfigError(f"unknown seed name(s): {', '.join(sorted(unknown))}")
        return replace(self, seeds=replace(self.seeds, **seeds))

    def with_output_dir(self, path: str) -> "ExperimentConfig":
        return replace(self, io=replace(self.io, output_dir=str(path)))

    def to_dict(self) -> dict:
        train = {f.name: getattr(self.train, f.name) for f in fields(TrainConfig) if f.name not in _SEEDED}
        if train["kl_target"] is None:
            del train["kl_target"]  # TOML has no null
        train["preset"] = self.preset
        return {
            "world": _plain(self.world),
            "train": train,
            "eval": _plain(self.eval),
            "io": _plain(self.io),
            "seeds": _plain(self.seeds),
        }

    def to_toml(self) -> str:
        import tomli_w

        return tomli_w.dumps(self.to_dict())


def _plain(obj) -> dict:
    return {f.name: getattr(obj, f.name) for f in fields(obj)}


def _coerce(section: str, key: str, value, default):
    kind = type(default)
    name = f"{section}.{key}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name} must be a boolean")
        return value
    if isinstance(value, bool):
        raise ConfigError(f"{name} must be a {kind.__name__}, not a boolean")
    if kind is float and isinstance(value, int):
        return float(value)
    if default is None:
        if not isinstance(value, (int, float)):
            raise ConfigError(f"{name} must be a number")
        return float(value)
    if not isinstance(value, kind):
        raise ConfigError(f"{name} must be a {kind.__name__}, got {type(value).__name__}")
    return value


def _section(raw: dict, name: str, base, exclude=()) -> dict:
    data = raw.get(name, {})
    if not isinstance(data, dict):
        raise ConfigError(f"[{name}] must be a table")
    allowed = {f.name for f in fields(base)} - set(exclude)
    out = {}
    for key, value in data.items():
        if key not in allowed:
            raise ConfigError(f"unknown key {name}.{key}")
        out[key] = _coerce(name, key, value, getattr(base, key))
    return out


def from_dict(raw: dict) -> ExperimentConfig:
    unknown = set(raw) - {"world", "train", "eval", "io", "seeds"}
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown))}")
    train_raw = dict(raw.get("train", {})) if isinstance(raw.get("train", {}), dict) else raw["train"]
    preset = "default"
    if isinstance(train_raw, dict) and "preset" in train_raw:
        preset = train_raw.pop("preset")
        if preset not in TRAIN_PRESETS:
            raise ConfigError(f"train.preset must be one of {TRAIN_PRESETS}, got {preset!r}")
    base_train = {"default": TrainConfig, "toy": TrainConfig.toy_preset, "reference": TrainConfig.reference_preset}[preset]()
    world_kw = _section(raw, "world", WorldConfig())
    train_kw = _section({"train": train_raw}, "train", base_train, exclude=_SEEDED)
    eval_kw = _section(raw, "eval", EvalConfig())
    io_kw = _section(raw, "io", IOConfig())
    seeds_kw = _section(raw, "seeds", SeedConfig())
    world = WorldConfig(**world_kw)
    world.validate()
    try:
        return ExperimentConfig(
            world=world,
            train=replace(base_train, **train_kw),
            eval=EvalConfig(**eval_kw),
            io=IOConfig(**io_kw),
            seeds=SeedConfig(**seeds_kw),
            preset=preset,
        )
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def loads(text: str) -> ExperimentConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from None
    return from_dict(raw)


def load(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return loads(text)
