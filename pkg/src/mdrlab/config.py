"""Flat ``key = value`` experiment configuration with presets and typed parsing."""

from __future__ import annotations

import ast
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .train import MdrSchedule, PpoConfig

MODES = ("bn", "eval", "bn-mdr", "nonorm", "dropout", "dropout-mdr")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    preset: str = "collapse-demo"
    env: str = "patchloc"
    env_overrides: dict = field(default_factory=dict)
    mode: str = "bn"
    dropout: float = 0.1
    momentum: float = 0.1
    hidden: list = field(default_factory=lambda: [64, 64])
    activation: str = "tanh"
    alpha1: int = 2
    alpha2: int = 1
    n_envs: int = 4
    rollout_size: int = 512
    steps: int = 60
    seeds: list = field(default_factory=lambda: [0])
    out: str = "runs"
    checkpoint_every: int = 0
    measure: bool = True
    # generalisation protocol (gridgame): train on level seeds [0, train_levels),
    # test on [test_level_offset, test_level_offset + test_levels)
    train_levels: int = 0
    test_levels: int = 0
    test_level_offset: int = 100000
    eval_every: int = 0
    eval_episodes: int = 20
    # PPO
    clip_eps: float = 0.2
    vf_coef: float = 1.0
    ent_coef: float = 1e-4
    minibatch_size: int = 128
    epochs: int = 3
    lr: float = 3e-4
    weight_decay: float = 1e-4
    gamma: float = 0.99
    lam: float = 0.95
    max_grad_norm: float = 1.0
    recompute_period: int = 3

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.rollout_size % self.n_envs:
            raise ConfigError("rollout_size must be a multiple of n_envs")
        if self.steps < 1:
            raise ConfigError("steps must be at least 1")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")
        try:
            self.ppo()
            self.schedule()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def steps_per_env(self) -> int:
        return self.rollout_size // self.n_envs

    def ppo(self) -> PpoConfig:
        names = {f.name for f in dataclasses.fields(PpoConfig)}
        return PpoConfig(**{k: getattr(self, k) for k in names})

    def schedule(self) -> MdrSchedule:
        if self.mode in ("bn", "nonorm", "dropout"):
            return MdrSchedule.standard(self.epochs)
        if self.mode == "eval":
            return MdrSchedule.eval_only(self.epochs)
        return MdrSchedule.split(self.epochs, self.alpha1, self.alpha2)

    def network_kwargs(self) -> dict:
        return {
            "hidden": tuple(self.hidden),
            "batchnorm": self.mode in ("bn", "eval", "bn-mdr"),
            "dropout": self.dropout if self.mode in ("dropout", "dropout-mdr") else 0.0,
            "momentum": self.momentum,
            "activation": self.activation,
        }

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


PRESETS: dict[str, dict] = {
    # reduced setting: few transitions per dataset, few epochs, four environments
    "collapse-demo": {
        "env": "patchloc", "mode": "bn", "n_envs": 4, "rollout_size": 512, "epochs": 3,
        "minibatch_size": 128, "steps": 80, "alpha1": 2, "alpha2": 1, "lr": 1e-3,
    },
    "patchloc-table": {
        "env": "patchloc", "mode": "bn-mdr", "n_envs": 4, "rollout_size": 3000, "epochs": 9,
        "minibatch_size": 128, "steps": 100, "alpha1": 2, "alpha2": 1,
    },
    "dropout-generalization": {
        "env": "gridgame", "env_overrides": {"horizon": 64}, "mode": "dropout", "dropout": 0.1,
        "n_envs": 4, "rollout_size": 512, "epochs": 3, "minibatch_size": 128, "steps": 120,
        "train_levels": 16, "test_levels": 16, "eval_every": 5, "eval_episodes": 16,
    },
}

_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
_LIST_FIELDS = {"hidden", "seeds"}


def _parse_value(key: str, raw: str):
    raw = raw.strip()
    if key.startswith("env."):
        try:
            return ast.literal_eval(raw)
        except (ValueError, SyntaxError):
            return raw
    f = _FIELDS[key]
    default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
    if key in _LIST_FIELDS:
        try:
            val = ast.literal_eval(raw)
        except (ValueError, SyntaxError) as exc:
            raise ConfigError(f"{key}: expected a list like [1, 2], got {raw!r}") from exc
        if isinstance(val, int):
            val = [val]
        if not isinstance(val, (list, tuple)) or not all(isinstance(v, int) for v in val):
            raise ConfigError(f"{key}: expected a list of integers, got {raw!r}")
        return list(val)
    if isinstance(default, bool):
        if raw.lower() in ("true", "yes", "1"):
            return True
        if raw.lower() in ("false", "no", "0"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from None
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {raw!r}") from None
    return raw.strip("\"'")


def parse_assignments(pairs: list[tuple[str, str, str]]) -> dict:
    """Typed values from ``(key, raw value, location)`` triples."""
    out: dict = {}
    env: dict = {}
    for key, raw, where in pairs:
        key = key.strip()
        if key == "mode_plan":
            key = "mode"
        if not key.startswith("env.") and key not in _FIELDS:
            raise ConfigError(f"{where}: unknown key {key!r}")
        if key == "env_overrides":
            raise ConfigError(f"{where}: use env.<name> = value for environment overrides")
        try:
            value = _parse_value(key, raw)
        except ConfigError as exc:
            raise ConfigError(f"{where}: {exc}") from None
        if key.startswith("env."):
            env[key[4:]] = value
        else:
            out[key] = value
    if env:
        out["env_overrides"] = env
    return out


def read_config_text(text: str, source: str = "<config>") -> list[tuple[str, str, str]]:
    pairs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line.strip()!r}")
        key, raw = stripped.split("=", 1)
        pairs.append((key, raw, f"{source}:{lineno}"))
    return pairs


def load_config(path: str | Path | None = None, overrides: list[str] = (), **extra) -> ExperimentConfig:
    """Preset defaults, then the config file, then ``--set`` overrides."""
    pairs = []
    if path is not None:
        path = Path(path)
        pairs += read_config_text(path.read_text(), str(path))
    for i, item in enumerate(overrides, 1):
        if "=" not in item:
            raise ConfigError(f"--set #{i}: expected key=value, got {item!r}")
        key, raw = item.split("=", 1)
        pairs.append((key, raw, f"--set #{i}"))
    values = parse_assignments(pairs)
    values.update(extra)
    preset = values.get("preset", ExperimentConfig.preset)
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; known: {sorted(PRESETS)}")
    base = dict(PRESETS[preset])
    env_over = dict(base.pop("env_overrides", {}))
    env_over.update(values.pop("env_overrides", {}))
    base.update(values)
    base["env_overrides"] = env_over
    try:
        return ExperimentConfig(**base)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    for name, value in cfg.to_dict().items():
        if name == "env_overrides":
            for k in sorted(value):
                lines.append(f"env.{k} = {value[k]!r}")
        else:
            lines.append(f"{name} = {value}")
    return "\n".join(lines) + "\n"
