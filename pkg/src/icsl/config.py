"""Training configuration and its flat ``key = value`` text form.

Nested sections are addressed with dotted keys (``sir.epsilon``,
``model.channels``).  Resolution order, lowest first: built-in defaults,
named profile, config file, explicit overrides.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

from .data import AugmentConfig
from .errors import ConfigError
from .featstats import SirConfig
from .model import ModelConfig

CONFIG_SCHEMA = 1
PROFILE_ENV = "ICSL_PROFILE"


@dataclass
class TrainConfig:
    phase1_epochs: int = 40
    phase2_epochs: int = 80
    learning_rate: float = 1e-3
    batch_size: int = 16
    lambda_adv: float = 0.2
    seed: int = 0
    lr_schedule: str = "constant"  # constant | poly
    poly_power: float = 0.9
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    weight_decay: float = 0.0
    reset_optimizer: bool = True
    adv_mode: str = "grl"  # grl | alternating
    consist_mode: str = "rms"  # rms | l2-sum | mse
    disable_sir: bool = False
    disable_consist: bool = False
    disable_adv: bool = False
    image_size: int = 384
    val_every: int = 5
    checkpoint_every: int = 0
    deterministic: bool = True
    threads: int = 0
    sir: SirConfig = field(default_factory=SirConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def validate(self) -> "TrainConfig":
        if self.phase1_epochs < 0 or self.phase2_epochs < 0:
            raise ConfigError("epoch counts must be >= 0")
        if self.lambda_adv < 0:
            raise ConfigError(f"lambda_adv must be >= 0, got {self.lambda_adv}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.lr_schedule not in ("constant", "poly"):
            raise ConfigError(f"lr_schedule must be 'constant' or 'poly', got {self.lr_schedule!r}")
        if self.adv_mode not in ("grl", "alternating"):
            raise ConfigError(f"adv_mode must be 'grl' or 'alternating', got {self.adv_mode!r}")
        if self.consist_mode not in ("rms", "l2-sum", "mse"):
            raise ConfigError(f"consist_mode must be rms, l2-sum or mse, got {self.consist_mode!r}")
        self.sir.validate()
        self.model.validate()
        return self

    def ablate(self, *components: str) -> "TrainConfig":
        """Copy with components (``sir``, ``consist``/``icl``, ``adv``/``sal``) switched off."""
        alias = {"sir": "disable_sir", "consist": "disable_consist", "icl": "disable_consist",
                 "adv": "disable_adv", "sal": "disable_adv"}
        changes = {}
        for c in components:
            if c not in alias:
                raise ConfigError(f"unknown ablation {c!r}; choose from sir, consist, adv")
            changes[alias[c]] = True
        return dataclasses.replace(self, **changes)


PROFILES: Dict[str, Dict[str, Any]] = {
    "paper": {},
    "desk": {
        "phase1_epochs": 10,
        "phase2_epochs": 20,
        "batch_size": 8,
        "image_size": 96,
    },
}


def to_flat(cfg, prefix: str = "") -> Dict[str, Any]:
    out = {}
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        key = prefix + f.name
        if dataclasses.is_dataclass(value):
            out.update(to_flat(value, key + "."))
        else:
            out[key] = value
    return out


def _coerce(key: str, raw: Any, default: Any) -> Any:
    if not isinstance(raw, str):
        if isinstance(default, tuple) and isinstance(raw, (list, tuple)):
            return tuple(raw)
        return raw
    text = raw.strip()
    try:
        if isinstance(default, bool):
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            elem = type(default[0]) if default else float
            return tuple(elem(v) for v in text.strip("()[]").split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {type(default).__name__}") from None
    return text


def apply_flat(cfg: TrainConfig, values: Mapping[str, Any]) -> TrainConfig:
    """Return a copy of ``cfg`` with dotted-key overrides applied."""
    flat = to_flat(cfg)
    unknown = sorted(set(values) - set(flat))
    if unknown:
        raise ConfigError(f"unknown config keys {unknown}; valid keys: {sorted(flat)}")
    for key, raw in values.items():
        flat[key] = _coerce(key, raw, flat[key])
    return from_flat(flat)


def from_flat(flat: Mapping[str, Any]) -> TrainConfig:
    def build(cls, prefix):
        kwargs = {}
        for f in dataclasses.fields(cls):
            key = prefix + f.name
            default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
            if dataclasses.is_dataclass(default):
                kwargs[f.name] = build(type(default), key + ".")
            elif key in flat:
                kwargs[f.name] = _coerce(key, flat[key], default)
        return cls(**kwargs)

    return build(TrainConfig, "")


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, str]:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key == "schema":
            if int(value) != CONFIG_SCHEMA:
                raise ConfigError(f"{source}: unsupported config schema {value}")
            continue
        values[key] = value
    return values


def format_config(cfg: TrainConfig) -> str:
    lines = [f"schema = {CONFIG_SCHEMA}"]
    for key, value in to_flat(cfg).items():
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def resolve_config(profile: Optional[str] = None, config_file=None,
                   overrides: Optional[Mapping[str, Any]] = None) -> TrainConfig:
    """defaults < profile < config file < overrides."""
    profile = profile or os.environ.get(PROFILE_ENV) or "paper"
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    cfg = apply_flat(TrainConfig(), PROFILES[profile])
    if config_file is not None:
        path = Path(config_file)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        cfg = apply_flat(cfg, parse_config_text(path.read_text(), str(path)))
    if overrides:
        cfg = apply_flat(cfg, overrides)
    return cfg.validate()
