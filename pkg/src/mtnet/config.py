"""Model and optimization hyperparameters, with JSON loading."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    pass


ATTENTION_MODES = ("concat", "weighted")
ARCHITECTURES = ("mtn", "transformer")


@dataclass
class ModelConfig:
    """All architecture and optimization settings.

    Defaults are the full-scale values (d=512, d_f=1024, 8 heads, 4000
    warmup steps). ``L`` is the query-level (level 1) encoder depth;
    ``L_levels`` holds the depths of the masked encoders at levels 2..K, so
    ``K == 1 + len(L_levels)``. For ``architecture == "transformer"`` the
    encoder runs over the concatenated session and ``L_levels`` is unused.
    """

    d: int = 512
    d_f: int = 1024
    d_emb: int = 300
    P: int = 8
    L: int = 3
    L_dec: int = 3
    L_levels: list = field(default_factory=lambda: [2])
    level_widths: list = field(default_factory=list)
    vocab_size: int = 0
    dropout: float = 0.1
    label_smoothing: float = 0.05
    warmup_steps: int = 4000
    lr_scale: float = 1.0
    grad_clip: float = 0.0
    max_query_len: int = 10
    max_session_len: int = 5
    attention_mode: str = "concat"
    architecture: str = "mtn"
    ln_eps: float = 1e-5
    batch_size: int = 64
    epochs: int = 5
    seed: int = 0

    @property
    def K(self) -> int:
        return 1 + len(self.L_levels)

    @property
    def d_p(self) -> int:
        return self.d // self.P

    def validate(self) -> "ModelConfig":
        if self.P < 1 or self.d % self.P:
            raise ConfigError(f"d={self.d} is not divisible by P={self.P}")
        if self.d_f <= self.d:
            raise ConfigError(f"d_f={self.d_f} must exceed d={self.d}")
        if self.d % 2:
            raise ConfigError(f"d={self.d} must be even for sinusoidal encodings")
        for key in ("d", "d_emb", "L", "L_dec", "max_query_len", "max_session_len", "batch_size", "epochs"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1, got {getattr(self, key)}")
        if self.warmup_steps < 1:
            raise ConfigError("warmup_steps must be >= 1")
        if self.vocab_size < 0:
            raise ConfigError("vocab_size must be >= 0")
        if not self.L_levels or any((not isinstance(v, int)) or v < 0 for v in self.L_levels):
            raise ConfigError(f"L_levels must be a non-empty list of non-negative ints, got {self.L_levels}")
        if len(self.level_widths) not in (0, len(self.L_levels) - 1):
            raise ConfigError(f"level_widths needs {len(self.L_levels) - 1} entries for K={self.K}")
        for key in ("dropout", "label_smoothing"):
            v = getattr(self, key)
            if not 0.0 <= v < 1.0:
                raise ConfigError(f"{key} must lie in [0, 1), got {v}")
        if self.attention_mode not in ATTENTION_MODES:
            raise ConfigError(f"attention_mode must be one of {ATTENTION_MODES}")
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"architecture must be one of {ARCHITECTURES}")
        if self.lr_scale < 0 or self.grad_clip < 0 or self.ln_eps <= 0:
            raise ConfigError("lr_scale and grad_clip must be >= 0, ln_eps > 0")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict, base: "ModelConfig | None" = None) -> "ModelConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        defaults = dataclasses.asdict(base if base is not None else cls())
        types = {f.name: f for f in dataclasses.fields(cls)}
        for key, value in raw.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            defaults[key] = _coerce(key, value, type(defaults[key]))
        return cls(**defaults).validate()


def _coerce(key: str, value: Any, kind: type) -> Any:
    if kind is bool or isinstance(value, bool):
        raise ConfigError(f"config key {key!r}: booleans are not accepted")
    if kind is int:
        if not isinstance(value, int):
            raise ConfigError(f"config key {key!r} expects an integer, got {value!r}")
        return value
    if kind is float:
        if not isinstance(value, (int, float)):
            raise ConfigError(f"config key {key!r} expects a number, got {value!r}")
        return float(value)
    if kind is str:
        if not isinstance(value, str):
            raise ConfigError(f"config key {key!r} expects a string, got {value!r}")
        return value
    if kind is list:
        if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"config key {key!r} expects a list of integers, got {value!r}")
        return list(value)
    raise ConfigError(f"config key {key!r} has unsupported type")  # pragma: no cover


def desk_profile() -> ModelConfig:
    """Small configuration with the full-scale layer ratios, trainable on one CPU core."""
    return ModelConfig(d=32, d_f=64, d_emb=32, P=4, L=2, L_dec=2, L_levels=[2],
                       dropout=0.1, label_smoothing=0.0, warmup_steps=50,
                       lr_scale=0.2, max_query_len=10, batch_size=16, epochs=5)


PROFILES = {"full": ModelConfig, "desk": desk_profile}


def load_config(path, profile: str = "full") -> ModelConfig:
    """Read a JSON config; unknown keys are rejected, missing keys use defaults."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise FileNotFoundError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(raw, profile)


def config_from_dict(raw: dict, profile: str = "full") -> ModelConfig:
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}")
    return ModelConfig.from_dict(raw, base=PROFILES[profile]())
