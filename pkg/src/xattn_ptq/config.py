"""Run configuration: a flat JSON object whose keys are exactly the fields below."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, fields

from .reconstruct import GRANULARITIES, ReconstructionConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    d_model: int = 32
    n_heads: int = 2
    n_image_tokens: int = 64
    n_prompt_tokens: int = 8
    n_blocks: int = 2
    bits_w: int = 4
    bits_a: int = 4
    calib_samples: int = 32
    granularity: str = "joint-pair"
    steps: int = 2000
    lr_scale: float = 4e-5
    lr_alpha: float = 1e-2
    batch_size: int = 8
    round_reg: float = 0.0
    mac_enabled: bool = True
    jcar_enabled: bool = True
    qdrop_enabled: bool = False
    qdrop_prob: float = 0.5
    lambda_threshold: float = 0.1
    linear_surrogate: bool = False
    output_dir: str = "run"

    def __post_init__(self):
        counts = ("d_model", "n_heads", "n_image_tokens", "n_prompt_tokens", "n_blocks", "calib_samples",
                  "steps", "batch_size")
        for k in counts:
            if getattr(self, k) < 1:
                raise ConfigError(f"{k} must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        for k in ("bits_w", "bits_a"):
            if not 2 <= getattr(self, k) <= 16:
                raise ConfigError(f"{k} must lie in [2, 16]")
        if self.granularity not in GRANULARITIES:
            raise ConfigError(f"granularity must be one of {', '.join(GRANULARITIES)}")
        if not 0 < self.lambda_threshold <= 1:
            raise ConfigError("lambda_threshold must lie in (0, 1]")
        if not (self.lr_scale > 0 and self.lr_alpha > 0):
            raise ConfigError("learning rates must be positive")
        if not 0 <= self.qdrop_prob < 1:
            raise ConfigError("qdrop_prob must lie in [0, 1)")
        if self.round_reg < 0:
            raise ConfigError("round_reg must be non-negative")
        if not self.output_dir:
            raise ConfigError("output_dir must be non-empty")

    @property
    def effective_granularity(self) -> str:
        """Joint pairing is only used when ``jcar_enabled``; otherwise it degrades to per-module."""
        if self.granularity == "joint-pair" and not self.jcar_enabled:
            return "per-module"
        return self.granularity

    def reconstruction(self) -> ReconstructionConfig:
        return ReconstructionConfig(
            granularity=self.effective_granularity,
            steps=self.steps,
            lr_scale=self.lr_scale,
            lr_alpha=self.lr_alpha,
            batch_size=self.batch_size,
            seed=self.seed,
            bits_w=self.bits_w,
            bits_a=self.bits_a,
            drop_prob=self.qdrop_prob if self.qdrop_enabled else 0.0,
            round_reg=self.round_reg,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, value):
    kind = FIELD_TYPES[key]
    if kind == "bool":
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0", "yes", "no"):
            return value.lower() in ("true", "1", "yes")
        raise ConfigError(f"{key} expects a boolean, got {value!r}")
    if kind == "int":
        if isinstance(value, bool):
            raise ConfigError(f"{key} expects an integer, got {value!r}")
        if isinstance(value, int):
            return value
        if isinstance(value, str):
            try:
                return int(value)
            except ValueError:
                pass
        raise ConfigError(f"{key} expects an integer, got {value!r}")
    if kind == "float":
        if isinstance(value, bool):
            raise ConfigError(f"{key} expects a number, got {value!r}")
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key} expects a number, got {value!r}") from None
    if not isinstance(value, str):
        raise ConfigError(f"{key} expects a string, got {value!r}")
    return value


def from_mapping(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(data) - set(FIELD_TYPES))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return RunConfig(**{k: _coerce(k, v) for k, v in data.items()})


def load(path=None, overrides: dict | None = None) -> RunConfig:
    """Read ``path`` (optional) and apply ``overrides`` on top; both go through the same validation."""
    data: dict = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
    merged = {**data, **(overrides or {})}
    return from_mapping(merged)
