"""Model architecture configuration and (de)serialisation helpers."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .errors import ConfigurationError
from .layers import LoraSpec


@dataclass(frozen=True)
class ModelConfig:
    # data geometry
    d_feat: int = 16
    n_feat: int = 12  # N_f, visual feature tokens per frame
    state_dim: int = 6  # D_s
    action_dim: int = 6  # D_a
    horizon: int = 16  # T
    chunk: int = 8  # C
    # widths and token budgets
    d_model: int = 32
    d_tau: int = 8
    heads: int = 4
    n_vision: int = 8  # N_v
    n_state: int = 4  # N_s
    n_text: int = 8  # N_t
    n_factors: int = 4  # K
    n_queries: int = 8  # N_q
    vision_layers: int = 1
    lm_layers: int = 2
    ffn_mult: int = 2
    # adaptation and gates
    lora_rank: int = 16
    lora_alpha: float = 16.0
    lora_dropout: float = 0.05
    theta_tau_init: float = 0.0
    theta_mod_init: float = -2.0
    theta_lm_init: float = -2.0
    # action workspace
    denoise_steps: int = 8
    noise_seed: int = 0
    fusion_weights: tuple[float, float, float] = (0.5, 0.25, 0.25)
    joint_limit: float = math.pi
    text_projection_seed: int = 1234

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ConfigurationError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if self.chunk > self.horizon:
            raise ConfigurationError("chunk length C cannot exceed horizon T")
        if self.denoise_steps < 1:
            raise ConfigurationError("denoise_steps must be >= 1")
        if abs(sum(self.fusion_weights) - 1.0) > 1e-9 or min(self.fusion_weights) < 0:
            raise ConfigurationError(f"fusion weights {self.fusion_weights} must be a convex combination")

    @property
    def lora(self) -> LoraSpec:
        return LoraSpec(self.lora_rank, self.lora_alpha, self.lora_dropout)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["fusion_weights"] = list(self.fusion_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {sorted(unknown)}")
        d = dict(d)
        if "fusion_weights" in d:
            d["fusion_weights"] = tuple(d["fusion_weights"])
        return cls(**d)


def tiny_config(**overrides) -> ModelConfig:
    """A very small architecture for gradient checks and fast tests."""
    base = dict(
        d_feat=4, n_feat=3, state_dim=3, action_dim=2, horizon=4, chunk=2,
        d_model=8, d_tau=4, heads=2, n_vision=2, n_state=2, n_text=3,
        n_factors=2, n_queries=2, lora_rank=2, lora_alpha=4.0, denoise_steps=2,
    )
    base.update(overrides)
    return ModelConfig(**base)


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_json(path: str | Path, obj: Any) -> None:
    Path(path).write_text(canonical_json(obj), encoding="utf-8")


def read_json(path: str | Path) -> Any:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def dataclass_from_dict(cls, d: dict[str, Any] | None):
    """Build a flat dataclass from a dict, rejecting unknown keys; tuples restored from lists."""
    if d is None:
        return cls()
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(d) - set(fields)
    if unknown:
        raise ConfigurationError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
    return cls(**kwargs)


def dataclass_to_dict(obj) -> dict[str, Any]:
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


__all__ = [
    "ModelConfig",
    "tiny_config",
    "canonical_json",
    "write_json",
    "read_json",
    "dataclass_from_dict",
    "dataclass_to_dict",
]
