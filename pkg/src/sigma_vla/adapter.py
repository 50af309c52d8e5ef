"""Inference-time risk gate over the telepathy residual.

Weights are never touched: the gate only rescales ``d_x`` in
``final_x = base_x + scale * d_x``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import torch
from torch import Tensor

from . import numerics as nx
from .action import ActionBundle
from .errors import ConfigurationError, ContractError

RATIO_EPS = 1e-8


@dataclass(frozen=True)
class GateConfig:
    min_scale: float = 0.0
    max_scale: float = 1.0
    kappa: float = 2.0
    r_star: float = 0.2
    tau_band: tuple[float, float] = (0.5, 4.0)  # (0.5, 4) × τ₀ with τ₀ = 1
    weights: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)

    def __post_init__(self):
        if not 0 <= self.min_scale <= self.max_scale:
            raise ConfigurationError("need 0 <= min_scale <= max_scale")
        if self.kappa <= 0:
            raise ConfigurationError("kappa must be positive")
        if self.r_star <= 0:
            raise ConfigurationError("r_star must be positive")
        lo, hi = self.tau_band
        if not 0 <= lo < hi:
            raise ConfigurationError(f"tau_band {self.tau_band} must satisfy 0 <= low < high")
        if len(self.weights) != 3 or min(self.weights) < 0:
            raise ConfigurationError("risk weights must be three non-negative numbers")
        object.__setattr__(self, "tau_band", (float(lo), float(hi)))
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))

    @classmethod
    def for_tau_0(cls, tau_0: float, **kw) -> "GateConfig":
        return cls(tau_band=(0.5 * tau_0, 4.0 * tau_0), **kw)


@dataclass
class GateDiagnostics:
    residual_ratio: Tensor
    tau_norm: Tensor
    tau_act_cos: Tensor
    risk: Tensor
    scale: Tensor

    def means(self) -> dict[str, float]:
        return {k: float(getattr(self, k).mean()) for k in ("residual_ratio", "tau_norm", "tau_act_cos", "risk", "scale")}


def _flat(bundle: ActionBundle, kind: str) -> Tensor:
    """Concatenate the three branches per sample (leading dims kept)."""
    parts = []
    for branch in ActionBundle.BRANCHES:
        t = getattr(bundle, f"{kind}_{branch}")
        lead = bundle.base_vec.shape[:-1]
        parts.append(t.reshape(*lead, -1))
    return torch.cat(parts, dim=-1)


def band_distance(x: Tensor, band: tuple[float, float]) -> Tensor:
    lo, hi = band
    return torch.clamp(lo - x, min=0.0) + torch.clamp(x - hi, min=0.0)


def compute_risk(bundle: ActionBundle, cfg: GateConfig | None = None) -> tuple[Tensor, dict[str, Tensor]]:
    """Per-sample risk and its three raw components (r1, r2, r3)."""
    cfg = cfg or GateConfig()
    c = bundle.c_act_tau if bundle.c_act_tau is not None else bundle.c_act
    if c.shape[-1] != bundle.tau.shape[-1]:
        raise ContractError("bundle carries no condition projected to the telepathy width")
    with torch.no_grad():
        r1 = nx.safe_norm(_flat(bundle, "d")) / (nx.safe_norm(_flat(bundle, "base")) + RATIO_EPS)
        r2 = nx.safe_norm(bundle.tau)
        r3 = nx.cosine(bundle.tau, c)
        lo, hi = cfg.tau_band
        w1, w2, w3 = cfg.weights
        risk = (
            w1 * torch.abs(r1 - cfg.r_star) / cfg.r_star
            + w2 * band_distance(r2, cfg.tau_band) / (hi - lo)
            + w3 * (1.0 - r3)
        )
    return risk, {"residual_ratio": r1, "tau_norm": r2, "tau_act_cos": r3}


def gate_scale(risk, cfg: GateConfig | None = None):
    """min + (max − min)·exp(−κ·risk); accepts floats or tensors."""
    cfg = cfg or GateConfig()
    span = cfg.max_scale - cfg.min_scale
    if isinstance(risk, Tensor):
        if bool((risk < 0).any()):
            raise ContractError("risk must be non-negative")
        return cfg.min_scale + span * torch.exp(-cfg.kappa * risk)
    if risk < 0:
        raise ContractError("risk must be non-negative")
    return cfg.min_scale + span * math.exp(-cfg.kappa * risk)


def rescale(bundle: ActionBundle, scale: Tensor | float) -> ActionBundle:
    """A new bundle with residuals multiplied by ``scale`` (per sample or scalar)."""
    s = torch.as_tensor(scale, dtype=nx.DTYPE)
    updates = {}
    for branch in ActionBundle.BRANCHES:
        d = bundle.residual(branch)
        extra = d.ndim - bundle.base_vec.ndim + 1  # trailing dims beyond the sample axis
        s_b = s.reshape(*s.shape, *([1] * extra)) if s.ndim else s
        final = bundle.base(branch) + s_b * d
        updates[f"final_{branch}"] = final
        updates[f"d_{branch}"] = final - bundle.base(branch)
    return replace(bundle, **updates)


def adapt(bundle: ActionBundle, cfg: GateConfig | None = None) -> tuple[ActionBundle, GateDiagnostics]:
    cfg = cfg or GateConfig()
    risk, parts = compute_risk(bundle, cfg)
    scale = gate_scale(risk, cfg)
    return rescale(bundle, scale), GateDiagnostics(risk=risk, scale=scale, **parts)
