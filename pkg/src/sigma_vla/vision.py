"""Cognitive vision workspace: feature projection, perceiver resampling to a
fixed token budget, state tokens, FiLM modulation by the telepathy factor
behind two log-scale gates, and a self-attention refinement stack."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor, nn

from . import numerics as nx
from .config import ModelConfig
from .errors import DimensionError, InputError
from .layers import MLP, LayerNorm, Linear, TransformerBlock, _param
from .numerics import DTYPE


@dataclass
class VisionTokens:
    base: Tensor  # [..., N_v, d_model]
    modulated: Tensor
    gamma: Tensor | None = None  # [..., d_model]
    beta: Tensor | None = None


class PerceiverResampler(nn.Module):
    """Learned queries attend once over a variable-length feature sequence."""

    def __init__(self, d: int, n_latents: int, ffn_mult: int = 2):
        super().__init__()
        self.queries = _param(n_latents, d, std=1.0)
        self.w_q = Linear(d, d, bias=False)
        self.w_k = Linear(d, d, bias=False)
        self.w_v = Linear(d, d, bias=False)
        self.ln = LayerNorm(d)
        self.ffn = MLP(d, ffn_mult * d, d)

    def forward(self, feats: Tensor, return_weights: bool = False):
        if feats.shape[-2] == 0:
            raise InputError("resampler needs at least one feature token")
        Q = self.queries
        # single head, so the scale is 1/sqrt(d)
        A = nx.attention_weights(self.w_q(Q), self.w_k(feats), heads=1)[..., 0, :, :]
        H = A @ self.w_v(feats)
        out = self.ffn(self.ln(Q + H))
        return (out, A) if return_weights else out


class FilmModulator(nn.Module):
    def __init__(self, d_tau: int, d: int, theta_tau: float = 0.0, theta_mod: float = -2.0):
        super().__init__()
        self.d_tau, self.d = d_tau, d
        self.theta_tau = nn.Parameter(torch.tensor(theta_tau, dtype=DTYPE))
        self.theta_mod = nn.Parameter(torch.tensor(theta_mod, dtype=DTYPE))
        self.fc1 = Linear(d_tau, d)
        self.fc2 = Linear(d, 2 * d, std=0.02)
        with torch.no_grad():
            self.fc2.bias[:d] = 1.0  # gamma starts near 1

    def forward(self, v_base: Tensor, tau: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        if tau.shape[-1] != self.d_tau:
            raise DimensionError(f"telepathy factor has length {tau.shape[-1]}, expected {self.d_tau}")
        tau_scaled = torch.exp(self.theta_tau) * tau
        h = nx.gelu(self.fc1(tau_scaled))
        gamma, beta = self.fc2(h).split(self.d, dim=-1)
        v_film = gamma.unsqueeze(-2) * v_base + beta.unsqueeze(-2)
        v_mod = v_base + torch.exp(self.theta_mod) * (v_film - v_base)
        return v_mod, gamma, beta


class VisionWorkspace(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_model
        self.cfg = cfg
        self.projector = MLP(cfg.d_feat, d, d)
        self.state_mlp = MLP(cfg.state_dim, d, d)
        self.expand_w = _param(cfg.n_state, d, d, std=1.0 / math.sqrt(d))
        self.expand_b = _param(cfg.n_state, d)
        self.resampler = PerceiverResampler(d, cfg.n_vision, cfg.ffn_mult)
        self.film = FilmModulator(cfg.d_tau, d, cfg.theta_tau_init, cfg.theta_mod_init)
        self.blocks = nn.ModuleList(
            TransformerBlock(d, cfg.heads, cfg.ffn_mult) for _ in range(cfg.vision_layers)
        )

    def project(self, vision_features: Tensor) -> Tensor:
        if vision_features.shape[-1] != self.cfg.d_feat:
            raise DimensionError(
                f"vision features have width {vision_features.shape[-1]}, expected d_feat={self.cfg.d_feat}"
            )
        return self.projector(vision_features)

    def encode_state(self, robot_state: Tensor) -> Tensor:
        """MLP to d_model, then one learned linear map per state token → [..., N_s, d]."""
        if robot_state.shape[-1] != self.cfg.state_dim:
            raise DimensionError(
                f"robot_state has length {robot_state.shape[-1]}, expected D_s={self.cfg.state_dim}"
            )
        h = self.state_mlp(robot_state)
        return torch.einsum("...i,sij->...sj", h, self.expand_w) + self.expand_b

    def resample(self, feats: Tensor, return_weights: bool = False):
        return self.resampler(feats, return_weights=return_weights)

    def film_modulate(self, v_base: Tensor, tau: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        return self.film(v_base, tau)

    def refine(self, v: Tensor) -> Tensor:
        for block in self.blocks:
            v = block(v)
        return v

    def forward(self, vision_features: Tensor, tau: Tensor | None = None) -> tuple[VisionTokens, Tensor]:
        """Returns the token bundle and refined vision tokens; ``tau=None`` bypasses FiLM."""
        v_base = self.resample(self.project(vision_features))
        if tau is None:
            tokens = VisionTokens(v_base, v_base)
        else:
            v_mod, gamma, beta = self.film_modulate(v_base, tau)
            tokens = VisionTokens(v_base, v_mod, gamma, beta)
        return tokens, self.refine(tokens.modulated)
