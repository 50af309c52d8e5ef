"""Parameterised building blocks over :mod:`sigma_vla.numerics`.

Weights follow the ``x @ W + b`` convention (W is ``[in, out]``). Construction
draws from the global torch RNG, so seed it before building a model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from . import numerics as nx
from .errors import ConfigurationError
from .numerics import DTYPE


def _param(*shape: int, std: float = 0.0, fill: float = 0.0) -> nn.Parameter:
    if std > 0:
        t = torch.randn(*shape, dtype=DTYPE) * std
    else:
        t = torch.full(shape, fill, dtype=DTYPE)
    return nn.Parameter(t)


class Linear(nn.Module):
    def __init__(self, d_in: int, d_out: int, bias: bool = True, std: float | None = None):
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        std = 1.0 / math.sqrt(d_in) if std is None else std
        self.weight = _param(d_in, d_out, std=std)
        self.bias = _param(d_out) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return nx.affine(x, self.weight, self.bias)


class LayerNorm(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.gain = _param(d, fill=1.0)
        self.bias = _param(d)

    def forward(self, x: Tensor) -> Tensor:
        return nx.layer_norm(x, self.gain, self.bias)


class MLP(nn.Module):
    """Two affine layers with GELU between them."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, out_std: float | None = None):
        super().__init__()
        self.fc1 = Linear(d_in, d_hidden)
        self.fc2 = Linear(d_hidden, d_out, std=out_std)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(nx.gelu(self.fc1(x)))


@dataclass(frozen=True)
class LoraSpec:
    rank: int = 16
    alpha: float = 16.0
    dropout: float = 0.05


def lora_apply(
    x: Tensor,
    W_base: Tensor,
    A: Tensor,
    B: Tensor,
    alpha: float,
    r: int,
    b_base: Tensor | None = None,
    dropout: float = 0.0,
    training: bool = False,
) -> Tensor:
    """y = x·W_base (+ b) + (alpha / r)·drop(x)·A·B.

    Dropout only touches the low-rank path; W_base is read through a detached
    view so it never receives gradient.
    """
    if r < 1:
        raise ConfigurationError(f"LoRA rank must be >= 1, got {r}")
    k, n = W_base.shape
    if r > min(k, n):
        raise ConfigurationError(f"LoRA rank {r} exceeds min({k}, {n})")
    if A.shape != (k, r) or B.shape != (r, n):
        raise ConfigurationError(
            f"LoRA factor shapes A{tuple(A.shape)} B{tuple(B.shape)} do not fit W{(k, n)} with r={r}"
        )
    base = nx.affine(x, W_base.detach(), None if b_base is None else b_base.detach())
    low = F.dropout(x, p=dropout, training=training) if dropout > 0 else x
    return base + (alpha / r) * ((low @ A) @ B)


class LoRALinear(nn.Module):
    """Frozen affine map plus a trainable low-rank update (B starts at zero)."""

    def __init__(self, d_in: int, d_out: int, spec: LoraSpec, bias: bool = True):
        super().__init__()
        if spec.rank > min(d_in, d_out) or spec.rank < 1:
            raise ConfigurationError(f"LoRA rank {spec.rank} invalid for a {d_in}x{d_out} map")
        self.base = Linear(d_in, d_out, bias=bias)
        self.base.requires_grad_(False)
        self.spec = spec
        self.lora_A = _param(d_in, spec.rank, std=1.0 / math.sqrt(d_in))
        self.lora_B = _param(spec.rank, d_out)

    def forward(self, x: Tensor) -> Tensor:
        return lora_apply(
            x,
            self.base.weight,
            self.lora_A,
            self.lora_B,
            self.spec.alpha,
            self.spec.rank,
            b_base=self.base.bias,
            dropout=self.spec.dropout,
            training=self.training,
        )


def _linear(d_in: int, d_out: int, lora: LoraSpec | None, bias: bool = True) -> nn.Module:
    return Linear(d_in, d_out, bias=bias) if lora is None else LoRALinear(d_in, d_out, lora, bias=bias)


class Attention(nn.Module):
    """Multi-head attention with q/k/v projections and an optional output map."""

    def __init__(self, d: int, heads: int, out_proj: bool = True, lora: LoraSpec | None = None):
        super().__init__()
        if d % heads != 0:
            raise ConfigurationError(f"width {d} is not divisible by heads={heads}")
        self.heads = heads
        self.q_proj = _linear(d, d, lora)
        self.k_proj = _linear(d, d, lora)
        self.v_proj = _linear(d, d, lora)
        self.o_proj = _linear(d, d, lora) if out_proj else None

    def forward(self, xq: Tensor, xkv: Tensor, return_weights: bool = False):
        return nx.cross_attention(
            self.q_proj(xq),
            self.k_proj(xkv),
            self.v_proj(xkv),
            self.heads,
            out_proj=self.o_proj,
            return_weights=return_weights,
        )


class TransformerBlock(nn.Module):
    """Pre-norm self-attention + FFN, both with residual connections."""

    def __init__(self, d: int, heads: int, ffn_mult: int = 2, lora: LoraSpec | None = None):
        super().__init__()
        self.ln1 = LayerNorm(d)
        self.attn = Attention(d, heads, lora=lora)
        self.ln2 = LayerNorm(d)
        self.ffn = MLP(d, ffn_mult * d, d)

    def forward(self, x: Tensor) -> Tensor:
        h = self.ln1(x)
        x = x + self.attn(h, h)
        return x + self.ffn(self.ln2(x))
