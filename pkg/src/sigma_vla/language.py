"""Language-intent workspace.

A small transformer stands in for the multimodal backbone. On top of its
hidden sequence sit the telepathy heads: semantic factor readout, gated
semantic memory, three summary heads, the intent head, the telepathy
projector and the language modulator that yields ``high_level_rep``.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

import torch
from torch import Tensor, nn

from . import numerics as nx
from .config import ModelConfig
from .errors import DimensionError
from .layers import MLP, Attention, Linear, TransformerBlock, _param
from .numerics import DTYPE
from .vocab import Vocabulary


@dataclass
class HiddenSequence:
    tokens: Tensor  # [..., N_t + N_v + N_s, d_model]
    segments: tuple[int, int, int]  # (text, vision, state) lengths

    def segment(self, i: int) -> Tensor:
        start = sum(self.segments[:i])
        return self.tokens[..., start:start + self.segments[i], :]


@dataclass
class TelepathyState:
    tau: Tensor
    m: Tensor
    z_intent: Tensor
    c_env: Tensor
    c_beh: Tensor
    c_text: Tensor
    z_sem: Tensor
    z_pool: Tensor
    gate: Tensor | None = None  # λ from the memory update

    def index(self, i: int) -> "TelepathyState":
        return replace(self, **{
            f.name: getattr(self, f.name)[i]
            for f in fields(self) if isinstance(getattr(self, f.name), Tensor)
        })


class TextEncoder(nn.Module):
    """One-hot words through a fixed, seeded projection to d_model."""

    def __init__(self, vocab: Vocabulary, d: int, n_text: int, seed: int):
        super().__init__()
        self.vocab = vocab
        self.n_text = n_text
        gen = torch.Generator().manual_seed(seed)
        proj = torch.randn(len(vocab), d, generator=gen, dtype=DTYPE)
        self.register_buffer("projection", proj)

    def one_hot(self, commands: list[str]) -> Tensor:
        ids = torch.tensor([self.vocab.encode(c, self.n_text) for c in commands])
        return nn.functional.one_hot(ids, len(self.vocab)).to(DTYPE)

    def forward(self, commands: str | list[str]) -> Tensor:
        single = isinstance(commands, str)
        out = self.one_hot([commands] if single else list(commands)) @ self.projection
        return out[0] if single else out


class AttentionPool(nn.Module):
    """One learned query pooled over tokens, followed by a linear map."""

    def __init__(self, d: int):
        super().__init__()
        self.query = _param(d, std=1.0)
        self.key = Linear(d, d, bias=False)
        self.out = Linear(d, d)
        self.scale = d ** -0.5

    def forward(self, tokens: Tensor, return_weights: bool = False):
        w = nx.softmax_rows((self.key(tokens) @ self.query) * self.scale)
        pooled = (w.unsqueeze(-1) * tokens).sum(dim=-2)
        out = self.out(pooled)
        return (out, w) if return_weights else out


class LanguageWorkspace(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d, dt = cfg.d_model, cfg.d_tau
        self.cfg = cfg
        # backbone side
        self.segment_emb = _param(3, d, std=0.02)
        self.blocks = nn.ModuleList(
            TransformerBlock(d, cfg.heads, cfg.ffn_mult, lora=cfg.lora) for _ in range(cfg.lm_layers)
        )
        self.high_out = Linear(d, d)
        # telepathy heads
        self.sem_queries = _param(cfg.n_factors, d, std=1.0)
        self.sem_attn = Attention(d, cfg.heads, out_proj=False)
        self.mem_u = Linear(d, d)
        self.mem_gate = Linear(2 * d, d)
        self.sum_env = AttentionPool(d)
        self.sum_beh = AttentionPool(d)
        self.sum_text = AttentionPool(d)
        self.intent = MLP(3 * d, d, d)
        self.tele_proj = MLP(6 * d, 2 * d, dt, out_std=0.01)
        self.mod_w = Linear(dt, d, bias=False)
        self.theta_lm = nn.Parameter(torch.tensor(cfg.theta_lm_init, dtype=DTYPE))
        self.gate_ch = _param(d)

    def backbone_forward(self, text_tokens: Tensor, vision_tokens: Tensor, state_tokens: Tensor) -> HiddenSequence:
        d = self.cfg.d_model
        for name, t in (("text", text_tokens), ("vision", vision_tokens), ("state", state_tokens)):
            if t.shape[-1] != d:
                raise DimensionError(f"{name} tokens have width {t.shape[-1]}, expected d_model={d}")
        parts = [text_tokens, vision_tokens, state_tokens]
        lead = torch.broadcast_shapes(*(p.shape[:-2] for p in parts))
        parts = [(p + self.segment_emb[i]).expand(*lead, *p.shape[-2:]) for i, p in enumerate(parts)]
        x = torch.cat(parts, dim=-2)
        for block in self.blocks:
            x = block(x)
        return HiddenSequence(x, tuple(p.shape[-2] for p in parts))

    def read_semantic_factors(self, hidden: HiddenSequence, return_weights: bool = False):
        return self.sem_attn(self.sem_queries, hidden.tokens, return_weights=return_weights)

    def update_memory(self, m_prev: Tensor, z_pool: Tensor) -> tuple[Tensor, Tensor]:
        u = nx.gelu(self.mem_u(z_pool))
        lam = nx.sigmoid(self.mem_gate(torch.cat([m_prev, z_pool], dim=-1)))
        return lam * m_prev + (1.0 - lam) * u, lam

    def summarize(self, hidden: HiddenSequence) -> tuple[Tensor, Tensor, Tensor]:
        c_env = self.sum_env(hidden.tokens)
        c_beh = self.sum_beh(hidden.tokens)
        c_text = self.sum_text(hidden.segment(0))
        return c_env, c_beh, c_text

    def infer_intent(self, m_t: Tensor, c_env: Tensor, c_beh: Tensor) -> Tensor:
        return self.intent(torch.cat([m_t, c_env, c_beh], dim=-1))

    def project_telepathy(self, m_t, z_intent, c_env, c_beh, z_pool, c_text) -> Tensor:
        # concatenation order is part of the contract
        x = torch.cat([m_t, z_intent, c_env, c_beh, z_pool, c_text], dim=-1)
        return self.tele_proj(x)

    def high_level(self, hidden: HiddenSequence) -> Tensor:
        """Unmodulated high_level_rep (the baseline path)."""
        return self.high_out(hidden.tokens.mean(dim=-2))

    def modulate_language(self, hidden: HiddenSequence, tau: Tensor) -> Tensor:
        bias = self.mod_w(tau)
        shift = torch.exp(self.theta_lm) * (nx.sigmoid(self.gate_ch) * bias)
        return self.high_out((hidden.tokens + shift.unsqueeze(-2)).mean(dim=-2))

    def think(self, hidden: HiddenSequence, m_prev: Tensor) -> TelepathyState:
        z_sem = self.read_semantic_factors(hidden)
        z_pool = z_sem.mean(dim=-2)
        m_t, lam = self.update_memory(m_prev, z_pool)
        c_env, c_beh, c_text = self.summarize(hidden)
        z_intent = self.infer_intent(m_t, c_env, c_beh)
        tau = self.project_telepathy(m_t, z_intent, c_env, c_beh, z_pool, c_text)
        return TelepathyState(tau, m_t, z_intent, c_env, c_beh, c_text, z_sem, z_pool, lam)
