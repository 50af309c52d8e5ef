"""Action trajectory workspace: condition projector, query generator, the
vector / chunk / trajectory branches, the telepathy residual head, and
fusion into clamped motor commands."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

import torch
from torch import Tensor, nn

from .config import ModelConfig
from .errors import ConfigurationError
from .layers import MLP, Attention, LayerNorm, Linear, TransformerBlock, _param
from .numerics import DTYPE


@dataclass
class ActionBundle:
    base_vec: Tensor  # [..., D_a]
    base_chunk: Tensor  # [..., C, D_a]
    base_traj: Tensor  # [..., T, D_a]
    d_vec: Tensor
    d_chunk: Tensor
    d_traj: Tensor
    final_vec: Tensor
    final_chunk: Tensor
    final_traj: Tensor
    c_act: Tensor  # [..., d_model]
    tau: Tensor  # [..., d_t]
    c_act_tau: Tensor | None = None  # c_act projected to d_t, for τ/condition cosines

    BRANCHES = ("vec", "chunk", "traj")

    def base(self, branch: str) -> Tensor:
        return getattr(self, f"base_{branch}")

    def residual(self, branch: str) -> Tensor:
        return getattr(self, f"d_{branch}")

    def final(self, branch: str) -> Tensor:
        return getattr(self, f"final_{branch}")

    def detach(self) -> "ActionBundle":
        return replace(self, **{
            f.name: getattr(self, f.name).detach()
            for f in fields(self) if isinstance(getattr(self, f.name), Tensor)
        })

    def index(self, i: int) -> "ActionBundle":
        """Single sample from a batched bundle."""
        return replace(self, **{
            f.name: getattr(self, f.name)[i]
            for f in fields(self) if isinstance(getattr(self, f.name), Tensor)
        })


@dataclass
class MotorCommand:
    u: Tensor  # fused control representation [..., D_a]
    m: Tensor  # clamped motor command


def compose(base: dict[str, Tensor], residual: dict[str, Tensor] | None, c_act: Tensor, tau: Tensor,
            c_act_tau: Tensor | None = None) -> ActionBundle:
    """final = base + residual per branch; ``residual=None`` means telepathy off."""
    if residual is None:
        residual = {k: torch.zeros_like(v) for k, v in base.items()}
        final = {k: v for k, v in base.items()}
    else:
        final = {k: base[k] + residual[k] for k in base}
        # keep the realised residual so that final − base == d holds bit-exactly
        residual = {k: final[k] - base[k] for k in base}
    return ActionBundle(
        base["vec"], base["chunk"], base["traj"],
        residual["vec"], residual["chunk"], residual["traj"],
        final["vec"], final["chunk"], final["traj"],
        c_act, tau, c_act_tau,
    )


def fuse_and_drive(
    final_vec: Tensor,
    final_chunk: Tensor,
    final_traj: Tensor,
    weights: tuple[float, float, float] = (0.5, 0.25, 0.25),
    joint_limit: float = torch.pi,
) -> MotorCommand:
    """Convex re-weighting of each branch's first-step action, clamped to the joint box."""
    if abs(sum(weights) - 1.0) > 1e-9 or min(weights) < 0:
        raise ConfigurationError(f"fusion weights {tuple(weights)} are not a convex combination")
    w_v, w_c, w_t = weights
    u = w_v * final_vec + w_c * final_chunk[..., 0, :] + w_t * final_traj[..., 0, :]
    return MotorCommand(u, torch.clamp(u, -joint_limit, joint_limit))


class ActionWorkspace(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d, dt = cfg.d_model, cfg.d_tau
        T, C, A = cfg.horizon, cfg.chunk, cfg.action_dim
        self.cfg = cfg
        self.condition = MLP(d + dt, d, d)
        self.query_seeds = _param(cfg.n_queries, d, std=1.0)
        self.state_proj = Linear(d, d, bias=False)
        self.query_attn = Attention(d, cfg.heads)
        self.query_bias = Linear(d, d)
        self.query_refine = TransformerBlock(d, cfg.heads, cfg.ffn_mult)
        self.query_ln = LayerNorm(d)
        self.vec_head = Linear(d, A)
        self.chunk_head = Linear(d, C * A)
        self.denoiser = MLP(T * A + 1 + 3 * d, 2 * d, T * A, out_std=0.1 / (2 * d) ** 0.5)
        # telepathy side
        self.residual = MLP(d + dt, 2 * d, A + C * A + T * A, out_std=0.0)
        self.tau_align = Linear(d, dt, bias=False)

    def project_condition(self, n_high: Tensor, tau: Tensor | None = None) -> Tensor:
        if tau is None:
            tau = torch.zeros(*n_high.shape[:-1], self.cfg.d_tau, dtype=DTYPE)
        return self.condition(torch.cat([n_high, tau], dim=-1))

    def generate_queries(self, c_act: Tensor, state_tokens: Tensor) -> Tensor:
        s_proj = self.state_proj(state_tokens)
        q1 = self.query_attn(self.query_seeds, s_proj) + self.query_bias(c_act).unsqueeze(-2)
        return self.query_ln(self.query_refine(q1))

    def head_vector(self, q: Tensor) -> Tensor:
        return self.vec_head(q.mean(dim=-2))

    def head_chunk(self, q: Tensor) -> Tensor:
        out = self.chunk_head(q.mean(dim=-2))
        return out.reshape(*out.shape[:-1], self.cfg.chunk, self.cfg.action_dim)

    def denoise_trajectory(self, q: Tensor, n_high: Tensor, c_act: Tensor, steps: int | None = None,
                           seed: int | None = None) -> Tensor:
        """Deterministic K-step refinement x_{k+1} = x_k + Net(x_k, k, cond) from seeded noise."""
        cfg = self.cfg
        steps = cfg.denoise_steps if steps is None else steps
        if steps < 1:
            raise ConfigurationError("denoise steps must be >= 1")
        seed = cfg.noise_seed if seed is None else seed
        gen = torch.Generator().manual_seed(seed)
        noise = torch.randn(cfg.horizon * cfg.action_dim, generator=gen, dtype=DTYPE)
        cond = torch.cat([q.mean(dim=-2), n_high, c_act], dim=-1)
        x = noise.expand(*cond.shape[:-1], noise.shape[0])
        for k in range(steps):
            step = torch.full((*cond.shape[:-1], 1), k / steps, dtype=DTYPE)
            x = x + self.denoiser(torch.cat([x, step, cond], dim=-1))
        return x.reshape(*x.shape[:-1], cfg.horizon, cfg.action_dim)

    def residual_head(self, n_high: Tensor, tau: Tensor) -> dict[str, Tensor]:
        cfg = self.cfg
        A, C, T = cfg.action_dim, cfg.chunk, cfg.horizon
        out = self.residual(torch.cat([n_high, tau], dim=-1))
        d_vec, d_chunk, d_traj = out.split([A, C * A, T * A], dim=-1)
        lead = out.shape[:-1]
        return {"vec": d_vec, "chunk": d_chunk.reshape(*lead, C, A), "traj": d_traj.reshape(*lead, T, A)}

    def base_actions(self, n_high_base: Tensor, state_tokens: Tensor, seed: int | None = None):
        """The three baseline branches, conditioned on c_act^base = P_act(n_high, 0)."""
        c_base = self.project_condition(n_high_base)
        q = self.generate_queries(c_base, state_tokens)
        base = {
            "vec": self.head_vector(q),
            "chunk": self.head_chunk(q),
            "traj": self.denoise_trajectory(q, n_high_base, c_base, seed=seed),
        }
        return base, c_base

    def drive(self, bundle: ActionBundle) -> MotorCommand:
        return fuse_and_drive(bundle.final_vec, bundle.final_chunk, bundle.final_traj,
                              self.cfg.fusion_weights, self.cfg.joint_limit)
