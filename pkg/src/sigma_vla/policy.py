"""The full Sigma policy: vision → language → action with a telepathy switch.

Pass 1 runs the unmodulated visual path, the backbone and the telepathy heads
(producing τ and the memory update) and always computes the baseline action
branches from the unmodulated ``high_level_rep``. Pass 2 runs only with
telepathy on: FiLM-modulated vision, a second backbone pass, the τ-modulated
``high_level_rep`` and the residual head.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import torch
from torch import Tensor, nn

from . import tensorio
from .action import ActionBundle, ActionWorkspace, compose
from .config import ModelConfig
from .errors import LoadError
from .language import LanguageWorkspace, TelepathyState, TextEncoder
from .numerics import DTYPE
from .shards import WindowSample
from .vision import VisionTokens, VisionWorkspace
from .vocab import Vocabulary

TELEPATHY_PREFIXES = (
    "vision.film.",
    "language.sem_",
    "language.mem_",
    "language.sum_",
    "language.intent.",
    "language.tele_proj.",
    "language.mod_w.",
    "language.theta_lm",
    "language.gate_ch",
    "action.residual.",
    "action.tau_align.",
)
HEADS_FILE = "sigma_telepathy_heads.tensors"
LORA_FILE = "sigma_lora.tensors"


@dataclass
class PolicyBatch:
    vision: Tensor  # [B, N_f, d_feat], current frame
    state: Tensor  # [B, D_s], current robot state
    texts: list[str]
    target_vec: Tensor  # [B, D_a]
    target_chunk: Tensor  # [B, C, D_a]
    target_traj: Tensor  # [B, T, D_a]
    episode_index: list[int]

    def __len__(self) -> int:
        return len(self.texts)

    @property
    def targets(self) -> dict[str, Tensor]:
        return {"vec": self.target_vec, "chunk": self.target_chunk, "traj": self.target_traj}


def collate(samples: Sequence[WindowSample]) -> PolicyBatch:
    """Stack windows; the policy observes the window's first frame and state."""
    return PolicyBatch(
        vision=torch.stack([s.vision_inputs[0] for s in samples]),
        state=torch.stack([s.robot_state[0] for s in samples]),
        texts=[s.text for s in samples],
        target_vec=torch.stack([s.gt_action_vector for s in samples]),
        target_chunk=torch.stack([s.gt_action_chunk for s in samples]),
        target_traj=torch.stack([s.gt_action_trajectory for s in samples]),
        episode_index=[s.episode_index for s in samples],
    )


@dataclass
class PolicyOutput:
    bundle: ActionBundle
    state: TelepathyState  # always from pass 1
    m_t: Tensor
    n_high_base: Tensor
    n_high: Tensor
    text_pool: Tensor  # mean text embedding
    fused_pool: Tensor  # text + vision pooled
    vision: VisionTokens


class SigmaPolicy(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None, vocab: Vocabulary | None = None):
        super().__init__()
        self.cfg = cfg = cfg or ModelConfig()
        self.vocab = vocab or Vocabulary.default()
        self.text = TextEncoder(self.vocab, cfg.d_model, cfg.n_text, cfg.text_projection_seed)
        self.vision = VisionWorkspace(cfg)
        self.language = LanguageWorkspace(cfg)
        self.action = ActionWorkspace(cfg)

    def initial_memory(self, batch_size: int) -> Tensor:
        return torch.zeros(batch_size, self.cfg.d_model, dtype=DTYPE)

    def forward_policy(
        self,
        batch: PolicyBatch,
        m_prev: Tensor | None = None,
        telepathy_on: bool = True,
        seed: int | None = None,
    ) -> PolicyOutput:
        if m_prev is None:
            m_prev = self.initial_memory(len(batch))
        feats = self.vision.project(batch.vision)
        v_base = self.vision.resample(feats)
        vis1 = self.vision.refine(v_base)
        s_tok = self.vision.encode_state(batch.state)
        t_tok = self.text(batch.texts)
        hidden1 = self.language.backbone_forward(t_tok, vis1, s_tok)
        n_high_base = self.language.high_level(hidden1)
        state = self.language.think(hidden1, m_prev)
        tau = state.tau

        base, c_base = self.action.base_actions(n_high_base, s_tok, seed=seed)

        if telepathy_on:
            v_mod, gamma, beta = self.vision.film_modulate(v_base, tau)
            tokens = VisionTokens(v_base, v_mod, gamma, beta)
            hidden2 = self.language.backbone_forward(t_tok, self.vision.refine(v_mod), s_tok)
            n_high = self.language.modulate_language(hidden2, tau)
            c_act = self.action.project_condition(n_high, tau)
            residual = self.action.residual_head(n_high, tau)
            bundle = compose(base, residual, c_act, tau, self.action.tau_align(c_act))
        else:
            tokens = VisionTokens(v_base, v_base)
            n_high = n_high_base
            bundle = compose(base, None, c_base, tau, self.action.tau_align(c_base))

        text_pool = t_tok.mean(dim=-2)
        return PolicyOutput(
            bundle=bundle,
            state=state,
            m_t=state.m,
            n_high_base=n_high_base,
            n_high=n_high,
            text_pool=text_pool,
            fused_pool=text_pool + vis1.mean(dim=-2),
            vision=tokens,
        )

    forward = forward_policy

    # -- parameter groups ----------------------------------------------------

    def group_of(self, name: str) -> str:
        if "lora_" in name:
            return "lora"
        if name.startswith(TELEPATHY_PREFIXES):
            return "telepathy"
        return "base"

    def parameter_groups(self) -> dict[str, list[str]]:
        groups: dict[str, list[str]] = {"base": [], "lora": [], "telepathy": []}
        for name, _ in self.named_parameters():
            groups[self.group_of(name)].append(name)
        return groups

    def configure_trainable(self) -> list[nn.Parameter]:
        """Freeze the backbone and base heads; train LoRA factors, telepathy heads and gates."""
        live = []
        for name, p in self.named_parameters():
            train = self.group_of(name) != "base"
            p.requires_grad_(train)
            if train:
                live.append(p)
        return live

    def group_tensors(self, group: str) -> dict[str, Tensor]:
        return {n: p.detach().clone() for n, p in self.named_parameters() if self.group_of(n) == group}


def build_policy(cfg: ModelConfig | None = None, seed: int = 0) -> SigmaPolicy:
    torch.manual_seed(seed)
    policy = SigmaPolicy(cfg)
    policy.configure_trainable()
    return policy


def save_weights(policy: SigmaPolicy, out_dir: str | Path, model_seed: int) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = {"model_config": policy.cfg.to_dict(), "model_seed": model_seed}
    heads = out_dir / HEADS_FILE
    lora = out_dir / LORA_FILE
    tensorio.save_tensors(heads, policy.group_tensors("telepathy"), dict(meta, group="telepathy"))
    tensorio.save_tensors(lora, policy.group_tensors("lora"), dict(meta, group="lora"))
    return heads, lora


def load_policy(heads_path: str | Path, lora_path: str | Path | None = None) -> tuple[SigmaPolicy, dict]:
    """Rebuild the frozen base from the recorded seed, then load trained tensors over it."""
    heads_path = Path(heads_path)
    if not heads_path.is_file():
        raise LoadError(f"weights file not found: {heads_path}")
    tensors, meta = tensorio.load_tensors(heads_path)
    if "model_config" not in meta:
        raise LoadError(f"{heads_path}: no model_config in header; cannot rebuild the architecture")
    cfg = ModelConfig.from_dict(meta["model_config"])
    policy = build_policy(cfg, int(meta.get("model_seed", 0)))
    if lora_path is None and (heads_path.parent / LORA_FILE).is_file():
        lora_path = heads_path.parent / LORA_FILE
    if lora_path is not None:
        lora, _ = tensorio.load_tensors(lora_path)
        tensors = {**tensors, **lora}
    params = dict(policy.named_parameters())
    unexpected = sorted(set(tensors) - set(params))
    if unexpected:
        raise LoadError(f"{heads_path}: tensor {unexpected[0]!r} has no counterpart in the architecture")
    with torch.no_grad():
        for name, t in tensors.items():
            if tuple(t.shape) != tuple(params[name].shape):
                raise LoadError(
                    f"{heads_path}: tensor {name!r} has shape {tuple(t.shape)}, "
                    f"architecture expects {tuple(params[name].shape)}"
                )
            params[name].copy_(t)
    return policy, meta
