"""TRAF and TSAC objectives, the linear curriculum, and the training loop."""

from __future__ import annotations

import csv
import io
import logging
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from . import numerics as nx
from .action import ActionBundle
from .config import (
    ModelConfig,
    dataclass_from_dict,
    dataclass_to_dict,
    write_json,
)
from .errors import ConfigurationError, ContractError, TrainingDivergedError
from .layers import lora_apply  # noqa: F401  (re-exported)
from .policy import PolicyBatch, SigmaPolicy, build_policy, collate, save_weights
from .shards import WindowSample, load_samples

log = logging.getLogger(__name__)

BRANCHES = ("vec", "chunk", "traj")
LOG_COLUMNS = (
    "step", "loss", "L_act", "L_sem", "L_int", "L_tau", "L_act_hard",
    "w_sem", "w_int", "w_tau", "hard_ratio", "tau_rms",
)


@dataclass(frozen=True)
class TrafConfig:
    alpha_a: float = 1.0
    alpha_b: float = 1.0
    alpha_c: float = 1.0
    rho: float = 0.3
    lambda_hard: float = 0.5

    def __post_init__(self):
        if not 0 < self.rho <= 1:
            raise ConfigurationError(f"rho must lie in (0, 1], got {self.rho}")
        if min(self.alpha_a, self.alpha_b, self.alpha_c, self.lambda_hard) < 0:
            raise ConfigurationError("TRAF weights must be non-negative")

    @property
    def alphas(self) -> dict[str, float]:
        return {"vec": self.alpha_a, "chunk": self.alpha_b, "traj": self.alpha_c}


@dataclass(frozen=True)
class TsacConfig:
    beta_mi: float = 0.1
    lambda_collapse: float = 1.0
    tau_0: float = 1.0
    eta_var: float = 0.1
    mi_temperature: float = 0.1

    def __post_init__(self):
        if self.tau_0 <= 0:
            raise ConfigurationError("tau_0 must be positive")


@dataclass(frozen=True)
class Ramp:
    init: float
    target: float
    ramp_steps: int

    def __post_init__(self):
        if self.ramp_steps < 1:
            raise ConfigurationError("ramp_steps must be >= 1")

    def at(self, t: int) -> float:
        if t < 0:
            raise ContractError("curriculum step must be >= 0")
        if t >= self.ramp_steps:
            return float(self.target)
        return self.init + t / self.ramp_steps * (self.target - self.init)


@dataclass(frozen=True)
class CurriculumSchedule:
    sem: Ramp = Ramp(0.1, 1.0, 82)
    intent: Ramp = Ramp(0.1, 0.8, 82)
    tau: Ramp = Ramp(0.0, 0.03, 82)


def curriculum_weights(t: int, schedule: CurriculumSchedule | None = None) -> tuple[float, float, float]:
    s = schedule or CurriculumSchedule()
    return s.sem.at(t), s.intent.at(t), s.tau.at(t)


# ----------------------------------------------------------------------------
# TRAF


@dataclass
class TrafResult:
    total: Tensor
    act: Tensor
    hard: Tensor
    h: Tensor  # per-sample difficulty, detached
    hard_set: list[int]
    mse: dict[str, Tensor]  # per-sample, per-branch

    @property
    def hard_ratio(self) -> float:
        return len(self.hard_set) / len(self.h)


def _stack_bundles(bundles: ActionBundle | Sequence[ActionBundle]) -> dict[str, Tensor]:
    if isinstance(bundles, ActionBundle):
        finals = {b: bundles.final(b) for b in BRANCHES}
        if finals["vec"].ndim == 1:
            finals = {b: v.unsqueeze(0) for b, v in finals.items()}
        return finals
    if not bundles:
        raise ContractError("TRAF needs a non-empty batch")
    return {b: torch.stack([x.final(b) for x in bundles]) for b in BRANCHES}


def _stack_targets(targets) -> dict[str, Tensor]:
    if isinstance(targets, PolicyBatch):
        return targets.targets
    if isinstance(targets, Mapping):
        out = dict(targets)
        if out["vec"].ndim == 1:
            out = {b: v.unsqueeze(0) for b, v in out.items()}
        return out
    return {b: torch.stack([t[b] for t in targets]) for b in BRANCHES}


def per_sample_mse(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise ContractError(f"prediction {tuple(pred.shape)} vs target {tuple(target.shape)}")
    diff = pred - target
    return (diff * diff).reshape(diff.shape[0], -1).mean(dim=1)


def hard_count(batch: int, rho: float) -> int:
    return max(1, min(batch, math.ceil(rho * batch - 1e-9)))


def select_hard(h: Sequence[float], rho: float) -> list[int]:
    """Indices of the ⌈ρ·B⌉ largest scores; ties go to the lower index."""
    k = hard_count(len(h), rho)
    order = sorted(range(len(h)), key=lambda i: (-float(h[i]), i))
    return sorted(order[:k])


def traf_loss(bundles, targets, cfg: TrafConfig | None = None) -> TrafResult:
    cfg = cfg or TrafConfig()
    finals = _stack_bundles(bundles)
    tgt = _stack_targets(targets)
    if finals["vec"].shape[0] == 0:
        raise ContractError("TRAF needs a non-empty batch")
    mse = {b: per_sample_mse(finals[b], tgt[b]) for b in BRANCHES}
    alphas = cfg.alphas
    act = sum(alphas[b] * mse[b].mean() for b in BRANCHES)
    h = (mse["vec"] + mse["chunk"] + mse["traj"]).detach()
    hard_set = select_hard(h.tolist(), cfg.rho)
    idx = torch.tensor(hard_set)
    hard = sum(alphas[b] * mse[b][idx].mean() for b in BRANCHES)
    return TrafResult(act + cfg.lambda_hard * hard, act, hard, h, hard_set, mse)


# ----------------------------------------------------------------------------
# TSAC


def sem_loss(
    z_pool: Tensor,
    m_prev: Tensor,
    fused_pool: Tensor,
    beta_mi: float = 0.1,
    temperature: float = 0.1,
) -> tuple[Tensor, dict[str, Tensor]]:
    """Temporal cosine consistency plus an in-batch contrastive term.

    L_time is 1 − cos(z_pool, m_prev), taken as 0 for a zero (fresh) memory.
    L_mi is the cross-entropy of matching each z_pool to its own fused
    text+vision vector among the batch, on cosine logits / temperature.
    """
    if z_pool.ndim == 1:
        z_pool, m_prev, fused_pool = z_pool[None], m_prev[None], fused_pool[None]
    fresh = nx.safe_norm(m_prev) == 0
    l_time = torch.where(fresh, torch.zeros_like(fresh, dtype=z_pool.dtype), 1.0 - nx.cosine(z_pool, m_prev))
    l_time = l_time.mean()
    B = z_pool.shape[0]
    if B < 2:
        log.info("contrastive term skipped for a batch of 1")
        l_mi = torch.zeros((), dtype=z_pool.dtype)
    else:
        logits = nx.cosine(z_pool.unsqueeze(1), fused_pool.unsqueeze(0)) / temperature
        log_probs = logits - torch.logsumexp(logits, dim=1, keepdim=True)
        l_mi = -log_probs.diagonal().mean()
    return l_time + beta_mi * l_mi, {"L_time": l_time, "L_mi": l_mi}


def intent_loss(z_intent: Tensor, m_t: Tensor) -> Tensor:
    """−cos(z_intent, m_t), batch mean; 0 for zero vectors."""
    return -nx.cosine(z_intent, m_t).mean()


def tau_reg(tau: Tensor, c_act: Tensor, cfg: TsacConfig | None = None, proj=None) -> Tensor:
    """0.01‖τ‖² + λ_collapse·max(0, τ₀ − ‖τ‖)² + η_var·(1 − cos(τ, c)), batch mean.

    ``c`` is ``proj(c_act)`` when a projection is supplied, else ``c_act`` itself
    (which must then already live in τ's space).
    """
    cfg = cfg or TsacConfig()
    c = proj(c_act) if proj is not None else c_act
    norm = nx.safe_norm(tau)
    collapse = torch.clamp(cfg.tau_0 - norm, min=0.0)
    out = 0.01 * norm * norm + cfg.lambda_collapse * collapse * collapse + cfg.eta_var * (1.0 - nx.cosine(tau, c))
    return out.mean()


def total_loss(parts, weights) -> Tensor:
    """L_act,total + w_sem·L_sem + w_int·L_int + w_τ·L_τ."""
    if isinstance(parts, Mapping):
        parts = (parts["L_act_total"], parts["L_sem"], parts["L_int"], parts["L_tau"])
    act, sem, intent, tau = parts
    w_sem, w_int, w_tau = weights
    return act + w_sem * sem + w_int * intent + w_tau * tau


def tau_rms(tau: Tensor) -> float:
    return float(torch.sqrt((tau.detach() ** 2).mean()))


# ----------------------------------------------------------------------------
# loop


@dataclass
class TrainConfig:
    steps: int = 300
    batch_size: int = 20
    lr: float = 1e-3
    momentum: float = 0.9
    grad_clip: float = 1.0
    log_every: int = 10
    seed: int = 0
    model_seed: int | None = None
    traf: TrafConfig = field(default_factory=TrafConfig)
    tsac: TsacConfig = field(default_factory=TsacConfig)
    curriculum: CurriculumSchedule = field(default_factory=CurriculumSchedule)
    model: ModelConfig = field(default_factory=ModelConfig)

    def to_dict(self) -> dict:
        return {
            "steps": self.steps, "batch_size": self.batch_size, "lr": self.lr,
            "momentum": self.momentum, "grad_clip": self.grad_clip, "log_every": self.log_every,
            "seed": self.seed, "model_seed": self.model_seed,
            "optimizer": "sgd_momentum",
            "traf": dataclass_to_dict(self.traf),
            "tsac": dataclass_to_dict(self.tsac),
            "curriculum": {k: dataclass_to_dict(getattr(self.curriculum, k)) for k in ("sem", "intent", "tau")},
            "model": self.model.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d.pop("optimizer", None)
        cur = d.pop("curriculum", None)
        kwargs = dict(
            traf=dataclass_from_dict(TrafConfig, d.pop("traf", None)),
            tsac=dataclass_from_dict(TsacConfig, d.pop("tsac", None)),
            model=ModelConfig.from_dict(d.pop("model", {})),
        )
        if cur is not None:
            kwargs["curriculum"] = CurriculumSchedule(
                **{k: dataclass_from_dict(Ramp, v) for k, v in cur.items()}
            )
        return cls(**d, **kwargs)


@dataclass
class TrainLogRow:
    step: int
    loss: float
    L_act: float
    L_sem: float
    L_int: float
    L_tau: float
    L_act_hard: float
    w_sem: float
    w_int: float
    w_tau: float
    hard_ratio: float
    tau_rms: float

    def values(self) -> list:
        return [getattr(self, c) for c in LOG_COLUMNS]


@dataclass
class TrainResult:
    rows: list[TrainLogRow]
    heads_path: Path | None
    lora_path: Path | None
    policy: SigmaPolicy


class _Lanes:
    """B parallel cursors walking episodes window by window, each with its own memory.

    A lane starts at a random window of a random episode with fresh memory; on
    reaching the episode end it jumps to the first window of another episode.
    """

    def __init__(self, samples: Sequence[WindowSample], n: int, rng: np.random.Generator, d_model: int):
        by_ep: dict[int, list[WindowSample]] = {}
        for s in samples:
            by_ep.setdefault(s.episode_index, []).append(s)
        self.episodes = [sorted(v, key=lambda s: s.window_start) for _, v in sorted(by_ep.items())]
        if not self.episodes:
            raise ContractError("no training samples")
        self.rng = rng
        self.d_model = d_model
        self.cursor = []
        for _ in range(n):
            e = int(rng.integers(len(self.episodes)))
            self.cursor.append([e, int(rng.integers(len(self.episodes[e])))])
        self.memory = torch.zeros(n, d_model, dtype=nx.DTYPE)

    def batch(self) -> tuple[list[WindowSample], Tensor]:
        return [self.episodes[e][i] for e, i in self.cursor], self.memory

    def advance(self, m_t: Tensor) -> None:
        m_t = m_t.detach().clone()
        for lane, cur in enumerate(self.cursor):
            cur[1] += 1
            ep = self.episodes[cur[0]]
            if cur[1] >= len(ep):
                cur[0] = int(self.rng.integers(len(self.episodes)))
                cur[1] = 0
                m_t[lane] = 0.0
        self.memory = m_t


def _check_finite(step: int, values: Mapping[str, float]) -> None:
    for name, v in values.items():
        if not math.isfinite(v):
            raise TrainingDivergedError(step, name, v)


def train_step_losses(policy: SigmaPolicy, batch: PolicyBatch, m_prev: Tensor, t: int, cfg: TrainConfig):
    """Forward with telepathy on and every loss term for curriculum step ``t``."""
    out = policy.forward_policy(batch, m_prev, telepathy_on=True)
    st = out.state
    traf = traf_loss(out.bundle, batch.targets, cfg.traf)
    l_sem, _ = sem_loss(st.z_pool, m_prev, out.fused_pool, cfg.tsac.beta_mi, cfg.tsac.mi_temperature)
    l_int = intent_loss(st.z_intent, st.m)
    l_tau = tau_reg(st.tau, out.bundle.c_act_tau, cfg.tsac)
    w = curriculum_weights(t, cfg.curriculum)
    loss = total_loss((traf.total, l_sem, l_int, l_tau), w)
    row = TrainLogRow(
        step=t, loss=loss.item(), L_act=traf.act.item(), L_sem=l_sem.item(), L_int=l_int.item(),
        L_tau=l_tau.item(), L_act_hard=traf.hard.item(), w_sem=w[0], w_int=w[1], w_tau=w[2],
        hard_ratio=traf.hard_ratio, tau_rms=tau_rms(st.tau),
    )
    return loss, row, out


def train_loop(
    shards_dir: str | Path | None,
    config: TrainConfig | None = None,
    seed: int | None = None,
    out_dir: str | Path | None = None,
    samples: Sequence[WindowSample] | None = None,
) -> TrainResult:
    cfg = config or TrainConfig()
    seed = cfg.seed if seed is None else seed
    model_seed = seed if cfg.model_seed is None else cfg.model_seed
    if samples is None:
        samples = load_samples(shards_dir)
    policy = build_policy(cfg.model, model_seed)
    params = policy.configure_trainable()
    opt = torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum)
    torch.manual_seed(seed)
    lanes = _Lanes(samples, cfg.batch_size, np.random.default_rng(seed), cfg.model.d_model)
    policy.train()
    rows: list[TrainLogRow] = []
    for t in range(cfg.steps):
        window, m_prev = lanes.batch()
        batch = collate(window)
        loss, row, out = train_step_losses(policy, batch, m_prev, t, cfg)
        _check_finite(t, {c: getattr(row, c) for c in LOG_COLUMNS[1:]})
        if t % cfg.log_every == 0 or t == cfg.steps - 1:
            rows.append(row)
            log.info("step %d loss %.5f L_act %.5f tau_rms %.4f", t, row.loss, row.L_act, row.tau_rms)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
        opt.step()
        lanes.advance(out.m_t)
    policy.eval()
    heads = lora = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        heads, lora = save_weights(policy, out_dir, model_seed)
        write_json(out_dir / "train_config.json", dict(cfg.to_dict(), seed=seed, model_seed=model_seed))
        write_log(rows, out_dir)
    return TrainResult(rows, heads, lora, policy)


def _fmt(v) -> str:
    return str(v) if isinstance(v, int) else f"{v:.6f}"


def format_table(rows: Sequence[TrainLogRow]) -> str:
    cells = [list(LOG_COLUMNS)] + [[_fmt(v) for v in r.values()] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(LOG_COLUMNS))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells) + "\n"


def rows_to_csv(rows: Sequence[TrainLogRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_COLUMNS)
    for r in rows:
        w.writerow([repr(v) for v in r.values()])
    return buf.getvalue()


def write_log(rows: Sequence[TrainLogRow], out_dir: str | Path) -> None:
    out_dir = Path(out_dir)
    (out_dir / "train_log.csv").write_text(rows_to_csv(rows), encoding="utf-8")
    (out_dir / "train_log.txt").write_text(format_table(rows), encoding="utf-8")


def read_log(path: str | Path) -> list[TrainLogRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        return [
            TrainLogRow(**{k: (int(v) if k == "step" else float(v)) for k, v in rec.items()})
            for rec in reader
        ]
