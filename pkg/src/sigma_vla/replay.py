"""Offline replay evaluation: CHECK A weight statistics, CHECK B per-batch
metrics, hard-threshold accounting, reports and on/off comparison."""

from __future__ import annotations

import csv
import hashlib
import io
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from itertools import islice
from pathlib import Path
from typing import Any

import torch
from torch import Tensor

from . import numerics as nx
from . import tensorio
from .adapter import GateConfig, adapt
from .action import ActionBundle
from .config import canonical_json, dataclass_from_dict, dataclass_to_dict, read_json
from .errors import ComparabilityError, ConfigurationError, IntegrityError, LoadError
from .policy import LORA_FILE, collate, load_policy
from .shards import WindowSample, load_manifest, load_samples

REPORT_FILE = "sigma_eval_report.json"
CHECK_B_FILE = "check_b.csv"
CHECK_B_COLUMNS = ("batch", "mse_vec", "mse_chk", "mse_trj", "tau_l2", "sem_align")
AGGREGATES = (
    "avg_mse_vector", "avg_mse_chunk", "avg_mse_traj",
    "avg_tau_l2", "avg_semantic_text_alignment",
)
_ROW_OF = dict(zip(AGGREGATES, CHECK_B_COLUMNS[1:]))
STATE_COLUMNS = ("tau_l2", "sem_align")


# ----------------------------------------------------------------------------
# CHECK A


@dataclass(frozen=True)
class WeightStats:
    heads_tensors: int
    mean: float
    std: float
    rms: float
    convention: str = "population"

    def lines(self) -> str:
        return (
            f"heads_tensors={self.heads_tensors}\n"
            f"mean={self.mean:.6f}\n"
            f"std={self.std:.6f}\n"
            f"rms={self.rms:.6f}\n"
        )


def stats_of(tensors: Sequence[Tensor]) -> WeightStats:
    if not tensors:
        return WeightStats(0, 0.0, 0.0, 0.0)
    flat = torch.cat([t.reshape(-1).to(nx.DTYPE) for t in tensors])
    if flat.numel() == 0:
        return WeightStats(len(tensors), 0.0, 0.0, 0.0)
    mean = flat.mean()
    std = torch.sqrt(((flat - mean) ** 2).mean())
    rms = torch.sqrt((flat * flat).mean())
    return WeightStats(len(tensors), float(mean), float(std), float(rms))


def weight_stats(weights_file: str | Path) -> WeightStats:
    """Pooled population mean/std/rms over every entry of every tensor in the file."""
    path = Path(weights_file)
    if not path.is_file():
        raise LoadError(f"weights file not found: {path}")
    tensors, _ = tensorio.load_tensors(path)
    return stats_of(list(tensors.values()))


# ----------------------------------------------------------------------------
# CHECK B


@dataclass
class BatchRow:
    batch: int
    mse_vec: float
    mse_chk: float
    mse_trj: float
    tau_l2: float
    sem_align: float
    size: int = 0

    def values(self) -> list:
        return [getattr(self, c) for c in CHECK_B_COLUMNS]


def sample_mse(pred: Tensor, target: Tensor) -> Tensor:
    """Element-mean squared error per sample (first axis)."""
    d = pred - target
    return (d * d).reshape(d.shape[0], -1).mean(dim=1)


def batch_metrics(bundles, targets, states, text_pools, batch: int = 0) -> BatchRow:
    """One CHECK-B row.

    ``bundles`` is a batched ActionBundle or a list of per-sample ones;
    ``states`` likewise a batched TelepathyState or list; ``targets`` a dict of
    stacked targets or a list of per-sample dicts.
    """
    if not isinstance(bundles, ActionBundle) and len(bundles) == 0:
        raise ConfigurationError("batch_metrics needs a non-empty batch")
    if isinstance(bundles, ActionBundle):
        finals = {k: bundles.final(k) for k in ActionBundle.BRANCHES}
    else:
        finals = {k: torch.stack([b.final(k) for b in bundles]) for k in ActionBundle.BRANCHES}
    if not isinstance(targets, dict):
        targets = {k: torch.stack([t[k] for t in targets]) for k in ActionBundle.BRANCHES}
    if isinstance(states, Sequence):
        tau = torch.stack([s.tau for s in states])
        z_pool = torch.stack([s.z_pool for s in states])
    else:
        tau, z_pool = states.tau, states.z_pool
    if not isinstance(text_pools, Tensor):
        text_pools = torch.stack(list(text_pools))
    n = finals["vec"].shape[0]
    if n == 0:
        raise ConfigurationError("batch_metrics needs a non-empty batch")
    with torch.no_grad():
        mse = {k: sample_mse(finals[k], targets[k]) for k in ActionBundle.BRANCHES}
        return BatchRow(
            batch=batch,
            mse_vec=float(mse["vec"].mean()),
            mse_chk=float(mse["chunk"].mean()),
            mse_trj=float(mse["traj"].mean()),
            tau_l2=float(nx.safe_norm(tau).mean()),
            sem_align=float(nx.cosine(z_pool, text_pools).mean()),
            size=n,
        )


# ----------------------------------------------------------------------------
# replay


@dataclass(frozen=True)
class EvalConfig:
    telepathy_on: bool = True
    adapter_on: bool = False
    batch_size: int = 32
    hard_thresholds: tuple[float, float, float] = (0.1, 0.2, 0.2)
    success_thresholds: tuple[float, float, float] = (0.05, 0.1, 0.1)
    seed: int | None = None  # denoiser noise override; None keeps the model's seed
    gate: GateConfig = field(default_factory=GateConfig)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        for name in ("hard_thresholds", "success_thresholds"):
            vals = tuple(float(v) for v in getattr(self, name))
            if len(vals) != 3 or min(vals) <= 0:
                raise ConfigurationError(f"{name} must be three positive numbers")
            object.__setattr__(self, name, vals)

    def to_dict(self) -> dict[str, Any]:
        d = dataclass_to_dict(self)
        d["gate"] = dataclass_to_dict(self.gate)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "EvalConfig":
        d = dict(d)
        gate = dataclass_from_dict(GateConfig, d.pop("gate", None))
        return cls(**d, gate=gate)


@dataclass
class EvalReport:
    num_samples: int
    num_batches: int
    avg_mse_vector: float
    avg_mse_chunk: float
    avg_mse_traj: float
    avg_tau_l2: float
    avg_semantic_text_alignment: float
    hard_sample_fraction: float
    total_hard_samples: int
    avg_hard_mse_vector: float
    avg_hard_mse_chunk: float
    avg_hard_mse_traj: float
    success_rate: float  # extension: all three branches under the success thresholds
    group: str
    batches: list[BatchRow]
    config: dict[str, Any]
    shards_fingerprint: str
    weights_fingerprint: str
    weight_std_convention: str = "population"
    gate: dict[str, float] | None = None

    def to_dict(self) -> dict[str, Any]:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "batches"}
        d["batches"] = [dict(zip(CHECK_B_COLUMNS + ("size",), r.values() + [r.size])) for r in self.batches]
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "EvalReport":
        d = dict(d)
        d["batches"] = [BatchRow(**r) for r in d["batches"]]
        return cls(**d)

    def check_b_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CHECK_B_COLUMNS)
        for r in self.batches:
            w.writerow([r.batch] + [repr(v) for v in r.values()[1:]])
        return buf.getvalue()

    def write(self, out_dir: str | Path) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / REPORT_FILE
        path.write_text(canonical_json(self.to_dict()) + "\n", encoding="utf-8")
        (out_dir / CHECK_B_FILE).write_text(self.check_b_csv(), encoding="utf-8")
        return path


def load_report(path: str | Path) -> EvalReport:
    path = Path(path)
    if path.is_dir():
        path = path / REPORT_FILE
    if not path.is_file():
        raise LoadError(f"report not found: {path}")
    return EvalReport.from_dict(read_json(path))


def _file_digest(paths: Sequence[Path]) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(p.read_bytes())
    return h.hexdigest()


def weighted_mean(rows: Sequence[BatchRow], column: str) -> float:
    n = sum(r.size for r in rows)
    return sum(getattr(r, column) * r.size for r in rows) / n if n else 0.0


def evaluate_samples(policy, samples: Sequence[WindowSample], cfg: EvalConfig):
    """Sequential per-episode replay; yields (sample, bundle, state, text_pool) in input order.

    Memory is carried from one window to the next within an episode and reset
    to zero whenever the episode index changes.
    """
    m = None
    prev_ep = None
    with torch.no_grad():
        for s in samples:
            if s.episode_index != prev_ep:
                m = None
                prev_ep = s.episode_index
            out = policy.forward_policy(collate([s]), m, telepathy_on=cfg.telepathy_on, seed=cfg.seed)
            m = out.m_t
            yield s, out.bundle, out.state, out.text_pool


def run_eval(
    shards_dir: str | Path,
    weights_file: str | Path,
    cfg: EvalConfig | None = None,
    out_dir: str | Path | None = None,
    lora_file: str | Path | None = None,
) -> EvalReport:
    cfg = cfg or EvalConfig()
    shards_dir = Path(shards_dir)
    manifest = load_manifest(shards_dir)
    policy, meta = load_policy(weights_file, lora_file)
    policy.eval()
    samples = sorted(load_samples(shards_dir), key=lambda s: (s.episode_index, s.window_start))
    if not samples:
        raise IntegrityError(f"{shards_dir}: no samples to evaluate")
    weight_paths = [Path(weights_file)]
    lora_path = Path(lora_file) if lora_file else Path(weights_file).parent / LORA_FILE
    if lora_path.is_file():
        weight_paths.append(lora_path)

    thr = torch.tensor(cfg.hard_thresholds, dtype=nx.DTYPE)
    ok = torch.tensor(cfg.success_thresholds, dtype=nx.DTYPE)
    rows: list[BatchRow] = []
    per_sample: list[Tensor] = []
    gate_sums: dict[str, float] = {}
    stream = evaluate_samples(policy, samples, cfg)
    for b in range(math.ceil(len(samples) / cfg.batch_size)):
        chunk = list(islice(stream, cfg.batch_size))
        bundles, states = [], []
        for s, bundle, state, _ in chunk:
            if cfg.adapter_on and cfg.telepathy_on:
                bundle, diag = adapt(bundle, cfg.gate)
                for k, v in diag.means().items():
                    gate_sums[k] = gate_sums.get(k, 0.0) + v
            bundles.append(bundle.index(0))
            states.append(state.index(0))
        targets = [{"vec": s.gt_action_vector, "chunk": s.gt_action_chunk, "traj": s.gt_action_trajectory}
                   for s, *_ in chunk]
        rows.append(batch_metrics(bundles, targets, states, [tp[0] for *_, tp in chunk], batch=b))
        for bundle, t in zip(bundles, targets):
            per_sample.append(torch.stack([
                sample_mse(bundle.final(k)[None], t[k][None])[0] for k in ActionBundle.BRANCHES
            ]))

    mses = torch.stack(per_sample)  # [N, 3]
    hard = (mses > thr).any(dim=1)
    success = (mses < ok).all(dim=1)
    n_hard = int(hard.sum())
    hard_avg = mses[hard].mean(dim=0).tolist() if n_hard else [0.0, 0.0, 0.0]
    group = ("sigma" if cfg.telepathy_on else "control") + ("+adapter" if cfg.adapter_on and cfg.telepathy_on else "")
    report = EvalReport(
        num_samples=len(samples),
        num_batches=len(rows),
        **{agg: weighted_mean(rows, col) for agg, col in _ROW_OF.items()},
        hard_sample_fraction=n_hard / len(samples),
        total_hard_samples=n_hard,
        avg_hard_mse_vector=hard_avg[0],
        avg_hard_mse_chunk=hard_avg[1],
        avg_hard_mse_traj=hard_avg[2],
        success_rate=float(success.double().mean()),
        group=group,
        batches=rows,
        config={"eval": cfg.to_dict(), "model_config": meta["model_config"], "model_seed": meta.get("model_seed", 0)},
        shards_fingerprint=manifest.fingerprint,
        weights_fingerprint=_file_digest(weight_paths),
        gate={k: v / len(samples) for k, v in gate_sums.items()} if gate_sums else None,
    )
    if out_dir is not None:
        report.write(out_dir)
    return report


# ----------------------------------------------------------------------------
# comparison


@dataclass
class Comparison:
    deltas: dict[str, float]  # b − a
    percent: dict[str, float]  # 100·(b − a)/|a|
    state_columns_equal: bool
    group_a: str
    group_b: str

    def to_dict(self) -> dict[str, Any]:
        return dict(self.__dict__)

    def summary(self) -> str:
        lines = [f"{self.group_b} vs {self.group_a}"]
        for k in ("avg_mse_vector", "avg_mse_chunk", "avg_mse_traj"):
            direction = "lower" if self.deltas[k] < 0 else ("higher" if self.deltas[k] > 0 else "equal")
            lines.append(f"{k}: delta={self.deltas[k]:+.6f} ({self.percent[k]:+.2f}%) {direction}")
        lines.append(f"tau_l2/sem_align columns equal: {self.state_columns_equal}")
        return "\n".join(lines) + "\n"


COMPARED = AGGREGATES + ("hard_sample_fraction", "avg_hard_mse_vector", "avg_hard_mse_chunk",
                         "avg_hard_mse_traj", "success_rate")


def compare(report_a: EvalReport, report_b: EvalReport, tol: float = 1e-9) -> Comparison:
    """Deltas of ``b`` relative to ``a``.

    Raises ComparabilityError when the two reports were not produced on the
    same shards, or when they share weights yet disagree on the pass-1
    columns (tau_l2, sem_align), which both groups compute identically.
    """
    if report_a.shards_fingerprint != report_b.shards_fingerprint:
        raise ComparabilityError("reports were produced on different shards")
    if report_a.num_batches != report_b.num_batches:
        raise ComparabilityError("reports have different batch layouts")
    equal = all(
        abs(getattr(ra, c) - getattr(rb, c)) <= tol
        for ra, rb in zip(report_a.batches, report_b.batches) for c in STATE_COLUMNS
    )
    if not equal and report_a.weights_fingerprint == report_b.weights_fingerprint:
        raise ComparabilityError("same weights but tau_l2/sem_align columns differ")
    deltas, pct = {}, {}
    for k in COMPARED:
        a, b = getattr(report_a, k), getattr(report_b, k)
        deltas[k] = b - a
        pct[k] = 100.0 * (b - a) / abs(a) if a else 0.0
    return Comparison(deltas, pct, equal, report_a.group, report_b.group)
