"""Synthetic pick-place episodes, horizon-T windowing, static filtering and
resumable shard storage with a ``meta.json`` manifest."""

from __future__ import annotations

import hashlib
import logging
import time
from collections.abc import Callable, Iterable, Iterator
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch
from torch import Tensor

from . import tensorio
from .config import canonical_json, read_json
from .errors import (
    ConfigurationError,
    IntegrityError,
    PermanentReadError,
    TransientReadError,
)
from .numerics import DTYPE
from .vocab import DESTINATIONS, HOLD_STILL, OBJECTS, command_templates, destination_of

log = logging.getLogger(__name__)

DATASET_ID = "synthetic_so101_pickplace/v1"
MANIFEST = "meta.json"
SHARD_SUFFIX = ".shard"
_PROJECTION_SEED = 20240917  # shared across episodes: the "camera" is fixed
_IK_SEED = 31337


@dataclass
class Frame:
    frame_index: int
    vision_features: Tensor  # [N_f, d_feat]
    robot_state: Tensor  # [D_s]
    action: Tensor  # [D_a]
    text: str


@dataclass
class Episode:
    episode_index: int
    frames: list[Frame]

    @property
    def text(self) -> str:
        return self.frames[0].text if self.frames else ""

    def sorted(self) -> "Episode":
        frames = sorted(self.frames, key=lambda f: f.frame_index)
        idx = [f.frame_index for f in frames]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise IntegrityError(f"episode {self.episode_index}: duplicate frame_index values")
        return Episode(self.episode_index, frames)

    def __len__(self) -> int:
        return len(self.frames)


@dataclass
class WindowSample:
    vision_inputs: Tensor  # [T, N_f, d_feat]
    robot_state: Tensor  # [T, D_s]
    gt_action_vector: Tensor  # [D_a]
    gt_action_chunk: Tensor  # [C, D_a]
    gt_action_trajectory: Tensor  # [T, D_a]
    text: str
    avg_action_l2: float
    max_action_l2: float
    episode_index: int = -1
    window_start: int = 0
    base_action_vector: Tensor | None = None
    base_action_chunk: Tensor | None = None
    base_action_trajectory: Tensor | None = None

    _TENSORS = (
        "vision_inputs", "robot_state", "gt_action_vector", "gt_action_chunk",
        "gt_action_trajectory", "base_action_vector", "base_action_chunk", "base_action_trajectory",
    )

    def to_record(self) -> tensorio.Record:
        tensors = {n: getattr(self, n) for n in self._TENSORS if getattr(self, n) is not None}
        tensors["avg_action_l2"] = torch.tensor(self.avg_action_l2, dtype=DTYPE)
        tensors["max_action_l2"] = torch.tensor(self.max_action_l2, dtype=DTYPE)
        attrs = {"text": self.text, "episode_index": self.episode_index, "window_start": self.window_start}
        return tensorio.Record(attrs, tensors)

    @classmethod
    def from_record(cls, rec: tensorio.Record) -> "WindowSample":
        t = dict(rec.tensors)
        return cls(
            text=rec.attrs["text"],
            episode_index=int(rec.attrs["episode_index"]),
            window_start=int(rec.attrs["window_start"]),
            avg_action_l2=float(t.pop("avg_action_l2")),
            max_action_l2=float(t.pop("max_action_l2")),
            **t,
        )


# ----------------------------------------------------------------------------
# synthetic source


def _ease(s: np.ndarray) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(np.pi * s)


def _ik_map(state_dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Fixed linear stand-in for inverse kinematics: arm joints = home + M @ xyz."""
    rng = np.random.default_rng(_IK_SEED)
    arm = state_dim - 1
    M = rng.normal(0.0, 2.0, size=(arm, 3))
    home = rng.uniform(-0.5, 0.5, size=arm)
    return M, home


def _vision_projection(n_feat: int, d_feat: int) -> np.ndarray:
    rng = np.random.default_rng(_PROJECTION_SEED)
    return rng.normal(0.0, 1.0, size=(7, n_feat * d_feat))


def generate_synthetic_episode(
    seed: int,
    length: int,
    action_dim: int = 6,
    state_dim: int = 6,
    *,
    episode_index: int = 0,
    horizon_T: int = 16,
    n_feat: int = 12,
    d_feat: int = 16,
    command: str | None = None,
    hold_still_prob: float = 0.125,
    noise: float = 0.01,
) -> Episode:
    """Scripted reach → grasp → move → release episode, deterministic per seed.

    Joint states follow eased interpolation between waypoints and
    ``action[t] = state[t+1] - state[t]``. The destination word in the
    command decides where the object is placed.
    """
    if length < horizon_T:
        raise ConfigurationError(f"episode length {length} is shorter than horizon_T={horizon_T}")
    if action_dim != state_dim:
        raise ConfigurationError("actions are joint deltas, so action_dim must equal state_dim")
    if state_dim < 2:
        raise ConfigurationError("state_dim must cover at least one arm joint and the gripper")
    rng = np.random.default_rng(seed)
    if command is None:
        if rng.random() < hold_still_prob:
            command = HOLD_STILL
        else:
            movers = [c for c in command_templates() if c != HOLD_STILL]
            command = movers[int(rng.integers(len(movers)))]
    elif command not in command_templates():
        raise ConfigurationError(f"unknown command template {command!r}")

    M, home = _ik_map(state_dim)
    home = home + rng.normal(0.0, 0.05, size=home.shape)
    obj = np.array([rng.uniform(0.15, 0.3), rng.uniform(-0.12, 0.12), 0.0])
    rest = np.array([0.1, 0.0, 0.15])
    open_g, closed_g = 0.8, 0.0

    dest = destination_of(command)
    if command == HOLD_STILL or dest is None:
        # (gripper xyz, gripper opening, object attached?)
        waypoints = [(rest, open_g, False), (rest, open_g, False)]
        weights = [1.0]
    else:
        goal = np.array([0.22, DESTINATIONS[dest], 0.0])
        up = np.array([0.0, 0.0, 0.1])
        waypoints = [
            (rest, open_g, False),
            (obj + up, open_g, False),
            (obj, open_g, False),
            (obj, closed_g, True),
            (obj + up, closed_g, True),
            (goal + up, closed_g, True),
            (goal + np.array([0.0, 0.0, 0.02]), closed_g, True),
            (goal + np.array([0.0, 0.0, 0.02]), open_g, False),
            (goal + up, open_g, False),
        ]
        weights = [3, 2, 1, 2, 4, 2, 1, 2]

    # length transitions → length + 1 state samples
    bounds = np.concatenate([[0.0], np.cumsum(weights) / np.sum(weights)])
    s = np.arange(length + 1) / length
    seg = np.clip(np.searchsorted(bounds, s, side="right") - 1, 0, len(weights) - 1)
    local = (s - bounds[seg]) / (bounds[seg + 1] - bounds[seg])
    e = _ease(np.clip(local, 0.0, 1.0))[:, None]

    pos_a = np.stack([waypoints[k][0] for k in seg])
    pos_b = np.stack([waypoints[k + 1][0] for k in seg])
    grip_xyz = pos_a + e * (pos_b - pos_a)
    g_a = np.array([waypoints[k][1] for k in seg])
    g_b = np.array([waypoints[k + 1][1] for k in seg])
    grip = g_a + e[:, 0] * (g_b - g_a)

    states = np.concatenate([home[None, :] + grip_xyz @ M.T, grip[:, None]], axis=1)
    actions = np.diff(states, axis=0)

    attached = np.array([waypoints[k][2] and waypoints[k + 1][2] for k in seg])
    obj_xyz = np.empty_like(grip_xyz)
    cur = obj.copy()
    for t in range(length + 1):
        if attached[t]:
            cur = grip_xyz[t].copy()
        elif t > 0 and attached[t - 1]:
            cur = np.array([grip_xyz[t][0], grip_xyz[t][1], 0.0])
        obj_xyz[t] = cur
    phase = seg / max(len(weights) - 1, 1)

    P = _vision_projection(n_feat, d_feat)
    obs = np.concatenate([grip_xyz, obj_xyz, phase[:, None]], axis=1)
    feats = obs[:length] @ P + rng.normal(0.0, noise, size=(length, n_feat * d_feat))
    feats = feats.reshape(length, n_feat, d_feat)

    frames = [
        Frame(
            frame_index=t,
            vision_features=torch.from_numpy(feats[t].copy()).to(DTYPE),
            robot_state=torch.from_numpy(states[t].copy()).to(DTYPE),
            action=torch.from_numpy(actions[t].copy()).to(DTYPE),
            text=command,
        )
        for t in range(length)
    ]
    return Episode(episode_index, frames)


# ----------------------------------------------------------------------------
# windowing and filtering


def compute_action_stats(actions: Tensor) -> tuple[float, float]:
    """Mean and max of the per-step Euclidean action norms."""
    if actions.ndim != 2 or actions.shape[0] < 1:
        raise ConfigurationError(f"expected a [T, D_a] action block with T >= 1, got {tuple(actions.shape)}")
    norms = torch.sqrt((actions * actions).sum(dim=1))
    return float(norms.mean()), float(norms.max())


def build_windows(episode: Episode, horizon_T: int, stride: int = 1, chunk: int = 8) -> list[WindowSample]:
    if horizon_T < 1 or stride < 1:
        raise ConfigurationError("horizon_T and stride must both be >= 1")
    if chunk > horizon_T:
        raise ConfigurationError(f"chunk {chunk} exceeds horizon {horizon_T}")
    ep = episode.sorted()
    n = len(ep)
    if n < horizon_T:
        return []
    vision = torch.stack([f.vision_features for f in ep.frames])
    state = torch.stack([f.robot_state for f in ep.frames])
    action = torch.stack([f.action for f in ep.frames])
    out = []
    for start in range(0, n - horizon_T + 1, stride):
        traj = action[start:start + horizon_T].clone()
        avg, mx = compute_action_stats(traj)
        out.append(
            WindowSample(
                vision_inputs=vision[start:start + horizon_T].clone(),
                robot_state=state[start:start + horizon_T].clone(),
                gt_action_vector=traj[0].clone(),
                gt_action_chunk=traj[:chunk].clone(),
                gt_action_trajectory=traj,
                text=ep.text,
                avg_action_l2=avg,
                max_action_l2=mx,
                episode_index=ep.episode_index,
                window_start=ep.frames[start].frame_index,
            )
        )
    return out


def filter_static(windows: Iterable[WindowSample], min_action_norm: float) -> tuple[list[WindowSample], int]:
    retained, dropped = [], 0
    for w in windows:
        if w.avg_action_l2 >= min_action_norm:
            retained.append(w)
        else:
            dropped += 1
    return retained, dropped


# ----------------------------------------------------------------------------
# shard storage


@dataclass
class ShardManifest:
    dataset_id: str
    episode_count: int
    window_count: int
    retained_count: int
    filtered_count: int
    hyperparameters: dict[str, Any]
    shards: list[dict[str, Any]] = field(default_factory=list)

    def validate(self, source: str = MANIFEST) -> None:
        if self.retained_count + self.filtered_count != self.window_count:
            raise IntegrityError(f"{source}: retained + filtered != window_count")
        if sum(s["count"] for s in self.shards) != self.retained_count:
            raise IntegrityError(f"{source}: per-shard counts do not sum to retained_count")

    @property
    def fingerprint(self) -> str:
        blob = canonical_json([[s["file"], s["count"], s["sha256"]] for s in self.shards])
        return hashlib.sha256(blob.encode()).hexdigest()

    def to_dict(self) -> dict[str, Any]:
        return {
            "dataset_id": self.dataset_id,
            "episode_count": self.episode_count,
            "window_count": self.window_count,
            "retained_count": self.retained_count,
            "filtered_count": self.filtered_count,
            "hyperparameters": self.hyperparameters,
            "shards": self.shards,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ShardManifest":
        return cls(**d)


def shard_name(index: int) -> str:
    return f"shard_{index:05d}{SHARD_SUFFIX}"


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class ShardWriter:
    """Buffers samples into fixed-size shards; resumes over shards already on disk.

    On construction existing ``shard_*`` files are validated and counted, giving
    the next shard number and ``skip_count`` (samples already persisted).
    """

    def __init__(self, out_dir: str | Path, shard_size: int = 256):
        if shard_size < 1:
            raise ConfigurationError("shard_size must be >= 1")
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.shard_size = shard_size
        self.written: list[dict[str, Any]] = []
        for i, path in enumerate(sorted(self.out_dir.glob(f"shard_*{SHARD_SUFFIX}"))):
            if path.name != shard_name(i):
                raise IntegrityError(f"{path}: shard numbering is not contiguous (expected {shard_name(i)})")
            _, _, records = tensorio.read(path)
            self.written.append({"file": path.name, "count": len(records), "sha256": _sha256_file(path)})
        for entry in self.written[:-1]:
            if entry["count"] != shard_size:
                raise IntegrityError(
                    f"{self.out_dir / entry['file']}: holds {entry['count']} samples, shard_size is {shard_size}"
                )
        self.skip_count = sum(e["count"] for e in self.written)
        self.next_index = len(self.written)
        self._tail_closed = bool(self.written) and self.written[-1]["count"] < shard_size
        self._seen = 0
        self._buffer: list[WindowSample] = []
        if self.skip_count:
            log.info("resuming at %s, skipping %d samples", shard_name(self.next_index), self.skip_count)

    def add(self, sample: WindowSample) -> None:
        self._seen += 1
        if self._seen <= self.skip_count:
            return
        if self._tail_closed:
            raise IntegrityError(
                f"{self.out_dir / self.written[-1]['file']}: final shard is partial but more samples arrived"
            )
        self._buffer.append(sample)
        if len(self._buffer) == self.shard_size:
            self.flush()

    def flush(self) -> None:
        if not self._buffer:
            return
        path = self.out_dir / shard_name(self.next_index)
        meta = {"dataset_id": DATASET_ID, "shard_index": self.next_index}
        tensorio.write_atomic(path, tensorio.encode("shard", [s.to_record() for s in self._buffer], meta))
        self.written.append({"file": path.name, "count": len(self._buffer), "sha256": _sha256_file(path)})
        self.next_index += 1
        self._buffer = []

    def close(self) -> list[dict[str, Any]]:
        if self._seen < self.skip_count:
            raise IntegrityError(
                f"{self.out_dir}: {self.skip_count} samples already on disk but only {self._seen} supplied"
            )
        self.flush()
        return list(self.written)


def write_shards(
    samples: Iterable[WindowSample],
    shard_size: int,
    out_dir: str | Path,
    *,
    dataset_id: str = DATASET_ID,
    episode_count: int = 0,
    window_count: int | None = None,
    filtered_count: int = 0,
    hyperparameters: dict[str, Any] | None = None,
) -> ShardManifest:
    writer = ShardWriter(out_dir, shard_size)
    for s in samples:
        writer.add(s)
    return _finish(
        writer,
        dataset_id=dataset_id,
        episode_count=episode_count,
        window_count=window_count,
        filtered_count=filtered_count,
        hyperparameters=hyperparameters,
    )


def _finish(
    writer: ShardWriter,
    *,
    dataset_id: str = DATASET_ID,
    episode_count: int,
    window_count: int | None,
    filtered_count: int,
    hyperparameters: dict[str, Any] | None,
) -> ShardManifest:
    shards = writer.close()
    retained = sum(e["count"] for e in shards)
    manifest = ShardManifest(
        dataset_id=dataset_id,
        episode_count=episode_count,
        window_count=retained + filtered_count if window_count is None else window_count,
        retained_count=retained,
        filtered_count=filtered_count,
        hyperparameters=dict(hyperparameters or {}, shard_size=writer.shard_size),
        shards=shards,
    )
    manifest.validate()
    # manifest goes last: its presence marks a complete directory
    Path(writer.out_dir, MANIFEST).write_text(canonical_json(manifest.to_dict()), encoding="utf-8")
    return manifest


def load_manifest(shard_dir: str | Path) -> ShardManifest:
    path = Path(shard_dir) / MANIFEST
    if not path.is_file():
        raise IntegrityError(f"{path}: manifest missing")
    manifest = ShardManifest.from_dict(read_json(path))
    manifest.validate(str(path))
    return manifest


@dataclass
class RetryPolicy:
    """Exponential backoff: delay before retry k (1-based) is base_delay·factor^(k−1)."""

    max_retries: int = 3
    base_delay: float = 0.05
    factor: float = 2.0
    sleep: Callable[[float], None] = time.sleep

    def delays(self) -> list[float]:
        return [self.base_delay * self.factor ** k for k in range(self.max_retries)]


_TRANSIENT = (TransientReadError, TimeoutError, ConnectionError, InterruptedError, BlockingIOError)


def _read_with_retry(path: Path, policy: RetryPolicy, read_fn: Callable[[Path], bytes]) -> bytes:
    delays = policy.delays()
    for attempt in range(policy.max_retries + 1):
        try:
            return read_fn(path)
        except _TRANSIENT as exc:
            if attempt == policy.max_retries:
                raise PermanentReadError(
                    f"{path}: read failed after {policy.max_retries} retries ({exc})"
                ) from exc
            log.warning("transient read failure on %s (%s); retry %d", path, exc, attempt + 1)
            policy.sleep(delays[attempt])
    raise AssertionError("unreachable")


def iterate_shards(
    shard_dir: str | Path,
    retry: RetryPolicy | None = None,
    read_fn: Callable[[Path], bytes] | None = None,
) -> Iterator[WindowSample]:
    """Stream samples in manifest shard order, retrying transient read failures."""
    shard_dir = Path(shard_dir)
    manifest = load_manifest(shard_dir)
    on_disk = sorted(p.name for p in shard_dir.glob(f"shard_*{SHARD_SUFFIX}"))
    listed = [s["file"] for s in manifest.shards]
    if on_disk != listed:
        raise IntegrityError(f"{shard_dir}: manifest lists {len(listed)} shards, found {len(on_disk)} on disk")
    policy = retry or RetryPolicy()
    read_fn = read_fn or (lambda p: p.read_bytes())
    for entry in manifest.shards:
        path = shard_dir / entry["file"]
        data = _read_with_retry(path, policy, read_fn)
        _, _, records = tensorio.decode(data, str(path))
        if len(records) != entry["count"]:
            raise IntegrityError(f"{path}: holds {len(records)} samples, manifest says {entry['count']}")
        for rec in records:
            yield WindowSample.from_record(rec)


def load_samples(shard_dir: str | Path, retry: RetryPolicy | None = None) -> list[WindowSample]:
    return list(iterate_shards(shard_dir, retry))


# ----------------------------------------------------------------------------
# end-to-end preprocessing


@dataclass(frozen=True)
class PreprocessConfig:
    episodes: int = 32
    episode_start: int = 0
    episode_length: int = 64
    horizon: int = 16
    stride: int = 1
    chunk: int = 8
    min_action_norm: float = 0.01
    shard_size: int = 256
    seed: int = 0
    action_dim: int = 6
    state_dim: int = 6
    n_feat: int = 12
    d_feat: int = 16
    hold_still_prob: float = 0.125


def episode_seed(seed: int, episode_index: int) -> int:
    return int(np.random.SeedSequence([seed, episode_index]).generate_state(1)[0])


def expected_window_count(length: int, horizon: int, stride: int) -> int:
    return 0 if length < horizon else (length - horizon) // stride + 1


def preprocess(cfg: PreprocessConfig, out_dir: str | Path) -> ShardManifest:
    def windows() -> Iterator[WindowSample]:
        for ep_idx in range(cfg.episode_start, cfg.episode_start + cfg.episodes):
            ep = generate_synthetic_episode(
                episode_seed(cfg.seed, ep_idx),
                cfg.episode_length,
                cfg.action_dim,
                cfg.state_dim,
                episode_index=ep_idx,
                horizon_T=cfg.horizon,
                n_feat=cfg.n_feat,
                d_feat=cfg.d_feat,
                hold_still_prob=cfg.hold_still_prob,
            )
            yield from build_windows(ep, cfg.horizon, cfg.stride, cfg.chunk)

    counts = {"windows": 0, "filtered": 0}

    def retained() -> Iterator[WindowSample]:
        for w in windows():
            counts["windows"] += 1
            if w.avg_action_l2 >= cfg.min_action_norm:
                yield w
            else:
                counts["filtered"] += 1

    hyper = {
        "horizon_T": cfg.horizon,
        "stride": cfg.stride,
        "chunk": cfg.chunk,
        "min_action_norm": cfg.min_action_norm,
        "seed": cfg.seed,
        "episode_start": cfg.episode_start,
        "episode_length": cfg.episode_length,
        "action_dim": cfg.action_dim,
        "state_dim": cfg.state_dim,
        "n_feat": cfg.n_feat,
        "d_feat": cfg.d_feat,
        "hold_still_prob": cfg.hold_still_prob,
        "objects": list(OBJECTS),
    }
    writer = ShardWriter(out_dir, cfg.shard_size)
    for s in retained():
        writer.add(s)
    return _finish(
        writer,
        episode_count=cfg.episodes,
        window_count=counts["windows"],
        filtered_count=counts["filtered"],
        hyperparameters=hyper,
    )


__all__ = [
    "Episode", "Frame", "WindowSample", "ShardManifest", "ShardWriter", "RetryPolicy",
    "PreprocessConfig", "generate_synthetic_episode", "build_windows", "compute_action_stats",
    "filter_static", "write_shards", "iterate_shards", "load_manifest", "load_samples",
    "preprocess", "expected_window_count", "episode_seed",
]
