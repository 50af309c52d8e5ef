import filecmp
import math

import pytest
import torch

from sigma_vla import tensorio
from sigma_vla.config import read_json
from sigma_vla.errors import ConfigurationError, IntegrityError, PermanentReadError, TransientReadError
from sigma_vla.numerics import DTYPE
from sigma_vla.shards import (
    MANIFEST,
    Episode,
    Frame,
    PreprocessConfig,
    RetryPolicy,
    ShardWriter,
    build_windows,
    compute_action_stats,
    expected_window_count,
    filter_static,
    generate_synthetic_episode,
    iterate_shards,
    load_manifest,
    load_samples,
    preprocess,
    write_shards,
)
from sigma_vla.vocab import HOLD_STILL, command_templates

from conftest import random_sample


def toy_episode(length, A=2):
    frames = [
        Frame(t, torch.full((2, 3), float(t), dtype=DTYPE), torch.full((A,), float(t), dtype=DTYPE),
              torch.full((A,), 0.1 * t, dtype=DTYPE), "pick up the red cube")
        for t in range(length)
    ]
    return Episode(7, frames)


def same_sample(a, b):
    for name in ("vision_inputs", "robot_state", "gt_action_vector", "gt_action_chunk", "gt_action_trajectory",
                 "base_action_vector", "base_action_chunk", "base_action_trajectory"):
        x, y = getattr(a, name), getattr(b, name)
        if (x is None) != (y is None):
            return False
        if x is not None and not (x.shape == y.shape and torch.equal(x, y)):
            return False
    return (a.text, a.avg_action_l2, a.max_action_l2, a.episode_index, a.window_start) == (
        b.text, b.avg_action_l2, b.max_action_l2, b.episode_index, b.window_start)


def dirs_identical(a, b):
    names_a = sorted(p.name for p in a.iterdir())
    names_b = sorted(p.name for p in b.iterdir())
    if names_a != names_b:
        return False
    return all(filecmp.cmp(a / n, b / n, shallow=False) for n in names_a)


# -- synthetic episodes ---------------------------------------------------------


def test_episode_is_deterministic():
    a = generate_synthetic_episode(5, 40)
    b = generate_synthetic_episode(5, 40)
    assert a.text == b.text
    for fa, fb in zip(a.frames, b.frames):
        assert torch.equal(fa.vision_features, fb.vision_features)
        assert torch.equal(fa.robot_state, fb.robot_state)
        assert torch.equal(fa.action, fb.action)


@pytest.mark.parametrize("seed", range(5))
def test_actions_integrate_states(seed):
    ep = generate_synthetic_episode(seed, 48, command="pick up the blue block and place it on the left")
    for f0, f1 in zip(ep.frames, ep.frames[1:]):
        assert torch.allclose(f0.robot_state + f0.action, f1.robot_state, atol=1e-9, rtol=0)


def test_hold_still_has_zero_motion():
    ep = generate_synthetic_episode(1, 32, command=HOLD_STILL)
    windows = build_windows(ep, 16)
    assert all(w.avg_action_l2 < 1e-12 for w in windows)
    assert filter_static(windows, 1e-9)[1] == len(windows)


def test_short_episode_rejected():
    with pytest.raises(ConfigurationError):
        generate_synthetic_episode(0, 10, horizon_T=16)


def test_episode_shapes_and_single_command():
    ep = generate_synthetic_episode(2, 20, n_feat=4, d_feat=7)
    assert ep.frames[0].vision_features.shape == (4, 7)
    assert len({f.text for f in ep.frames}) == 1
    assert ep.text in command_templates()


# -- windowing -------------------------------------------------------------------


def test_window_boundaries():
    assert len(build_windows(toy_episode(16), 16, chunk=4)) == 1
    assert build_windows(toy_episode(15), 16, chunk=4) == []


def test_window_starts_enumeration():
    windows = build_windows(toy_episode(20), 16, stride=2, chunk=4)
    assert [w.window_start for w in windows] == [0, 2, 4]


@pytest.mark.parametrize("length,T,stride", [(20, 16, 2), (64, 16, 1), (64, 16, 5), (33, 7, 3), (7, 7, 4)])
def test_window_count_matches_enumeration(length, T, stride):
    enumerated = [s for s in range(length) if s + T <= length and s % stride == 0]
    got = build_windows(toy_episode(length), T, stride=stride, chunk=min(4, T))
    assert [w.window_start for w in got] == enumerated
    assert expected_window_count(length, T, stride) == len(enumerated)


def test_window_views_are_consistent():
    ep = generate_synthetic_episode(3, 40)
    for w in build_windows(ep, 16, chunk=8):
        assert torch.equal(w.gt_action_vector, w.gt_action_trajectory[0])
        assert torch.equal(w.gt_action_chunk, w.gt_action_trajectory[:8])
        assert w.avg_action_l2 <= w.max_action_l2


def test_unsorted_frames_are_sorted():
    ep = toy_episode(18)
    ep.frames.reverse()
    windows = build_windows(ep, 16, chunk=4)
    assert windows[0].robot_state[0, 0].item() == 0.0


def test_action_stats_cases():
    assert compute_action_stats(torch.zeros(4, 3, dtype=DTYPE)) == (0.0, 0.0)
    assert compute_action_stats(torch.tensor([[3.0, 4.0], [0.0, 0.0]], dtype=DTYPE)) == (2.5, 5.0)


def test_action_stats_loop_oracle():
    a = torch.randn(16, 6, generator=torch.Generator().manual_seed(9), dtype=DTYPE)
    norms = [math.sqrt(sum(v * v for v in row)) for row in a.tolist()]
    avg, mx = compute_action_stats(a)
    assert abs(avg - sum(norms) / len(norms)) < 1e-15
    assert mx == max(norms)


def test_filter_static_partition():
    g = torch.Generator().manual_seed(0)
    windows = [random_sample(g) for _ in range(40)]
    for i, w in enumerate(windows):
        w.avg_action_l2 = (i % 7) * 0.01
    kept, dropped = filter_static(windows, 0.03)
    oracle = [w for w in windows if w.avg_action_l2 >= 0.03]
    assert kept == oracle and dropped == len(windows) - len(oracle)
    assert filter_static(windows, 0.0) == (windows, 0)
    w = windows[1]
    w.avg_action_l2 = 0.01
    assert filter_static([w], 0.05) == ([], 1)


# -- shards ----------------------------------------------------------------------


def test_round_trip_bit_exact(tmp_path):
    g = torch.Generator().manual_seed(42)
    samples = [random_sample(g, optional=(i % 5 == 0)) for i in range(500)]
    write_shards(samples, 64, tmp_path)
    back = list(iterate_shards(tmp_path))
    assert len(back) == 500
    assert all(same_sample(a, b) for a, b in zip(samples, back))


def test_shard_sizes(tmp_path):
    g = torch.Generator().manual_seed(1)
    m = write_shards([random_sample(g) for _ in range(7)], 3, tmp_path)
    assert [s["count"] for s in m.shards] == [3, 3, 1]
    assert [s["file"] for s in m.shards] == ["shard_00000.shard", "shard_00001.shard", "shard_00002.shard"]


def test_zero_samples(tmp_path):
    m = write_shards([], 4, tmp_path)
    assert m.shards == [] and m.retained_count == 0
    assert sorted(p.name for p in tmp_path.iterdir()) == [MANIFEST]
    assert list(iterate_shards(tmp_path)) == []


class Interrupt(Exception):
    pass


def interrupted(samples, after):
    for i, s in enumerate(samples):
        if i == after:
            raise Interrupt
        yield s


def test_resume_skip_count(tmp_path):
    g = torch.Generator().manual_seed(3)
    samples = [random_sample(g) for _ in range(10)]
    with pytest.raises(Interrupt):
        write_shards(interrupted(samples, 7), 3, tmp_path)
    assert not (tmp_path / MANIFEST).exists()
    w = ShardWriter(tmp_path, 3)
    assert (w.skip_count, w.next_index) == (6, 2)


@pytest.mark.parametrize("cut", [0, 4, 9, 12, 25])
def test_resumed_write_is_byte_identical(tmp_path, cut):
    g = torch.Generator().manual_seed(4)
    samples = [random_sample(g) for _ in range(25)]
    ref, resumed = tmp_path / "ref", tmp_path / "resumed"
    write_shards(samples, 4, ref, episode_count=3)
    if cut < len(samples):
        with pytest.raises(Interrupt):
            write_shards(interrupted(samples, cut), 4, resumed, episode_count=3)
    write_shards(samples, 4, resumed, episode_count=3)
    assert dirs_identical(ref, resumed)


def test_corrupt_existing_shard_named(tmp_path):
    g = torch.Generator().manual_seed(5)
    write_shards([random_sample(g) for _ in range(6)], 3, tmp_path)
    bad = tmp_path / "shard_00001.shard"
    bad.write_bytes(bad.read_bytes()[:-8])
    with pytest.raises(IntegrityError, match="shard_00001"):
        ShardWriter(tmp_path, 3)


def test_manifest_counts(tmp_path):
    m = preprocess(PreprocessConfig(episodes=3, episode_length=24, shard_size=5), tmp_path)
    assert m.retained_count + m.filtered_count == m.window_count
    assert m.window_count == 3 * expected_window_count(24, 16, 1)
    assert sum(s["count"] for s in m.shards) == m.retained_count
    assert read_json(tmp_path / MANIFEST)["hyperparameters"]["shard_size"] == 5
    assert all(s.avg_action_l2 >= 0.01 for s in load_samples(tmp_path))


def test_preprocess_rerun_is_byte_identical(tmp_path):
    cfg = PreprocessConfig(episodes=3, episode_length=24, shard_size=7)
    preprocess(cfg, tmp_path / "a")
    preprocess(cfg, tmp_path / "b")
    preprocess(cfg, tmp_path / "b")  # rerun over a complete directory
    assert dirs_identical(tmp_path / "a", tmp_path / "b")


def test_no_filter_when_threshold_zero(tmp_path):
    m = preprocess(PreprocessConfig(episodes=4, episode_length=20, min_action_norm=0.0), tmp_path)
    assert m.filtered_count == 0


# -- retries ---------------------------------------------------------------------


class Flaky:
    def __init__(self, failures):
        self.failures = failures
        self.calls = 0

    def __call__(self, path):
        self.calls += 1
        if self.failures > 0:
            self.failures -= 1
            raise TransientReadError("rate limited")
        return path.read_bytes()


def test_transient_failures_recovered(tmp_path):
    g = torch.Generator().manual_seed(6)
    samples = [random_sample(g) for _ in range(5)]
    write_shards(samples, 2, tmp_path)
    slept = []
    flaky = Flaky(2)
    got = list(iterate_shards(tmp_path, RetryPolicy(max_retries=3, base_delay=0.5, sleep=slept.append), flaky))
    assert all(same_sample(a, b) for a, b in zip(samples, got)) and len(got) == 5
    assert slept == [0.5, 1.0]


def test_retry_exhaustion(tmp_path):
    g = torch.Generator().manual_seed(7)
    write_shards([random_sample(g)], 2, tmp_path)
    flaky = Flaky(10)
    with pytest.raises(PermanentReadError):
        list(iterate_shards(tmp_path, RetryPolicy(max_retries=1, sleep=lambda s: None), flaky))
    assert flaky.calls == 2  # the first attempt plus one retry


def test_manifest_shard_mismatch(tmp_path):
    g = torch.Generator().manual_seed(8)
    write_shards([random_sample(g) for _ in range(4)], 2, tmp_path)
    (tmp_path / "shard_00001.shard").unlink()
    with pytest.raises(IntegrityError):
        list(iterate_shards(tmp_path))


def test_payload_tamper_detected(tmp_path):
    path = tmp_path / "w.tensors"
    tensorio.save_tensors(path, {"a": torch.ones(3, dtype=DTYPE), "s": torch.tensor(2.0, dtype=DTYPE)})
    tensors, _ = tensorio.load_tensors(path)
    assert tensors["s"].shape == ()
    data = bytearray(path.read_bytes())
    data[-1] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(IntegrityError, match="checksum"):
        tensorio.load_tensors(path)


def test_load_manifest_missing(tmp_path):
    with pytest.raises(IntegrityError):
        load_manifest(tmp_path)
