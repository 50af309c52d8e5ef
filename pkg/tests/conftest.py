from pathlib import Path

import pytest
import torch

from sigma_vla.config import tiny_config
from sigma_vla.numerics import DTYPE
from sigma_vla.policy import build_policy, collate
from sigma_vla.shards import PreprocessConfig, WindowSample, preprocess
from sigma_vla.vocab import command_templates

FIXTURES = Path(__file__).parent / "fixtures"


def random_sample(g: torch.Generator, T=6, C=3, A=4, S=4, n_feat=3, d_feat=5, optional=False) -> WindowSample:
    traj = torch.randn(T, A, generator=g, dtype=DTYPE)
    norms = traj.norm(dim=1)
    cmds = command_templates()
    kw = {}
    if optional:
        kw = dict(
            base_action_vector=torch.randn(A, generator=g, dtype=DTYPE),
            base_action_chunk=torch.randn(C, A, generator=g, dtype=DTYPE),
            base_action_trajectory=torch.randn(T, A, generator=g, dtype=DTYPE),
        )
    return WindowSample(
        vision_inputs=torch.randn(T, n_feat, d_feat, generator=g, dtype=DTYPE),
        robot_state=torch.randn(T, S, generator=g, dtype=DTYPE),
        gt_action_vector=traj[0].clone(),
        gt_action_chunk=traj[:C].clone(),
        gt_action_trajectory=traj,
        text=cmds[int(torch.randint(len(cmds), (1,), generator=g))],
        avg_action_l2=float(norms.mean()),
        max_action_l2=float(norms.max()),
        episode_index=int(torch.randint(100, (1,), generator=g)),
        window_start=int(torch.randint(50, (1,), generator=g)),
        **kw,
    )


def tiny_sample_batch(cfg, n: int, seed: int = 0):
    """A collated batch matching a tiny model config."""
    g = torch.Generator().manual_seed(seed)
    samples = [
        random_sample(g, T=cfg.horizon, C=cfg.chunk, A=cfg.action_dim, S=cfg.state_dim,
                      n_feat=cfg.n_feat, d_feat=cfg.d_feat)
        for _ in range(n)
    ]
    return collate(samples)


@pytest.fixture(scope="session")
def tiny_cfg():
    return tiny_config()


@pytest.fixture
def tiny_policy(tiny_cfg):
    return build_policy(tiny_cfg, seed=0)


@pytest.fixture(scope="session")
def small_shards(tmp_path_factory):
    """A handful of real synthetic episodes in default model dimensions."""
    out = tmp_path_factory.mktemp("shards")
    preprocess(PreprocessConfig(episodes=4, episode_length=32, shard_size=32), out)
    return out


def sampled_entries(params, per_tensor: int, seed: int = 0) -> dict:
    """A few flat indices per tensor (all of them for small tensors)."""
    g = torch.Generator().manual_seed(seed)
    out = {}
    for name, p in params.items():
        n = p.numel()
        out[name] = list(range(n)) if n <= per_tensor else torch.randperm(n, generator=g)[:per_tensor].tolist()
    return out


def gradient_error(loss_fn, params, per_tensor: int = 4, seed: int = 0, h: float = 1e-5) -> tuple[float, str]:
    """Worst relative error between reverse mode and central differences, and where it occurred."""
    from sigma_vla import numerics as nx

    for p in params.values():
        p.requires_grad_(True)
    rev = nx.gradient_of(loss_fn(), params)
    entries = sampled_entries(params, per_tensor, seed)
    fd = nx.finite_diff_gradient(loss_fn, params, h=h, entries=entries)
    worst, where = 0.0, ""
    for name, idx in entries.items():
        if not idx:
            continue
        err = nx.max_relative_error(rev[name].reshape(-1)[idx], fd[name])
        if err > worst:
            worst, where = err, name
    return worst, where


def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance PASS/FAIL lines at the end of the run."""
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
