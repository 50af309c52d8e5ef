import pytest
import torch

from sigma_vla.config import tiny_config
from sigma_vla.errors import DimensionError, InputError
from sigma_vla.numerics import DTYPE
from sigma_vla.vision import FilmModulator, VisionWorkspace

from conftest import gradient_error


@pytest.fixture
def ws():
    torch.manual_seed(0)
    return VisionWorkspace(tiny_config())


def zero_params(module):
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()


def test_encode_state_zero_in_zero_out(ws):
    zero_params(ws.state_mlp)
    with torch.no_grad():
        ws.expand_b.zero_()
    out = ws.encode_state(torch.zeros(3, dtype=DTYPE))
    assert torch.equal(out, torch.zeros(2, 8, dtype=DTYPE))


def test_encode_state_shape_and_error(ws):
    assert ws.encode_state(torch.randn(5, 3, dtype=DTYPE)).shape == (5, 2, 8)
    with pytest.raises(DimensionError):
        ws.encode_state(torch.zeros(4, dtype=DTYPE))


def test_encode_state_gradient(ws):
    x = torch.randn(3, dtype=DTYPE)
    params = dict(ws.state_mlp.named_parameters())
    err, where = gradient_error(lambda: ws.encode_state(x).sum(), params)
    assert err < 1e-4, where


@pytest.mark.parametrize("n_f", [1, 5, 12])
def test_resample_fixed_budget(ws, n_f):
    out, A = ws.resample(torch.randn(n_f, 8, dtype=DTYPE), return_weights=True)
    assert out.shape == (2, 8)
    assert torch.allclose(A.sum(-1), torch.ones(2, dtype=DTYPE), atol=1e-12, rtol=0)


def test_resample_single_feature(ws):
    _, A = ws.resample(torch.randn(1, 8, dtype=DTYPE), return_weights=True)
    assert torch.equal(A, torch.ones(2, 1, dtype=DTYPE))


def test_resample_rejects_empty(ws):
    with pytest.raises(InputError):
        ws.resample(torch.zeros(0, 8, dtype=DTYPE))


def test_film_gate_closed():
    torch.manual_seed(1)
    film = FilmModulator(4, 8, theta_mod=-40.0)
    v = torch.randn(3, 8, dtype=DTYPE)
    v_mod, *_ = film(v, torch.randn(4, dtype=DTYPE))
    assert (v_mod - v).abs().max() < 1e-12


def test_film_identity_when_gamma_one_beta_zero():
    torch.manual_seed(2)
    film = FilmModulator(4, 8, theta_mod=0.5)
    with torch.no_grad():
        film.fc2.weight.zero_()
        film.fc2.bias[:8] = 1.0
        film.fc2.bias[8:] = 0.0
    v = torch.randn(3, 8, dtype=DTYPE)
    v_mod, gamma, beta = film(v, torch.randn(4, dtype=DTYPE))
    assert torch.equal(v_mod, v)


def test_film_interpolates():
    torch.manual_seed(3)
    film = FilmModulator(4, 8, theta_tau=0.3, theta_mod=-0.7)
    v = torch.randn(5, 8, dtype=DTYPE)
    tau = torch.randn(4, dtype=DTYPE)
    v_mod, gamma, beta = film(v, tau)
    g = torch.exp(torch.tensor(-0.7, dtype=DTYPE))
    v_film = gamma * v + beta
    assert torch.allclose(v_mod, (1 - g) * v + g * v_film, atol=1e-14, rtol=0)


def test_film_channelwise_under_token_permutation():
    torch.manual_seed(4)
    film = FilmModulator(4, 8, theta_mod=0.0)
    v = torch.randn(6, 8, dtype=DTYPE)
    tau = torch.randn(4, dtype=DTYPE)
    perm = torch.randperm(6)
    a, *_ = film(v, tau)
    b, *_ = film(v[perm], tau)
    assert torch.equal(a[perm], b)


def test_film_rejects_wrong_tau(ws):
    with pytest.raises(DimensionError):
        ws.film_modulate(torch.zeros(2, 8, dtype=DTYPE), torch.zeros(5, dtype=DTYPE))


def test_refine_shape_and_residual_identity(ws):
    v = torch.randn(2, 8, dtype=DTYPE)
    assert ws.refine(v).shape == (2, 8)
    for block in ws.blocks:
        zero_params(block.attn)
        zero_params(block.ffn)
    assert torch.equal(ws.refine(v), v)


def test_forward_bypass_without_tau(ws):
    tokens, _ = ws(torch.randn(3, 4, dtype=DTYPE))
    assert tokens.modulated is tokens.base and tokens.gamma is None


def test_vision_gradients_all_groups(ws):
    feats = torch.randn(3, 4, dtype=DTYPE)
    tau = torch.randn(4, dtype=DTYPE)

    def loss():
        tokens, out = ws(feats, tau)
        return (out ** 2).mean() + ws.encode_state(torch.ones(3, dtype=DTYPE)).sum()

    err, where = gradient_error(loss, dict(ws.named_parameters()), per_tensor=3)
    assert err < 1e-4, where
