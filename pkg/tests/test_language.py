import json

import pytest
import torch

from sigma_vla.config import tiny_config
from sigma_vla.errors import DimensionError, VocabularyError
from sigma_vla.language import LanguageWorkspace, TextEncoder
from sigma_vla.numerics import DTYPE
from sigma_vla.vocab import PAD, Vocabulary, command_templates

from conftest import FIXTURES, gradient_error

D_MODEL = 8


@pytest.fixture
def ws():
    torch.manual_seed(0)
    return LanguageWorkspace(tiny_config())


@pytest.fixture(scope="module")
def text():
    return TextEncoder(Vocabulary.default(), D_MODEL, 3, seed=5)


def hidden_of(ws, n_t=3, n_v=2, n_s=2, seed=0):
    g = torch.Generator().manual_seed(seed)
    parts = [torch.randn(n, D_MODEL, generator=g, dtype=DTYPE) for n in (n_t, n_v, n_s)]
    return ws.backbone_forward(*parts), parts


def zero(module):
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()


# -- text ------------------------------------------------------------------------


def test_text_deterministic_and_padded(text):
    a = text("hold still")
    b = text("hold still")
    assert torch.equal(a, b)
    c = text("put the red cube on the left")
    # the third slot of "hold still" is padding; every pad row is the same vector
    assert torch.equal(a[2], text.projection[0])
    assert a.shape == c.shape == (3, D_MODEL)


def test_one_hot_picks_projection_row(text):
    idx = text.vocab.index["cube"]
    one = torch.zeros(len(text.vocab), dtype=DTYPE)
    one[idx] = 1.0
    assert torch.equal(one @ text.projection, text.projection[idx])


def test_unknown_word_listed(text):
    with pytest.raises(VocabularyError, match="banana"):
        text("pick up the banana")


def test_projection_is_not_trainable(text):
    assert list(text.parameters()) == []


def test_vocabulary_file_round_trip(tmp_path):
    v = Vocabulary.default()
    v.save(tmp_path / "vocab.txt")
    lines = (tmp_path / "vocab.txt").read_text().splitlines()
    assert lines[0] == PAD
    w = Vocabulary.load(tmp_path / "vocab.txt")
    assert w.words == v.words
    assert all(w.encode(c, 12) == v.encode(c, 12) for c in command_templates())


# -- backbone --------------------------------------------------------------------


def test_backbone_length_and_segments(ws):
    hidden, _ = hidden_of(ws, 3, 5, 2)
    assert hidden.tokens.shape == (10, D_MODEL)
    assert hidden.segments == (3, 5, 2)
    assert hidden.segment(1).shape == (5, D_MODEL)


def test_backbone_residual_identity(ws):
    for block in ws.blocks:
        for proj in (block.attn.q_proj, block.attn.k_proj, block.attn.v_proj, block.attn.o_proj):
            zero(proj)
        zero(block.ffn)
    hidden, parts = hidden_of(ws)
    expected = torch.cat([p + ws.segment_emb[i] for i, p in enumerate(parts)])
    assert torch.equal(hidden.tokens, expected)


def test_backbone_width_checked(ws):
    with pytest.raises(DimensionError):
        ws.backbone_forward(torch.zeros(2, 5, dtype=DTYPE), torch.zeros(2, 8, dtype=DTYPE), torch.zeros(2, 8, dtype=DTYPE))


# -- semantic factors and memory ---------------------------------------------------


def test_semantic_factor_shapes(ws):
    for n_v in (1, 4):
        hidden, _ = hidden_of(ws, 2, n_v, 1)
        z, A = ws.read_semantic_factors(hidden, return_weights=True)
        assert z.shape == (2, D_MODEL)
        assert torch.allclose(A.sum(-1), torch.ones_like(A.sum(-1)), atol=1e-12, rtol=0)


def test_single_token_factor_is_value_projection(ws):
    tok = torch.randn(1, D_MODEL, dtype=DTYPE)
    from sigma_vla.language import HiddenSequence

    z = ws.read_semantic_factors(HiddenSequence(tok, (1, 0, 0)))
    v = ws.sem_attn.v_proj(tok)
    assert torch.allclose(z, v.expand(2, D_MODEL), atol=1e-15)


def test_z_pool_is_row_mean(ws):
    hidden, _ = hidden_of(ws)
    st = ws.think(hidden, torch.zeros(D_MODEL, dtype=DTYPE))
    assert torch.equal(st.z_pool, st.z_sem.mean(dim=-2))


def test_memory_gate_limits(ws):
    m_prev = torch.randn(D_MODEL, dtype=DTYPE)
    z = torch.randn(D_MODEL, dtype=DTYPE)
    with torch.no_grad():
        ws.mem_gate.weight.zero_()
        ws.mem_gate.bias.fill_(40.0)
    m, lam = ws.update_memory(m_prev, z)
    assert (m - m_prev).abs().max() < 1e-12
    with torch.no_grad():
        ws.mem_gate.bias.fill_(-40.0)
    m, _ = ws.update_memory(m_prev, z)
    u = torch.nn.functional.gelu(ws.mem_u(z), approximate="tanh")
    assert (m - u).abs().max() < 1e-12


@pytest.mark.parametrize("seed", range(20))
def test_memory_is_convex_and_contracting(ws, seed):
    g = torch.Generator().manual_seed(seed)
    m_prev = 3 * torch.randn(D_MODEL, generator=g, dtype=DTYPE)
    z = torch.randn(D_MODEL, generator=g, dtype=DTYPE)
    m, lam = ws.update_memory(m_prev, z)
    from sigma_vla import numerics as nx

    u = nx.gelu(ws.mem_u(z))
    lo, hi = torch.minimum(m_prev, u), torch.maximum(m_prev, u)
    assert ((m >= lo - 1e-12) & (m <= hi + 1e-12)).all()
    assert ((lam > 0) & (lam < 1)).all()
    assert (m - u).norm() <= lam.max() * (m_prev - u).norm() + 1e-12


# -- summaries, intent, telepathy ------------------------------------------------


def test_summaries_independent(ws):
    hidden, _ = hidden_of(ws)
    env, beh, txt = ws.summarize(hidden)
    assert env.shape == beh.shape == txt.shape == (D_MODEL,)
    with torch.no_grad():
        for p in ws.sum_env.parameters():
            p.add_(0.5)
    env2, beh2, txt2 = ws.summarize(hidden)
    assert not torch.equal(env, env2)
    assert torch.equal(beh, beh2) and torch.equal(txt, txt2)


def test_pool_weights_sum_to_one(ws):
    hidden, _ = hidden_of(ws)
    for head, toks in ((ws.sum_env, hidden.tokens), (ws.sum_beh, hidden.tokens), (ws.sum_text, hidden.segment(0))):
        _, w = head(toks, return_weights=True)
        assert abs(w.sum().item() - 1.0) < 1e-12
        assert w.shape == (toks.shape[0],)


def test_text_summary_sees_only_text(ws):
    hidden, _ = hidden_of(ws)
    tokens = hidden.tokens.clone()
    tokens[3:] += 5.0
    from sigma_vla.language import HiddenSequence

    _, _, a = ws.summarize(hidden)
    _, _, b = ws.summarize(HiddenSequence(tokens, hidden.segments))
    assert torch.equal(a, b)


def test_intent_zero_and_shape(ws):
    zero(ws.intent)
    z = torch.zeros(D_MODEL, dtype=DTYPE)
    assert torch.equal(ws.infer_intent(z, z, z), z)


def test_project_telepathy_zero(ws):
    with torch.no_grad():
        ws.tele_proj.fc1.bias.zero_()
        ws.tele_proj.fc2.bias.zero_()
    z = torch.zeros(D_MODEL, dtype=DTYPE)
    assert torch.equal(ws.project_telepathy(z, z, z, z, z, z), torch.zeros(4, dtype=DTYPE))


def test_project_telepathy_golden():
    import sys

    sys.path.insert(0, str(FIXTURES))
    try:
        from make_golden import NAMES, build
    finally:
        sys.path.pop(0)
    golden = json.loads((FIXTURES / "project_telepathy_golden.json").read_text())
    ws, _ = build()
    inputs = {n: torch.tensor(golden["inputs"][n], dtype=DTYPE) for n in NAMES}
    expected = torch.tensor(golden["tau"], dtype=DTYPE)
    with torch.no_grad():
        tau = ws.project_telepathy(*(inputs[n] for n in NAMES))
        swapped = ws.project_telepathy(*(inputs[n] for n in ("z_intent", "m_t") + NAMES[2:]))
    assert torch.allclose(tau, expected, atol=1e-12, rtol=0)
    assert not torch.allclose(swapped, expected, atol=1e-9, rtol=0)


# -- modulation --------------------------------------------------------------------


def test_modulation_gate_closed(ws):
    hidden, _ = hidden_of(ws)
    with torch.no_grad():
        ws.theta_lm.fill_(-40.0)
    tau = torch.randn(4, dtype=DTYPE)
    assert (ws.modulate_language(hidden, tau) - ws.high_level(hidden)).abs().max() < 1e-12


def test_modulation_zero_tau_exact(ws):
    hidden, _ = hidden_of(ws)
    with torch.no_grad():
        ws.theta_lm.fill_(1.0)
    assert torch.equal(ws.modulate_language(hidden, torch.zeros(4, dtype=DTYPE)), ws.high_level(hidden))


# -- gradients ---------------------------------------------------------------------


def test_language_gradients_all_groups(ws):
    g = torch.Generator().manual_seed(3)
    parts = [torch.randn(n, D_MODEL, generator=g, dtype=DTYPE) for n in (3, 2, 2)]
    m_prev = torch.randn(D_MODEL, generator=g, dtype=DTYPE)
    ws.eval()  # LoRA dropout off

    def loss():
        hidden = ws.backbone_forward(*parts)
        st = ws.think(hidden, m_prev)
        n_high = ws.modulate_language(hidden, st.tau)
        return (n_high ** 2).mean() + st.tau.sum() + (st.m * st.z_intent).sum() + st.c_text.sum()

    # LoRA base weights are detached by design; they are covered below
    params = {n: p for n, p in ws.named_parameters() if ".base." not in n}
    err, where = gradient_error(loss, params, per_tensor=3)
    assert err < 1e-4, where


def test_lora_base_weights_receive_no_gradient(ws):
    from sigma_vla import numerics as nx

    g = torch.Generator().manual_seed(4)
    parts = [torch.randn(n, D_MODEL, generator=g, dtype=DTYPE) for n in (3, 2, 2)]
    base = {n: p for n, p in ws.named_parameters() if ".base." in n}
    assert base
    for p in base.values():
        p.requires_grad_(True)
    loss = ws.high_level(ws.backbone_forward(*parts)).sum()
    grads = nx.gradient_of(loss, base)
    assert all(torch.equal(v, torch.zeros_like(v)) for v in grads.values())
