"""Dense float64 math substrate: affine maps, attention, activations, norms,
and gradient evaluation (reverse mode plus a central-difference oracle).

Reverse-mode accumulation is delegated to ``torch.autograd``; everything else
here is written out explicitly so the formulas stay visible and stable.
"""

from __future__ import annotations

import math
from collections.abc import Callable, Iterator, Mapping, Sequence

import torch
from torch import Tensor, nn

from .errors import ConfigurationError, ContractError, DimensionError, InputError

DTYPE = torch.float64
LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


def as_tensor(x, dtype: torch.dtype = DTYPE) -> Tensor:
    if isinstance(x, Tensor):
        return x.to(dtype)
    return torch.as_tensor(x, dtype=dtype)


def affine(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ W + b`` over the last dimension of ``x`` (leading dims broadcast)."""
    if x.shape[-1] != W.shape[0]:
        raise DimensionError(
            f"affine: inner dimensions disagree, x{tuple(x.shape)} vs W{tuple(W.shape)}"
        )
    if b is not None and b.shape[-1] != W.shape[-1]:
        raise DimensionError(
            f"affine: bias b{tuple(b.shape)} does not match W{tuple(W.shape)}"
        )
    out = x @ W
    return out if b is None else out + b


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis with per-row max subtraction."""
    shifted = x - x.max(dim=-1, keepdim=True).values
    e = torch.exp(shifted)
    return e / e.sum(dim=-1, keepdim=True)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))."""
    return 0.5 * x * (1.0 + torch.tanh(_GELU_C * (x + 0.044715 * x * x * x)))


def sigmoid(x: Tensor) -> Tensor:
    return torch.sigmoid(x)


def layer_norm(x: Tensor, g: Tensor, b: Tensor, eps: float = LN_EPS) -> Tensor:
    if x.shape[-1] != g.shape[-1] or x.shape[-1] != b.shape[-1]:
        raise DimensionError(
            f"layer_norm: row length {x.shape[-1]} vs gain {tuple(g.shape)} / bias {tuple(b.shape)}"
        )
    mean = x.mean(dim=-1, keepdim=True)
    centered = x - mean
    var = (centered * centered).mean(dim=-1, keepdim=True)
    return centered / torch.sqrt(var + eps) * g + b


def attention_weights(Q: Tensor, K: Tensor, heads: int) -> Tensor:
    """Per-head softmax(QKᵀ/√(d/heads)); shape ``[..., heads, q, k]``."""
    d = Q.shape[-1]
    if d % heads != 0:
        raise ConfigurationError(f"model width {d} is not divisible by heads={heads}")
    if K.shape[-1] != d:
        raise DimensionError(f"attention: query width {d} vs key width {K.shape[-1]}")
    if K.shape[-2] == 0:
        raise InputError("attention over an empty key sequence")
    dh = d // heads
    q = _split_heads(Q, heads)
    k = _split_heads(K, heads)
    scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
    return softmax_rows(scores)


def cross_attention(
    Q: Tensor,
    K: Tensor,
    V: Tensor,
    heads: int,
    out_proj: Callable[[Tensor], Tensor] | None = None,
    return_weights: bool = False,
):
    """Multi-head scaled dot-product attention over already-projected Q, K, V.

    Heads are concatenated and passed through ``out_proj`` when one is given.
    """
    if K.shape[-2] != V.shape[-2]:
        raise DimensionError(f"attention: {K.shape[-2]} keys vs {V.shape[-2]} values")
    if V.shape[-1] % heads != 0:
        raise ConfigurationError(f"value width {V.shape[-1]} is not divisible by heads={heads}")
    A = attention_weights(Q, K, heads)
    out = _merge_heads(A @ _split_heads(V, heads))
    if out_proj is not None:
        out = out_proj(out)
    return (out, A) if return_weights else out


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, d = x.shape
    return x.reshape(*lead, n, heads, d // heads).transpose(-2, -3)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, dh = x.shape
    return x.transpose(-2, -3).reshape(*lead, n, h * dh)


def safe_norm(x: Tensor, dim: int = -1) -> Tensor:
    """Euclidean norm with a zero (not NaN) gradient at the origin."""
    sq = (x * x).sum(dim=dim)
    pos = sq > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))), torch.zeros_like(sq))


def cosine(a: Tensor, b: Tensor, dim: int = -1) -> Tensor:
    """Cosine similarity; defined as 0 whenever either side is the zero vector."""
    na = safe_norm(a, dim)
    nb = safe_norm(b, dim)
    ok = (na > 0) & (nb > 0)
    denom = torch.where(ok, na * nb, torch.ones_like(na))
    return torch.where(ok, (a * b).sum(dim=dim) / denom, torch.zeros_like(na))


class ParamStore(Mapping[str, Tensor]):
    """Named parameter tensors with a trainable flag per entry."""

    def __init__(self, params: Mapping[str, Tensor] | None = None, trainable: Mapping[str, bool] | None = None):
        self._params: dict[str, Tensor] = {}
        self._trainable: dict[str, bool] = {}
        for name, p in (params or {}).items():
            self.add(name, p, (trainable or {}).get(name, p.requires_grad))

    @classmethod
    def from_module(cls, module: nn.Module, only_trainable: bool = False) -> "ParamStore":
        store = cls()
        for name, p in module.named_parameters():
            if only_trainable and not p.requires_grad:
                continue
            store.add(name, p, p.requires_grad)
        return store

    def add(self, name: str, tensor: Tensor, trainable: bool = True) -> Tensor:
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        self._params[name] = tensor
        self._trainable[name] = bool(trainable)
        return tensor

    def add_scalar(self, name: str, value: float, trainable: bool = True) -> Tensor:
        p = nn.Parameter(torch.tensor(float(value), dtype=DTYPE), requires_grad=trainable)
        return self.add(name, p, trainable)

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def trainable_names(self) -> list[str]:
        return [n for n, t in self._trainable.items() if t]

    def subset(self, names: Sequence[str]) -> "ParamStore":
        return ParamStore({n: self._params[n] for n in names}, {n: self._trainable[n] for n in names})

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)


def gradient_of(loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, Tensor]:
    """Exact reverse-mode gradient of a scalar ``loss`` w.r.t. each named tensor.

    Tensors that do not require grad (frozen) get an all-zero gradient.
    """
    if not isinstance(loss, Tensor) or loss.numel() != 1:
        shape = tuple(loss.shape) if isinstance(loss, Tensor) else type(loss).__name__
        raise ContractError(f"gradient_of needs a scalar loss, got {shape}")
    names = list(params)
    live = [n for n in names if params[n].requires_grad]
    grads: dict[str, Tensor] = {n: torch.zeros_like(params[n]) for n in names}
    if live and loss.requires_grad:
        found = torch.autograd.grad(
            loss.reshape(()), [params[n] for n in live], retain_graph=True, allow_unused=True
        )
        for n, g in zip(live, found):
            if g is not None:
                grads[n] = g.detach().clone()
    return grads


def finite_diff_gradient(
    loss_fn: Callable[[], Tensor | float],
    params: Mapping[str, Tensor],
    h: float = 1e-5,
    entries: Mapping[str, Sequence[int]] | None = None,
) -> dict[str, Tensor]:
    """Central differences (f(p+h) − f(p−h)) / 2h, one scalar entry at a time.

    With ``entries`` only the listed flat indices of each named tensor are
    probed and the result per name is a 1-D tensor aligned with that list.
    """
    out: dict[str, Tensor] = {}
    with torch.no_grad():
        for name, p in params.items():
            flat = p.detach().view(-1)
            index = range(flat.numel()) if entries is None else list(entries.get(name, ()))
            vals = torch.zeros(len(index), dtype=DTYPE)
            for j, i in enumerate(index):
                orig = flat[i].item()
                flat[i] = orig + h
                fp = float(loss_fn())
                flat[i] = orig - h
                fm = float(loss_fn())
                flat[i] = orig
                vals[j] = (fp - fm) / (2.0 * h)
            out[name] = vals.reshape(p.shape) if entries is None else vals
    return out


def max_relative_error(a: Tensor, b: Tensor, floor: float = 1e-6) -> float:
    """max |a−b| / max(|a|, |b|, floor); below ``floor`` the error is absolute-scaled."""
    a = as_tensor(a).reshape(-1)
    b = as_tensor(b).reshape(-1)
    if a.numel() == 0:
        return 0.0
    scale = torch.maximum(torch.maximum(a.abs(), b.abs()), torch.full_like(a, floor))
    return float(((a - b).abs() / scale).max())
