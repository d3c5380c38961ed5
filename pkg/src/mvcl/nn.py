"""Small neural-network layers on top of the autodiff core.

Modules discover their parameters by reflection over instance attributes:
``Tensor`` attributes are parameters, ``Module`` attributes (also inside
dicts, lists and tuples) are children. Plain numpy arrays act as constant
buffers and are never trained or checkpointed as parameters.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .errors import ConfigError
from .tensor import (
    Tensor,
    add,
    layer_norm,
    matmul,
    mul,
    relu,
    reshape,
    softmax,
    transpose,
)


class Module:
    """Base class with named-parameter discovery and freeze control."""

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        found: dict[str, Tensor] = {}
        for name, value in vars(self).items():
            _collect(f"{prefix}{name}", value, found)
        return found

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = bool(flag)


def _collect(key: str, value, found: dict[str, Tensor]) -> None:
    if isinstance(value, Tensor):
        found[key] = value
    elif isinstance(value, Module):
        for name, sub in vars(value).items():
            _collect(f"{key}.{name}", sub, found)
    elif isinstance(value, dict):
        for k, v in value.items():
            if isinstance(v, (Tensor, Module, dict, list, tuple)):
                _collect(f"{key}.{k}", v, found)
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            if isinstance(v, (Tensor, Module, dict, list, tuple)):
                _collect(f"{key}.{i}", v, found)


def xavier_normal(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    scale = np.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(0.0, scale, size=(fan_in, fan_out))


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 bias: bool = True):
        self.weight = Tensor(xavier_normal(rng, in_dim, out_dim), requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim == 1:
            y = self(reshape(x, (1, x.shape[0])))
            return reshape(y, (y.shape[-1],))
        y = matmul(x, self.weight)
        return add(y, self.bias) if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = Tensor(np.ones(dim), requires_grad=True)
        self.shift = Tensor(np.zeros(dim), requires_grad=True)
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.shift, self._eps)


class FeedForward(Module):
    def __init__(self, dim: int, hidden_dim: int, rng: np.random.Generator):
        self.expand = Linear(dim, hidden_dim, rng)
        self.contract = Linear(hidden_dim, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.contract(relu(self.expand(x)))


class MultiHeadAttention(Module):
    """Scaled dot-product attention; queries and key/values may differ."""

    def __init__(self, dim: int, num_heads: int, rng: np.random.Generator):
        if dim % num_heads != 0:
            raise ConfigError(f"model dim {dim} not divisible by {num_heads} heads")
        self.wq = Linear(dim, dim, rng)
        # a key bias shifts every score in a row equally and softmax cancels
        # it, so it would be a parameter with an identically zero gradient
        self.wk = Linear(dim, dim, rng, bias=False)
        self.wv = Linear(dim, dim, rng)
        self.wo = Linear(dim, dim, rng)
        self._dim = dim
        self._heads = num_heads
        self._head_dim = dim // num_heads

    def __call__(self, q_seq: Tensor, kv_seq: Tensor) -> Tensor:
        if q_seq.ndim == 2 and kv_seq.ndim == 2:
            promoted = self(reshape(q_seq, (1,) + q_seq.shape), reshape(kv_seq, (1,) + kv_seq.shape))
            return reshape(promoted, promoted.shape[1:])
        if q_seq.ndim != 3 or kv_seq.ndim != 3:
            raise ConfigError("attention expects [L, D] or [B, L, D] sequences")
        if q_seq.shape[-1] != self._dim or kv_seq.shape[-1] != self._dim:
            raise ConfigError("attention input width does not match model dim")
        batch, len_q, _ = q_seq.shape
        len_kv = kv_seq.shape[1]
        h, hd = self._heads, self._head_dim
        q = transpose(reshape(self.wq(q_seq), (batch, len_q, h, hd)), (0, 2, 1, 3))
        k = transpose(reshape(self.wk(kv_seq), (batch, len_kv, h, hd)), (0, 2, 1, 3))
        v = transpose(reshape(self.wv(kv_seq), (batch, len_kv, h, hd)), (0, 2, 1, 3))
        scores = mul(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(hd))
        weights = softmax(scores, axis=-1)
        context = transpose(matmul(weights, v), (0, 2, 1, 3))
        return self.wo(reshape(context, (batch, len_q, self._dim)))


class EncoderBlock(Module):
    """Pre-norm self-attention block: x + Attn(LN(x)), then x + FFN(LN(x))."""

    def __init__(self, dim: int, num_heads: int, ffn_dim: int, rng: np.random.Generator):
        self.norm_attn = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, num_heads, rng)
        self.norm_ffn = LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        normed = self.norm_attn(x)
        x = add(x, self.attn(normed, normed))
        return add(x, self.ffn(self.norm_ffn(x)))


class CrossAttentionBlock(Module):
    """Post-norm block: LN(q + Attn(q, kv)), then LN(y + FFN(y)).

    With ``kv_seq = q_seq`` this doubles as a self-attention block.
    """

    def __init__(self, dim: int, num_heads: int, ffn_dim: int, rng: np.random.Generator):
        self.attn = MultiHeadAttention(dim, num_heads, rng)
        self.norm_attn = LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_dim, rng)
        self.norm_ffn = LayerNorm(dim)

    def __call__(self, q_seq: Tensor, kv_seq: Tensor) -> Tensor:
        y = self.norm_attn(add(q_seq, self.attn(q_seq, kv_seq)))
        return self.norm_ffn(add(y, self.ffn(y)))


@lru_cache(maxsize=None)
def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    """Classic fixed sine/cosine position table, shape [length, dim]."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    idx = np.arange(dim, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, 2.0 * np.floor(idx / 2.0) / dim)
    table = np.where(idx % 2 == 0, np.sin(angles), np.cos(angles))
    table.flags.writeable = False
    return table
