"""Parameter containers and transformer building blocks on top of :mod:`tensor`.

Activations carry a leading batch axis: tokens are ``(B, n, D)``.
"""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from .rng import Stream
from .tensor import Tensor, concat, gelu, layer_norm, matmul, softmax

INIT_STD = 0.02


class Parameter(Tensor):
    """A trainable leaf.  ``decay`` marks it for decoupled weight decay."""

    def __init__(self, data, decay: bool = True):
        super().__init__(data, requires_grad=True)
        self.decay = decay


class Module:
    """Attribute-registered parameter tree with stable, dotted names."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.data) for n, p in self.named_parameters())

    def load_state_dict(self, state: dict) -> None:
        from .errors import ConfigError

        own = dict(self.named_parameters())
        unknown = sorted(set(state) - set(own))
        missing = sorted(set(own) - set(state))
        if unknown or missing:
            raise ConfigError(f"parameter names disagree; unknown={unknown[:5]} missing={missing[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ConfigError(f"{name}: checkpoint shape {arr.shape} != model shape {p.data.shape}")
            p.data = arr.copy()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, stream: Stream, bias: bool = True, zero: bool = False):
        w = np.zeros((n_in, n_out)) if zero else stream.truncated_normal((n_in, n_out), INIT_STD)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(n_out), decay=False) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(dim), decay=False)
        self.beta = Parameter(np.zeros(dim), decay=False)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)


class MLP(Module):
    """Linear -> GELU -> Linear."""

    def __init__(self, n_in: int, hidden: int, n_out: int, stream: Stream, zero_out: bool = False):
        self.fc1 = Linear(n_in, hidden, stream.child("fc1"))
        self.fc2 = Linear(hidden, n_out, stream.child("fc2"), zero=zero_out)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


def split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return x.reshape(b, n, heads, d // heads).transpose(0, 2, 1, 3)


def merge_heads(x: Tensor) -> Tensor:
    b, h, n, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * dh)


class MultiHeadAttention(Module):
    """Scaled dot-product attention of queries ``x`` over keys/values ``kv``."""

    def __init__(self, dim: int, heads: int, stream: Stream, zero_out: bool = True):
        self.heads = heads
        self.wq = Linear(dim, dim, stream.child("q"))
        self.wk = Linear(dim, dim, stream.child("k"))
        self.wv = Linear(dim, dim, stream.child("v"))
        self.wo = Linear(dim, dim, stream.child("o"), zero=zero_out)

    def attention_weights(self, x: Tensor, kv: Tensor) -> Tensor:
        q = split_heads(self.wq(x), self.heads)
        k = split_heads(self.wk(kv), self.heads)
        scale = 1.0 / np.sqrt(q.shape[-1])
        return softmax(matmul(q, k.swapaxes(-1, -2)) * scale, axis=-1)

    def __call__(self, x: Tensor, kv: Tensor) -> Tensor:
        weights = self.attention_weights(x, kv)
        v = split_heads(self.wv(kv), self.heads)
        return self.wo(merge_heads(matmul(weights, v)))


class CrossAttentionBlock(Module):
    """x' = x + MHA(LN(x), LN(z), LN(z));  out = x' + MLP(LN(x'))."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int, stream: Stream):
        self.ln_q = LayerNorm(dim)
        self.ln_kv = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, stream.child("attn"))
        self.ln_mlp = LayerNorm(dim)
        self.mlp = MLP(dim, mlp_ratio * dim, dim, stream.child("mlp"), zero_out=True)

    def __call__(self, x: Tensor, z: Tensor) -> Tensor:
        kv = self.ln_kv(z)
        x = x + self.attn(self.ln_q(x), kv)
        return x + self.mlp(self.ln_mlp(x))


class SelfAttentionBlock(Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int, stream: Stream):
        self.ln_attn = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, stream.child("attn"))
        self.ln_mlp = LayerNorm(dim)
        self.mlp = MLP(dim, mlp_ratio * dim, dim, stream.child("mlp"), zero_out=True)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.ln_attn(x)
        x = x + self.attn(h, h)
        return x + self.mlp(self.ln_mlp(x))


def fourier_features(coords: np.ndarray, bands: np.ndarray) -> np.ndarray:
    """[sin(2 pi B x), cos(2 pi B x)] for coords (..., d) and B (bands, d)."""
    proj = 2.0 * np.pi * np.asarray(coords) @ np.asarray(bands).T
    return np.concatenate([np.sin(proj), np.cos(proj)], axis=-1)


__all__ = [
    "Parameter",
    "Module",
    "Linear",
    "LayerNorm",
    "MLP",
    "MultiHeadAttention",
    "CrossAttentionBlock",
    "SelfAttentionBlock",
    "fourier_features",
    "concat",
]
