"""Transformer encoder/decoder blocks used by both the speech and text branches.

Pre-norm self-attention blocks with an optional depthwise temporal-convolution
branch on the attention sublayer. Everything operates on single sequences
(shape ``t x d``); batching is a loop at the training level, which keeps
variable-length handling trivial at desk scale.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import Module, Parameter, Tensor, concat, layer_norm, softmax

__all__ = [
    "glorot",
    "positional_encoding",
    "LayerNorm",
    "Attention",
    "FeedForward",
    "EncoderBlock",
    "DecoderBlock",
    "TransformerEncoder",
    "pool",
]


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


_PE_CACHE: dict[tuple, np.ndarray] = {}


def positional_encoding(length: int, dim: int, dtype=np.float64) -> np.ndarray:
    """Fixed sinusoidal position table, cached per (length, dim, dtype)."""
    key = (length, dim, np.dtype(dtype).str)
    if key not in _PE_CACHE:
        pos = np.arange(length)[:, None]
        i = np.arange(dim)[None, :]
        angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
        table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
        _PE_CACHE[key] = table.astype(dtype)
    return _PE_CACHE[key]


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float64):
        self.gain = Parameter(np.ones(dim, dtype=dtype))
        self.bias = Parameter(np.zeros(dim, dtype=dtype))
        self.eps = 1e-5

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias, self.eps)


class Attention(Module):
    """Multi-head scaled dot-product attention; self- or cross- depending on kv.

    ``out_scale`` shrinks the output projection at init so residual branches
    start near identity; deep stacks then optimize as fast as shallow ones.
    """

    def __init__(self, dim: int, n_heads: int, rng: np.random.Generator, dtype=np.float64,
                 out_scale: float = 1.0):
        if dim % n_heads != 0:
            raise ConfigError(f"model dim {dim} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.wq = Parameter(glorot(rng, dim, dim, dtype))
        self.wk = Parameter(glorot(rng, dim, dim, dtype))
        self.wv = Parameter(glorot(rng, dim, dim, dtype))
        self.wo = Parameter(glorot(rng, dim, dim, dtype) * out_scale)
        self.bq = Parameter(np.zeros(dim, dtype=dtype))
        self.bk = Parameter(np.zeros(dim, dtype=dtype))
        self.bv = Parameter(np.zeros(dim, dtype=dtype))
        self.bo = Parameter(np.zeros(dim, dtype=dtype))

    def __call__(self, x: Tensor, kv: Tensor | None = None) -> Tensor:
        source = x if kv is None else kv
        q = x @ self.wq + self.bq
        k = source @ self.wk + self.bk
        v = source @ self.wv + self.bv
        scale = 1.0 / np.sqrt(self.head_dim)
        heads = []
        for h in range(self.n_heads):
            lo, hi = h * self.head_dim, (h + 1) * self.head_dim
            qh, kh, vh = q[:, lo:hi], k[:, lo:hi], v[:, lo:hi]
            scores = (qh @ kh.T) * scale
            heads.append(softmax(scores, axis=-1) @ vh)
        return concat(heads, axis=1) @ self.wo + self.bo


class DepthwiseConv(Module):
    """Kernel-3 depthwise temporal convolution with same padding."""

    def __init__(self, dim: int, dtype=np.float64):
        self.taps = Parameter(np.zeros((3, dim), dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        t = x.shape[0]
        zero = Tensor(np.zeros((1, x.shape[1]), dtype=x.dtype))
        xp = concat([zero, x, zero], axis=0)
        return (xp[0:t] * self.taps[0] + xp[1:t + 1] * self.taps[1]
                + xp[2:t + 2] * self.taps[2])


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, dtype=np.float64,
                 out_scale: float = 1.0):
        self.w1 = Parameter(glorot(rng, dim, hidden, dtype))
        self.b1 = Parameter(np.zeros(hidden, dtype=dtype))
        self.w2 = Parameter(glorot(rng, hidden, dim, dtype) * out_scale)
        self.b2 = Parameter(np.zeros(dim, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return (x @ self.w1 + self.b1).relu() @ self.w2 + self.b2


class EncoderBlock(Module):
    def __init__(self, dim: int, n_heads: int, ff_dim: int, rng: np.random.Generator,
                 dtype=np.float64, conv_branch: bool = False, out_scale: float = 1.0):
        self.ln1 = LayerNorm(dim, dtype)
        self.attn = Attention(dim, n_heads, rng, dtype, out_scale)
        self.conv = DepthwiseConv(dim, dtype) if conv_branch else None
        self.ln2 = LayerNorm(dim, dtype)
        self.ff = FeedForward(dim, ff_dim, rng, dtype, out_scale)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.ln1(x)
        mixed = self.attn(h)
        if self.conv is not None:
            mixed = mixed + self.conv(h)
        x = x + mixed
        return x + self.ff(self.ln2(x))


class DecoderBlock(Module):
    """Bidirectional self-attention over queries plus cross-attention to memory."""

    def __init__(self, dim: int, n_heads: int, ff_dim: int, rng: np.random.Generator,
                 dtype=np.float64, out_scale: float = 1.0):
        self.ln_self = LayerNorm(dim, dtype)
        self.self_attn = Attention(dim, n_heads, rng, dtype, out_scale)
        self.ln_cross = LayerNorm(dim, dtype)
        self.cross_attn = Attention(dim, n_heads, rng, dtype, out_scale)
        self.ln_ff = LayerNorm(dim, dtype)
        self.ff = FeedForward(dim, ff_dim, rng, dtype, out_scale)

    def __call__(self, x: Tensor, memory: Tensor) -> Tensor:
        x = x + self.self_attn(self.ln_self(x))
        x = x + self.cross_attn(self.ln_cross(x), kv=memory)
        return x + self.ff(self.ln_ff(x))


class TransformerEncoder(Module):
    """Stack of pre-norm blocks with an optional input projection.

    With ``n_layers=0`` the output is just the input projection (plus
    positional encoding when enabled), which gives tests an identity-depth
    reference point.
    """

    def __init__(self, in_dim: int, dim: int, n_layers: int, n_heads: int, ff_dim: int,
                 rng: np.random.Generator, dtype=np.float64, use_posenc: bool = True,
                 conv_branch: bool = False):
        self.in_dim = in_dim
        self.dim = dim
        self.use_posenc = use_posenc
        self.in_proj = Parameter(glorot(rng, in_dim, dim, dtype)) if in_dim != dim else None
        out_scale = 1.0 / np.sqrt(2.0 * n_layers) if n_layers else 1.0
        self.blocks = [EncoderBlock(dim, n_heads, ff_dim, rng, dtype, conv_branch, out_scale)
                       for _ in range(n_layers)]
        self.ln_out = LayerNorm(dim, dtype) if n_layers > 0 else None
        self.dtype = np.dtype(dtype)

    def __call__(self, x: Tensor) -> Tensor:
        if x.data.ndim != 2:
            raise ShapeError(f"encoder expects a 2-D input, got shape {x.shape}")
        if x.shape[1] != self.in_dim:
            raise ShapeError(f"encoder expects feature dim {self.in_dim}, got {x.shape[1]}")
        if self.in_proj is not None:
            x = x @ self.in_proj
        if self.use_posenc:
            x = x + positional_encoding(x.shape[0], self.dim, self.dtype)
        for block in self.blocks:
            x = block(x)
        if self.ln_out is not None:
            x = self.ln_out(x)
        return x


def pool(reps: Tensor, mode: str = "cls") -> Tensor:
    """Reduce token representations to a sentence vector.

    ``cls`` returns row 0 (the prepended trainable token); ``mean`` averages
    all rows.
    """
    if reps.data.ndim != 2 or reps.shape[0] == 0:
        raise ShapeError(f"pool expects a non-empty 2-D input, got shape {reps.shape}")
    if mode == "cls":
        return reps[0]
    if mode == "mean":
        return reps.mean(axis=0)
    raise ConfigError(f"unknown pooling mode {mode!r}")
