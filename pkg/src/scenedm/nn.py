"""Layers built on the tensor engine."""
from __future__ import annotations

import math

import numpy as np

from . import tensor as tn
from .tensor import Tensor


class Module:
    """Parameter container; parameters and submodules are discovered from
    instance attributes (lists of modules are supported)."""

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                out[key] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(key + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{key}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)[:5]}")
        for k, p in params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ValueError(f"{k}: shape {arr.shape} does not match {p.shape}")
            p.data = arr.astype(p.data.dtype, copy=True)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


def _param(rng: np.random.Generator, shape, std: float, dtype) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True, dtype=dtype)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float64, scale: float = 1.0):
        self.W = _param(rng, (d_in, d_out), scale / math.sqrt(d_in), dtype)
        self.b = Tensor(np.zeros(d_out), requires_grad=True, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        y = tn.matmul(x, self.W)
        return tn.add(y, tn.broadcast_to(self.b, y.shape))


class LayerNorm(Module):
    def __init__(self, d: int, dtype=np.float64):
        self.gamma = Tensor(np.ones(d), requires_grad=True, dtype=dtype)
        self.beta = Tensor(np.zeros(d), requires_grad=True, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        y = tn.layer_norm(x)
        return tn.add(tn.mul(y, tn.broadcast_to(self.gamma, y.shape)), tn.broadcast_to(self.beta, y.shape))


class MLP(Module):
    """Two linear layers with a GELU in between."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator, dtype=np.float64, out_scale: float = 1.0):
        self.fc1 = Linear(d_in, d_hidden, rng, dtype)
        self.fc2 = Linear(d_hidden, d_out, rng, dtype, scale=out_scale)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(tn.gelu(self.fc1(x)))


NEG_INF = -1e9


class MultiHeadAttention(Module):
    def __init__(self, d: int, heads: int, rng: np.random.Generator, dtype=np.float64):
        if d % heads:
            raise ValueError(f"model width {d} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(d, d, rng, dtype)
        self.k = Linear(d, d, rng, dtype)
        self.v = Linear(d, d, rng, dtype)
        self.o = Linear(d, d, rng, dtype, scale=0.5)

    def _split(self, x: Tensor) -> Tensor:
        b, L, d = x.shape
        x = tn.reshape(x, (b, L, self.heads, d // self.heads))
        return tn.transpose(x, (0, 2, 1, 3))

    def __call__(self, x: Tensor, key_invalid: np.ndarray | None = None) -> Tensor:
        """Self-attention over axis 1 of ``x`` (batch, seq, width).

        ``key_invalid`` (batch, seq) marks keys that no query may attend to.
        """
        b, L, d = x.shape
        q, k, v = self._split(self.q(x)), self._split(self.k(x)), self._split(self.v(x))
        scores = tn.scalar_mul(tn.matmul(q, tn.transpose(k)), 1.0 / math.sqrt(d // self.heads))
        if key_invalid is not None and key_invalid.any():
            mask = np.broadcast_to(key_invalid[:, None, None, :], scores.shape)
            scores = tn.masked_fill(scores, mask, NEG_INF)
        attn = tn.softmax_last_axis(scores)
        ctx = tn.transpose(tn.matmul(attn, v), (0, 2, 1, 3))
        return self.o(tn.reshape(ctx, (b, L, d)))


def sinusoid(positions: np.ndarray, d: int) -> np.ndarray:
    """Interleaved [sin, cos] features; position 0 maps to [0, 1, 0, 1, ...]."""
    positions = np.asarray(positions, dtype=np.float64)
    freqs = 1.0 / (10000.0 ** (np.arange(d // 2) * 2.0 / d))
    ang = positions[..., None] * freqs
    out = np.empty(positions.shape + (d,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out
