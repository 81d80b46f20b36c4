"""Parameter containers (a tiny torch.nn-like Module system)."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import Tensor, gelu, layer_norm


def make_rng(seed: int) -> np.random.Generator:
    """Seeded 64-bit counter-based generator (Philox) used for all randomness."""
    return np.random.Generator(np.random.Philox(int(seed)))


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Module:
    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ValueError(f"{name}: shape {value.shape} != {p.shape}")
            p.data[...] = value

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = uniform_init(rng, (d_in, d_out), d_in)
        self.bias = uniform_init(rng, (d_out,), d_in) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gain = Tensor(np.ones(d), requires_grad=True)
        self.shift = Tensor(np.zeros(d), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x) * self.gain + self.shift


class MLP(Module):
    def __init__(self, d: int, hidden: int, rng: np.random.Generator, d_out: int | None = None):
        self.fc1 = Linear(d, hidden, rng)
        self.fc2 = Linear(hidden, d_out or d, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


class WindowedSelfAttention(Module):
    def __init__(self, d: int, heads: int, window: int, rng: np.random.Generator):
        self.heads, self.window = heads, window
        self.wq = uniform_init(rng, (d, d), d)
        self.wk = uniform_init(rng, (d, d), d)
        self.wv = uniform_init(rng, (d, d), d)
        self.wo = uniform_init(rng, (d, d), d)

    def __call__(self, tokens: F.SparseTokenSet, partition=None) -> F.SparseTokenSet:
        return F.windowed_sparse_attention(tokens, self.wq, self.wk, self.wv, self.wo,
                                           self.heads, self.window, partition)


class CrossAttention(Module):
    def __init__(self, d: int, d_ctx: int, heads: int, rng: np.random.Generator):
        self.heads = heads
        self.wq = uniform_init(rng, (d, d), d)
        self.wk = uniform_init(rng, (d_ctx, d), d_ctx)
        self.wv = uniform_init(rng, (d_ctx, d), d_ctx)
        self.wo = uniform_init(rng, (d, d), d)

    def __call__(self, queries: Tensor, context: Tensor) -> Tensor:
        return F.cross_attention(queries, context, self.wq, self.wk, self.wv, self.wo, self.heads)


class TransformerBlock(Module):
    """Pre-norm block: windowed self-attention then MLP, both residual."""

    def __init__(self, d: int, heads: int, window: int, rng: np.random.Generator, mlp_ratio: int = 2):
        self.norm1 = LayerNorm(d)
        self.attn = WindowedSelfAttention(d, heads, window, rng)
        self.norm2 = LayerNorm(d)
        self.mlp = MLP(d, mlp_ratio * d, rng)

    def __call__(self, tokens: F.SparseTokenSet, partition=None) -> F.SparseTokenSet:
        x = tokens.features
        h = self.attn(tokens.replace(self.norm1(x)), partition).features
        x = x + h
        x = x + self.mlp(self.norm2(x))
        return tokens.replace(x)


class SparseConv3d(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, stride: int = 1):
        self.stride = stride
        self.weight = uniform_init(rng, (3, 3, 3, d_in, d_out), 27 * d_in)
        self.bias = uniform_init(rng, (d_out,), 27 * d_in)

    def __call__(self, tokens: F.SparseTokenSet, neighbors=None) -> F.SparseTokenSet:
        return F.sparse_conv(tokens, self.weight, self.bias, self.stride, neighbors)


class SparseUpsample(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        self.weight = uniform_init(rng, (d_in, 8, d_out), d_in)
        self.bias = uniform_init(rng, (d_out,), d_in)

    def __call__(self, tokens: F.SparseTokenSet, plan=None) -> F.SparseTokenSet:
        return F.sparse_upsample(tokens, self.weight, self.bias, plan)
