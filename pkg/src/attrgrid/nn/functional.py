"""Differentiable building blocks on dense tensors and sparse voxel token sets."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import LayoutError
from ..grid import encode_keys, decode_keys
from .tensor import (Tensor, as_tensor, concat, log_sigmoid, matmul, permute_rows, softmax,
                     swapaxes, take_rows, absolute)

# kernel tap t = (dx + 1) * 9 + (dy + 1) * 3 + (dz + 1)
KERNEL_OFFSETS = np.array(
    [[dx, dy, dz] for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)], dtype=np.int64
)
CHILD_OFFSETS = np.array([[(o >> 2) & 1, (o >> 1) & 1, o & 1] for o in range(8)], dtype=np.int64)


@dataclass
class SparseTokenSet:
    """Features row-aligned with lexicographically sorted voxel coordinates."""

    coords: np.ndarray      # (N, 3) int64
    features: Tensor        # (N, d)
    resolution: int

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 3)
        if len(self.coords) != self.features.shape[0]:
            raise LayoutError("token count does not match feature rows")

    def __len__(self) -> int:
        return len(self.coords)

    @property
    def keys(self) -> np.ndarray:
        return encode_keys(self.coords, self.resolution)

    def replace(self, features: Tensor) -> "SparseTokenSet":
        return SparseTokenSet(self.coords, features, self.resolution)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else out + bias


# -- sparse convolution -----------------------------------------------------------------

def _lookup(src_keys: np.ndarray, query_keys: np.ndarray) -> np.ndarray:
    if len(src_keys) == 0:
        return np.full(query_keys.shape, -1, dtype=np.int64)
    pos = np.minimum(np.searchsorted(src_keys, query_keys), len(src_keys) - 1)
    return np.where(src_keys[pos] == query_keys, pos, -1)


def conv_output_coords(coords: np.ndarray, stride: int, resolution: int) -> np.ndarray:
    if stride == 1:
        return coords
    coarse = resolution // stride
    return decode_keys(np.unique(encode_keys(coords // stride, coarse)), coarse)


def conv_neighbors(in_coords: np.ndarray, resolution: int, stride: int,
                   out_coords: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Output coordinates and the (N_out, 27) input row index per kernel tap (-1 = absent).

    Output voxel ``o`` reads input voxels ``stride * o + offset`` for the 27 offsets
    in ``{-1, 0, 1}^3``.
    """
    if stride not in (1, 2):
        raise LayoutError("stride must be 1 or 2")
    if out_coords is None:
        out_coords = conv_output_coords(in_coords, stride, resolution)
    src = np.asarray(in_coords, dtype=np.int64)
    src_keys = encode_keys(src, resolution)
    pos = stride * out_coords[:, None, :] + KERNEL_OFFSETS[None]
    inside = np.all((pos >= 0) & (pos < resolution), axis=2)
    keys = encode_keys(np.clip(pos, 0, resolution - 1).reshape(-1, 3), resolution).reshape(pos.shape[:2])
    nbr = _lookup(src_keys, keys)
    nbr[~inside] = -1
    return out_coords, nbr


def sparse_conv(tokens: SparseTokenSet, weight: Tensor, bias: Tensor | None = None,
                stride: int = 1, neighbors=None) -> SparseTokenSet:
    """3x3x3 sparse convolution; absent neighbours contribute zero.

    ``weight`` has shape (3, 3, 3, d_in, d_out). ``neighbors`` may carry a
    precomputed ``(out_coords, nbr)`` pair from :func:`conv_neighbors`.
    """
    d_in = tokens.features.shape[1]
    if weight.shape[:4] != (3, 3, 3, d_in):
        raise LayoutError(f"kernel shape {weight.shape} incompatible with {d_in} input channels")
    d_out = weight.shape[4]
    if neighbors is None:
        neighbors = conv_neighbors(tokens.coords, tokens.resolution, stride)
    out_coords, nbr = neighbors
    cols = take_rows(tokens.features, nbr)                         # (N_out, 27, d_in)
    flat = cols.reshape(len(out_coords), 27 * d_in)
    out = matmul(flat, weight.reshape(27 * d_in, d_out))
    if bias is not None:
        out = out + bias
    return SparseTokenSet(out_coords, out, tokens.resolution // stride)


def upsample_plan(coords: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sorted child coordinates of every voxel and the row permutation into sorted order."""
    kids = (2 * coords[:, None, :] + CHILD_OFFSETS[None]).reshape(-1, 3)
    order = np.lexsort((kids[:, 2], kids[:, 1], kids[:, 0]))
    return kids[order], order


def sparse_upsample(tokens: SparseTokenSet, weight: Tensor, bias: Tensor | None = None,
                    plan=None) -> SparseTokenSet:
    """Transposed 2x2x2 stride-2 convolution producing all eight children per voxel.

    ``weight`` has shape (d_in, 8, d_out); child ``o`` of a voxel uses ``weight[:, o]``.
    """
    n, d_in = tokens.features.shape
    d_out = weight.shape[2]
    kids, order = plan if plan is not None else upsample_plan(tokens.coords)
    y = matmul(tokens.features, weight.reshape(d_in, 8 * d_out)).reshape(n * 8, d_out)
    y = permute_rows(y, order)
    if bias is not None:
        y = y + bias
    return SparseTokenSet(kids, y, tokens.resolution * 2)


def select_tokens(tokens: SparseTokenSet, coords: np.ndarray) -> SparseTokenSet:
    """Keep the rows at ``coords`` (which must be a subset of the token coordinates)."""
    idx = _lookup(tokens.keys, encode_keys(coords, tokens.resolution))
    if np.any(idx < 0):
        raise LayoutError("requested coordinates are not all present in the token set")
    return SparseTokenSet(coords, take_rows(tokens.features, idx), tokens.resolution)


# -- attention --------------------------------------------------------------------------

def attention(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    """Multi-head scaled dot-product attention on already projected (N, d) inputs."""
    nq, d = q.shape
    nk = k.shape[0]
    if d % heads:
        raise LayoutError(f"width {d} not divisible by {heads} heads")
    dh = d // heads
    qh = swapaxes(q.reshape(nq, heads, dh), 0, 1)          # (h, nq, dh)
    kh = swapaxes(k.reshape(nk, heads, dh), 0, 1)
    vh = swapaxes(v.reshape(nk, heads, dh), 0, 1)
    scores = matmul(qh, swapaxes(kh, 1, 2)) * (1.0 / np.sqrt(dh))
    out = matmul(softmax(scores, axis=-1), vh)             # (h, nq, dh)
    return swapaxes(out, 0, 1).reshape(nq, d)


def block_partition(coords: np.ndarray, window: int) -> tuple[np.ndarray, list]:
    """Row order grouping tokens by ``coords // window`` and the per-block slices."""
    blocks = np.asarray(coords, dtype=np.int64) // window
    order = np.lexsort((blocks[:, 2], blocks[:, 1], blocks[:, 0]))
    b = blocks[order]
    change = np.nonzero(np.any(b[1:] != b[:-1], axis=1))[0] + 1
    bounds = np.concatenate([[0], change, [len(order)]])
    return order, [(int(bounds[i]), int(bounds[i + 1])) for i in range(len(bounds) - 1)]


def windowed_sparse_attention(tokens: SparseTokenSet, wq: Tensor, wk: Tensor, wv: Tensor,
                              wo: Tensor, heads: int, window: int = 4,
                              partition=None) -> SparseTokenSet:
    """Self-attention restricted to tokens sharing a ``window``^3 block.

    Output coordinates equal input coordinates. A block holding a single token
    attends only to itself, so its output is its own value path.
    """
    x = tokens.features
    if len(tokens) == 0:
        return tokens
    q, k, v = matmul(x, wq), matmul(x, wk), matmul(x, wv)
    order, spans = partition if partition is not None else block_partition(tokens.coords, window)
    if len(spans) == 1:
        mixed = attention(q, k, v, heads)
    else:
        qs, ks, vs = permute_rows(q, order), permute_rows(k, order), permute_rows(v, order)
        parts = [attention(qs[a:b], ks[a:b], vs[a:b], heads) for a, b in spans]
        inv = np.empty_like(order)
        inv[order] = np.arange(len(order))
        mixed = permute_rows(concat(parts, axis=0), inv)
    return tokens.replace(matmul(mixed, wo))


def cross_attention(queries: Tensor, context: Tensor, wq: Tensor, wk: Tensor, wv: Tensor,
                    wo: Tensor, heads: int) -> Tensor:
    if queries.shape[1] != wq.shape[0] or context.shape[1] != wk.shape[0]:
        raise LayoutError("query/context width does not match projection weights")
    return matmul(attention(matmul(queries, wq), matmul(context, wk), matmul(context, wv), heads), wo)


# -- embeddings -------------------------------------------------------------------------

def sinusoid(values: np.ndarray, n_freq: int, base: float = 1e4) -> np.ndarray:
    """``[sin(v * w_i), cos(v * w_i)]`` with ``w_i = base^(-i / n_freq)``."""
    freqs = base ** (-np.arange(n_freq) / n_freq)
    ang = np.asarray(values, dtype=np.float64)[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def position_embed(coords, d: int) -> Tensor:
    """Per-axis sinusoidal embedding (d/3 dims per axis), concatenated over x, y, z."""
    if d % 6:
        raise LayoutError(f"embedding width {d} must be divisible by 6")
    c = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
    per_axis = [sinusoid(c[:, a], d // 6) for a in range(3)]
    return Tensor(np.concatenate(per_axis, axis=1))


def timestep_embed(t, d: int, scale: float = 1000.0) -> np.ndarray:
    """Sinusoidal embedding of flow time ``t`` in [0, 1] (scaled to a 0..1000 range)."""
    if d % 2:
        raise LayoutError("timestep embedding width must be even")
    return sinusoid(np.atleast_1d(np.asarray(t, dtype=np.float64)) * scale, d // 2)


# -- losses and rendering ---------------------------------------------------------------

def interp_gather(attrs: Tensor, idx: np.ndarray, weights: np.ndarray) -> Tensor:
    """Trilinear rendering as a differentiable gather: sum_c w[:, c] * attrs[idx[:, c]]."""
    corners = take_rows(attrs, idx)                          # (P, 8, k)
    return (corners * Tensor(weights[..., None])).sum(axis=1)


def bce_with_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    y = Tensor(np.asarray(labels, dtype=np.float64).reshape(logits.shape))
    return -(y * log_sigmoid(logits) + (1.0 - y) * log_sigmoid(-logits)).mean()


def l1_loss(pred: Tensor, target) -> Tensor:
    return absolute(pred - as_tensor(target)).mean()


def mse_loss(pred: Tensor, target) -> Tensor:
    diff = pred - as_tensor(target)
    return (diff * diff).mean()
