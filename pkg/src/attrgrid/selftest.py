"""Fast invariant checks for ``attrgrid selftest``."""
from __future__ import annotations

import time
from typing import Callable

import numpy as np

from .grid import ChannelLayout, SparseAttributeGrid, batch_query, grid_from_bytes, grid_to_bytes, trilinear_query
from .nn.layers import make_rng


def _random_grid(rng, res=16, n=600, k=3):
    coords = np.unique(rng.integers(0, res, (n, 3)), axis=0)
    return SparseAttributeGrid.from_arrays(coords, rng.uniform(size=(len(coords), k)), res,
                                           ChannelLayout(color=k))


def check_partition_of_unity():
    rng = make_rng(1)
    res = 8
    coords = np.stack(np.meshgrid(*[np.arange(res)] * 3, indexing="ij"), -1).reshape(-1, 3)
    grid = SparseAttributeGrid.from_arrays(coords, np.ones((len(coords), 3)), res, ChannelLayout())
    vals, _ = batch_query(grid, rng.uniform(-0.5, 0.5, (2000, 3)))
    assert np.abs(vals - 1.0).max() < 1e-12


def check_scalar_batch_agree():
    rng = make_rng(2)
    grid = _random_grid(rng)
    pts = rng.uniform(-0.5, 0.5, (200, 3))
    vals, _ = batch_query(grid, pts)
    for p, v in zip(pts, vals):
        assert np.array_equal(trilinear_query(grid, p).values, v)


def check_grid_roundtrip():
    grid = _random_grid(make_rng(3))
    blob = grid_to_bytes(grid)
    assert grid_to_bytes(grid_from_bytes(blob)) == blob


def check_attention_oracle():
    from .nn import functional as F
    from .nn.tensor import Tensor
    rng = make_rng(4)
    coords = np.unique(rng.integers(0, 4, (20, 3)), axis=0)
    d = 8
    x = rng.normal(size=(len(coords), d))
    w = [Tensor(rng.normal(size=(d, d)) / 3) for _ in range(4)]
    out = F.windowed_sparse_attention(F.SparseTokenSet(coords, Tensor(x), 4), *w, heads=2, window=4).features.data
    q, k, v = x @ w[0].data, x @ w[1].data, x @ w[2].data
    heads = []
    for h in range(2):
        s = slice(4 * h, 4 * h + 4)
        a = q[:, s] @ k[:, s].T / 2.0
        a = np.exp(a - a.max(1, keepdims=True))
        heads.append((a / a.sum(1, keepdims=True)) @ v[:, s])
    assert np.abs(out - np.concatenate(heads, 1) @ w[3].data).max() < 1e-10


def check_cfg_identity():
    from .flow_dit import euler_sample
    rng = make_rng(5)
    x1 = rng.normal(size=(6, 4))
    v = lambda x, t, c: np.sin(x + t) if c else np.cos(x)   # noqa: E731
    cond_only = euler_sample(lambda x, t, c: np.sin(x + t), x1, 7, guidance=1.0)
    assert np.array_equal(euler_sample(v, x1, 7, guidance=1.0), cond_only)


def check_miou_identity():
    from .segmentation import PartSegmentation, miou
    parts = np.array([0, 0, 1, 2, 2, 1])
    seg = PartSegmentation(parts, np.zeros((3, 3)), 3)
    assert miou(seg, seg, np.ones(6)) == 1.0


CHECKS: list[tuple[str, Callable[[], None]]] = [
    ("trilinear partition of unity", check_partition_of_unity),
    ("scalar/batch query agreement", check_scalar_batch_agree),
    ("TXGRID round trip", check_grid_roundtrip),
    ("windowed attention oracle", check_attention_oracle),
    ("CFG identity at g=1", check_cfg_identity),
    ("mIoU identity", check_miou_identity),
]


def run_selftest(echo=print) -> bool:
    ok_all = True
    for name, fn in CHECKS:
        t0 = time.perf_counter()
        try:
            fn()
            status, detail = "PASS", ""
        except Exception as exc:  # report every failure, keep going
            status, detail = "FAIL", f"  ({type(exc).__name__}: {exc})"
            ok_all = False
        echo(f"{status}  {name:<34s} {time.perf_counter() - t0:6.2f}s{detail}")
    return ok_all
