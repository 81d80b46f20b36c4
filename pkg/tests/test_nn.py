import itertools
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attrgrid.errors import LayoutError
from attrgrid.nn import functional as F
from attrgrid.nn import tensor as T
from attrgrid.nn.checkpoint import checkpoint_from_bytes, checkpoint_to_bytes
from attrgrid.nn.gradcheck import grad_check
from attrgrid.nn.layers import Linear, make_rng
from attrgrid.nn.optim import AdamW
from attrgrid.nn.tensor import Tensor
from attrgrid.pruning import downsample_occupancy

TOL = 1e-4


def param(rng, *shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def weighted(out, rng=np.random.default_rng(99)):
    """Random fixed projection to a scalar so every output entry matters."""
    w = Tensor(np.random.default_rng(99).normal(size=out.shape))
    return (out * w).sum()


# -- elementwise and shape ops ------------------------------------------------------------

UNARY = {
    "exp": T.exp,
    "log": lambda a: T.log(a * a + 0.5),
    "tanh": T.tanh,
    "sigmoid": T.sigmoid,
    "log_sigmoid": T.log_sigmoid,
    "relu": T.relu,
    "gelu": T.gelu,
    "abs": T.absolute,
    "clip": lambda a: T.clip(a, -0.5, 0.5),
    "pow": lambda a: (a * a + 1.0) ** 1.5,
    "softmax": lambda a: T.softmax(a, axis=-1),
    "softmax0": lambda a: T.softmax(a, axis=0),
    "layer_norm": T.layer_norm,
    "sum_axis": lambda a: a.sum(axis=1),
    "mean_keep": lambda a: a.mean(axis=0, keepdims=True),
    "reshape": lambda a: a.reshape(3, 8),
    "transpose": lambda a: a.T,
    "swapaxes": lambda a: T.swapaxes(a.reshape(2, 3, 4), 0, 2),
    "getitem": lambda a: a[1:, ::2],
    "take_rows": lambda a: T.take_rows(a, np.array([[0, -1], [5, 5], [2, 3]])),
    "permute_rows": lambda a: T.permute_rows(a, np.array([3, 1, 0, 5, 2, 4])),
    "neg": lambda a: -a,
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_op_gradients(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    a = param(rng, 6, 4)
    # keep kinks (relu, abs, clip) away from the probe points
    a.data[np.abs(a.data) < 0.05] += 0.1
    a.data[np.abs(np.abs(a.data) - 0.5) < 0.05] += 0.1
    op = UNARY[name]
    assert grad_check(lambda: weighted(op(a)), [a]) < TOL


BINARY = {
    "add_broadcast": lambda a, b: a + b[0],
    "sub": lambda a, b: a - b,
    "mul_broadcast": lambda a, b: a * b[:, :1],
    "div": lambda a, b: a / (b * b + 0.5),
    "matmul": lambda a, b: a @ b.T,
    "batched_matmul": lambda a, b: T.matmul(a.reshape(2, 3, 4), b.reshape(2, 4, 3)),
    "concat": lambda a, b: T.concat([a, b, a], axis=1),
}


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_op_gradients(name):
    rng = np.random.default_rng(len(name))
    a, b = param(rng, 6, 4), param(rng, 6, 4)
    op = BINARY[name]
    assert grad_check(lambda: weighted(op(a, b)), [a, b]) < TOL


def test_quadratic_matches_analytic_gradient():
    rng = np.random.default_rng(0)
    W, x = param(rng, 4, 5), param(rng, 5)
    err = grad_check(lambda: ((W @ x) ** 2).sum(), [W, x])
    assert err < 1e-8
    W.grad = x.grad = None
    ((W @ x) ** 2).sum().backward()
    y = W.data @ x.data
    np.testing.assert_allclose(W.grad, 2 * np.outer(y, x.data), atol=1e-14)
    np.testing.assert_allclose(x.grad, 2 * W.data.T @ y, atol=1e-14)


def test_constant_function_has_zero_gradient():
    a = param(np.random.default_rng(0), 3)
    assert grad_check(lambda: a.sum() * 0.0 + 2.0, [a]) == 0.0
    assert np.all(a.grad == 0)


def test_shared_node_visited_once_and_gradients_accumulate():
    a = Tensor(np.array([2.0]), requires_grad=True)
    b = a * 3.0
    (b * b + b).sum().backward()
    # d/da (9a^2 + 3a) = 18a + 3
    np.testing.assert_allclose(a.grad, [39.0])
    assert a.grad.shape == a.shape


def test_no_grad_blocks_graph():
    a = Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        b = a * 2.0
    assert not b.requires_grad
    assert T.grad_enabled()


def test_standard_op_examples():
    x = Tensor(np.arange(6.0).reshape(2, 3))
    assert np.array_equal(F.linear(x, Tensor(np.eye(3))).data, x.data)
    np.testing.assert_allclose(T.softmax(Tensor(np.full((2, 5), 3.7))).data, 0.2, atol=1e-15)
    assert np.all(T.layer_norm(Tensor(np.full((3, 4), 2.5))).data == 0.0)
    with pytest.raises(ValueError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3))
def test_softmax_rows_sum_to_one(seed, scale):
    x = np.random.default_rng(seed).normal(size=(7, 11)) * scale
    s = T.softmax(Tensor(x)).data
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(np.isfinite(s))


# -- sparse convolution ---------------------------------------------------------------------

def dense_coords(res):
    return np.array(list(itertools.product(range(res), repeat=3)))


def dense_conv_oracle(vol, kernel, stride):
    """Direct loops over a zero-padded dense (R, R, R, d_in) volume."""
    res = vol.shape[0]
    out_res = res // stride
    out = np.zeros((out_res,) * 3 + (kernel.shape[-1],))
    for o in itertools.product(range(out_res), repeat=3):
        for dx, dy, dz in itertools.product((-1, 0, 1), repeat=3):
            p = np.array(o) * stride + (dx, dy, dz)
            if np.all((p >= 0) & (p < res)):
                out[o] += vol[tuple(p)] @ kernel[dx + 1, dy + 1, dz + 1]
    return out


@pytest.mark.parametrize("stride", [1, 2])
def test_sparse_conv_dense_oracle(stride):
    rng = np.random.default_rng(stride)
    res = 4
    coords = dense_coords(res)
    vol = rng.normal(size=(res, res, res, 2))
    kernel = rng.normal(size=(3, 3, 3, 2, 3))
    tok = F.SparseTokenSet(coords, Tensor(vol.reshape(-1, 2)), res)
    out = F.sparse_conv(tok, Tensor(kernel), stride=stride)
    expect = dense_conv_oracle(vol, kernel, stride)
    assert out.resolution == res // stride
    np.testing.assert_allclose(out.features.data, expect[tuple(out.coords.T)], atol=1e-12)


def test_sparse_conv_identity_and_hand_gather():
    coords = np.array([[1, 1, 1], [1, 1, 2], [1, 2, 1], [2, 1, 1], [3, 3, 3]])
    feats = np.arange(10.0).reshape(5, 2)
    tok = F.SparseTokenSet(coords, Tensor(feats), 4)
    ident = np.zeros((3, 3, 3, 2, 2))
    ident[1, 1, 1] = np.eye(2)
    assert np.array_equal(F.sparse_conv(tok, Tensor(ident)).features.data, feats)
    ones = np.zeros((3, 3, 3, 2, 2))
    ones[...] = np.eye(2)
    out = F.sparse_conv(tok, Tensor(ones)).features.data
    np.testing.assert_allclose(out[0], feats[:4].sum(axis=0))
    np.testing.assert_allclose(out[4], feats[4])


def test_sparse_conv_stride2_coords_and_errors():
    rng = np.random.default_rng(3)
    keys = np.unique(rng.integers(0, 8 ** 3, 60))
    coords = np.stack([keys // 64, keys // 8 % 8, keys % 8], axis=1)
    tok = F.SparseTokenSet(coords, Tensor(rng.normal(size=(len(coords), 2))), 8)
    out = F.sparse_conv(tok, Tensor(rng.normal(size=(3, 3, 3, 2, 4))), stride=2)
    assert np.array_equal(out.coords, downsample_occupancy(coords, 2, 8))
    with pytest.raises(LayoutError):
        F.sparse_conv(tok, Tensor(np.zeros((3, 3, 3, 5, 4))))
    with pytest.raises(LayoutError):
        F.SparseTokenSet(coords, Tensor(np.zeros((3, 2))), 8)


def test_sparse_conv_and_upsample_gradients():
    rng = np.random.default_rng(4)
    coords = np.array([[0, 0, 0], [0, 0, 1], [1, 1, 1], [2, 3, 1], [3, 3, 3]])
    x = param(rng, 5, 2)
    k = param(rng, 3, 3, 3, 2, 3)
    b = param(rng, 3)
    wu = param(rng, 3, 8, 2)
    bu = param(rng, 2)

    def f():
        t = F.sparse_conv(F.SparseTokenSet(coords, x, 4), k, b, stride=2)
        return weighted(F.sparse_upsample(t, wu, bu).features)

    assert grad_check(f, [x, k, b, wu, bu]) < TOL


def test_upsample_children_sorted_and_routed():
    coords = np.array([[0, 0, 0], [1, 0, 1]])
    x = Tensor(np.array([[1.0], [2.0]]))
    w = Tensor(np.arange(8.0).reshape(1, 8, 1))
    out = F.sparse_upsample(F.SparseTokenSet(coords, x, 2), w)
    keys = (out.coords[:, 0] * 4 + out.coords[:, 1]) * 4 + out.coords[:, 2]
    assert np.all(np.diff(keys) > 0) and len(out) == 16
    # child offset o = 4 dx + 2 dy + dz gets weight o times the parent feature
    for c, v in zip(out.coords, out.features.data[:, 0]):
        parent = 1.0 if c[0] < 2 else 2.0
        o = (c[0] % 2) * 4 + (c[1] % 2) * 2 + c[2] % 2
        assert v == parent * o


# -- attention ------------------------------------------------------------------------------

def dense_attention_oracle(x, wq, wk, wv, wo, heads):
    q, k, v = x @ wq, x @ wk, x @ wv
    d = q.shape[1]
    dh = d // heads
    out = np.zeros_like(q)
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        s = q[:, sl] @ k[:, sl].T / np.sqrt(dh)
        s = np.exp(s - s.max(axis=1, keepdims=True))
        out[:, sl] = (s / s.sum(axis=1, keepdims=True)) @ v[:, sl]
    return out @ wo


def attn_weights(rng, d=8):
    return [rng.normal(size=(d, d)) / np.sqrt(d) for _ in range(4)]


def test_windowed_attention_single_block_equals_dense():
    rng = np.random.default_rng(0)
    coords = np.unique(rng.integers(0, 4, (20, 3)), axis=0)
    x = rng.normal(size=(len(coords), 8))
    ws = attn_weights(rng)
    out = F.windowed_sparse_attention(F.SparseTokenSet(coords, Tensor(x), 8), *map(Tensor, ws), heads=2, window=4)
    assert np.array_equal(out.coords, coords)
    assert np.max(np.abs(out.features.data - dense_attention_oracle(x, *ws, 2))) <= 1e-10


def test_windowed_attention_singletons_are_value_path():
    rng = np.random.default_rng(1)
    coords = np.array([[0, 0, 0], [0, 4, 0], [4, 4, 4], [12, 0, 8]])
    x = rng.normal(size=(4, 8))
    wq, wk, wv, wo = attn_weights(rng)
    out = F.windowed_sparse_attention(F.SparseTokenSet(coords, Tensor(x), 16), *map(Tensor, (wq, wk, wv, wo)),
                                      heads=4, window=4)
    assert np.array_equal(out.features.data, (x @ wv) @ wo)


def test_windowed_attention_mixed_blocks_match_per_block_oracle():
    rng = np.random.default_rng(2)
    coords = np.unique(rng.integers(0, 8, (40, 3)), axis=0)
    x = rng.normal(size=(len(coords), 8))
    ws = attn_weights(rng)
    out = F.windowed_sparse_attention(F.SparseTokenSet(coords, Tensor(x), 8), *map(Tensor, ws), heads=2, window=4)
    blocks = coords // 4
    for b in np.unique(blocks, axis=0):
        sel = np.all(blocks == b, axis=1)
        np.testing.assert_allclose(out.features.data[sel], dense_attention_oracle(x[sel], *ws, 2), atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_attention_permutation_equivariant(seed):
    rng = np.random.default_rng(seed)
    coords = np.unique(rng.integers(0, 8, (25, 3)), axis=0)
    x = rng.normal(size=(len(coords), 8))
    ws = list(map(Tensor, attn_weights(rng)))
    perm = rng.permutation(len(coords))
    a = F.windowed_sparse_attention(F.SparseTokenSet(coords, Tensor(x), 8), *ws, heads=2, window=4)
    b = F.windowed_sparse_attention(F.SparseTokenSet(coords[perm], Tensor(x[perm]), 8), *ws, heads=2, window=4)
    np.testing.assert_allclose(b.features.data, a.features.data[perm], atol=1e-12)


def test_cross_attention_examples():
    rng = np.random.default_rng(5)
    q = rng.normal(size=(4, 8))
    ctx = rng.normal(size=(6, 8))
    wq, wk, wv, wo = attn_weights(rng)
    out = F.cross_attention(Tensor(q), Tensor(ctx), *map(Tensor, (wq, wk, wv, wo)), heads=2)
    # dense oracle with keys/values from the context
    expect = np.zeros((4, 8))
    qq, kk, vv = q @ wq, ctx @ wk, ctx @ wv
    for h in range(2):
        sl = slice(4 * h, 4 * h + 4)
        s = np.exp(qq[:, sl] @ kk[:, sl].T / 2.0)
        expect[:, sl] = s / s.sum(axis=1, keepdims=True) @ vv[:, sl]
    np.testing.assert_allclose(out.data, expect @ wo, atol=1e-12)
    one = F.cross_attention(Tensor(q), Tensor(ctx[:1]), *map(Tensor, (wq, wk, wv, wo)), heads=2)
    np.testing.assert_allclose(one.data, np.tile(ctx[:1] @ wv @ wo, (4, 1)), atol=1e-14)
    zero = F.cross_attention(Tensor(q), Tensor(ctx), *map(Tensor, (wq, wk, np.zeros((8, 8)), wo)), heads=2)
    assert np.all(zero.data == 0.0)
    with pytest.raises(LayoutError):
        F.cross_attention(Tensor(q), Tensor(ctx[:, :5]), *map(Tensor, (wq, wk, wv, wo)), heads=2)
    with pytest.raises(LayoutError):
        F.attention(Tensor(q), Tensor(ctx), Tensor(ctx), heads=3)


def test_attention_gradients():
    rng = np.random.default_rng(6)
    coords = np.array([[0, 0, 0], [1, 0, 2], [3, 3, 3], [5, 1, 0], [6, 2, 1]])
    x = param(rng, 5, 4)
    ctx = param(rng, 3, 6)
    wq, wk, wv, wo = (param(rng, 4, 4) for _ in range(4))
    ck, cv = param(rng, 6, 4), param(rng, 6, 4)

    def f():
        t = F.windowed_sparse_attention(F.SparseTokenSet(coords, x, 8), wq, wk, wv, wo, heads=2, window=4)
        return weighted(F.cross_attention(t.features, ctx, wq, ck, cv, wo, heads=2))

    assert grad_check(f, [x, ctx, wq, wk, wv, wo, ck, cv]) < TOL


# -- embeddings, losses, optimiser ----------------------------------------------------------

def test_position_embed_closed_form():
    pe = F.position_embed(np.array([[0, 0, 0], [3, 1, 7], [3, 1, 7]]), 12).data
    assert pe.shape == (3, 12)
    # per axis: [sin(c w0), sin(c w1), cos(c w0), cos(c w1)] with w_i = 1e4^(-i/2)
    assert np.all(pe[0].reshape(3, 4)[:, :2] == 0) and np.all(pe[0].reshape(3, 4)[:, 2:] == 1)
    assert np.array_equal(pe[1], pe[2])
    w = np.array([1.0, 0.01])
    for axis, c in enumerate((3, 1, 7)):
        np.testing.assert_allclose(pe[1, 4 * axis:4 * axis + 4], np.concatenate([np.sin(c * w), np.cos(c * w)]),
                                   atol=1e-15)
    with pytest.raises(LayoutError):
        F.position_embed(np.zeros((1, 3)), 8)


def test_loss_gradients():
    rng = np.random.default_rng(7)
    x = param(rng, 5, 3)
    x.data[np.abs(x.data - 0.2) < 0.05] += 0.1
    labels = rng.uniform(size=(5, 3)) < 0.5
    idx = np.array([[0, 1, -1, 4, 2, 2, 3, 0]] * 2)
    w = rng.uniform(size=(2, 8))
    assert grad_check(lambda: F.bce_with_logits(x, labels), [x]) < TOL
    assert grad_check(lambda: F.l1_loss(x, 0.2), [x]) < TOL
    assert grad_check(lambda: F.mse_loss(x, 0.2), [x]) < TOL
    assert grad_check(lambda: weighted(F.interp_gather(x, idx, w)), [x]) < TOL


def test_bce_matches_closed_form():
    z = np.array([-30.0, -1.0, 0.0, 2.0, 40.0])
    y = np.array([0.0, 1.0, 1.0, 0.0, 1.0])
    ref = np.mean(np.logaddexp(0, z) - y * z)
    assert F.bce_with_logits(Tensor(z), y).item() == pytest.approx(ref, abs=1e-14)


def test_linear_layer_init_bounds_and_determinism():
    a = Linear(16, 4, make_rng(3))
    b = Linear(16, 4, make_rng(3))
    assert np.array_equal(a.weight.data, b.weight.data)
    assert np.all(np.abs(a.weight.data) <= 0.25)


def test_adamw_matches_reference_update():
    rng = np.random.default_rng(8)
    p = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    q = Tensor(rng.normal(size=4), requires_grad=True)
    ref_p, ref_q = p.data.copy(), q.data.copy()
    opt = AdamW([p, q], lr=0.1, weight_decay=0.05)
    m = [np.zeros_like(ref_p), np.zeros_like(ref_q)]
    v = [np.zeros_like(ref_p), np.zeros_like(ref_q)]
    for t in range(1, 4):
        opt.zero_grad()
        ((p * p).sum() + (q * 3.0).sum()).backward()
        opt.step()
        for i, (ref, g) in enumerate(((ref_p, 2 * ref_p), (ref_q, np.full(4, 3.0)))):
            ref *= 1 - 0.1 * 0.05
            m[i] = 0.9 * m[i] + 0.1 * g
            v[i] = 0.999 * v[i] + 0.001 * g * g
            ref -= 0.1 * (m[i] / (1 - 0.9 ** t)) / (np.sqrt(v[i] / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p.data, ref_p, atol=1e-13)
    np.testing.assert_allclose(q.data, ref_q, atol=1e-13)


def test_philox_rng_reproducible():
    assert np.array_equal(make_rng(5).normal(size=4), make_rng(5).normal(size=4))
    assert not np.array_equal(make_rng(5).normal(size=4), make_rng(6).normal(size=4))


def test_checkpoint_roundtrip_and_rejects():
    from attrgrid.errors import FormatError
    params = {"a.weight": np.arange(6.0).reshape(2, 3) / 7, "b": np.array(1.5), "c": np.zeros((0, 4))}
    blob = checkpoint_to_bytes(params, {"kind": "test", "n": 3})
    back, meta = checkpoint_from_bytes(blob)
    assert meta == {"kind": "test", "n": 3}
    assert checkpoint_to_bytes(back, meta) == blob
    np.testing.assert_allclose(back["a.weight"], params["a.weight"].astype(np.float32))
    for bad in (b"TXCKPT2" + blob[7:], blob[:-2], blob + b"\0"):
        with pytest.raises(FormatError):
            checkpoint_from_bytes(bad)
