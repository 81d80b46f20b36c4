"""Acceptance criteria 1-9 at their stated tolerances.

Each test records a single PASS/FAIL line (printed in the terminal summary)
before asserting, so a failing criterion still reports its measured numbers.
"""
import time
import zlib

import numpy as np
import pytest
from click.testing import CliRunner

from conftest import ACCEPTANCE
from test_nn import BINARY, UNARY, param, weighted
from test_render import brute_force_hits

from attrgrid.ablation import condition_ablation, loss_ablation, micro_task_items, pretrain_micro_vae
from attrgrid.assets import box_mesh, colored_grid, random_mesh, toy_box_asset
from attrgrid.cli import main
from attrgrid.flow_dit import AttributeDiT, ConditionBundle, DiTConfig, PatchPoolExtractor, euler_sample, \
    toy_flow_benchmark
from attrgrid.grid import (ChannelLayout, SparseAttributeGrid, batch_query, corner_stencil, encode_keys,
                           grid_from_bytes, grid_to_bytes, trilinear_query, voxel_centers)
from attrgrid.nn import functional as F
from attrgrid.nn.checkpoint import checkpoint_from_bytes, checkpoint_to_bytes
from attrgrid.nn.gradcheck import grad_check
from attrgrid.nn.layers import make_rng
from attrgrid.nn.tensor import Tensor
from attrgrid.render import OrthoCamera, render_position_map
from attrgrid.segmentation import (PartSegmentation, RegionMaskSet, cluster_labels, iou_matrix, merge_regions, miou,
                                   single_linkage)
from attrgrid.uv import bake_position_map, bake_texture, posmap_from_bytes, posmap_to_bytes
from attrgrid.vae import AttributeVAE, VAEConfig, overfit, prepare_sample, sample_loss, supervision_maps


def record(key, title, ok, detail):
    ACCEPTANCE[key] = f"criterion {key:<2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    print(ACCEPTANCE[key])
    assert ok, ACCEPTANCE[key]


def dense_coords(res):
    return np.stack(np.meshgrid(*[np.arange(res)] * 3, indexing="ij"), -1).reshape(-1, 3)


# -- 1. trilinear ---------------------------------------------------------------------------

def test_criterion_1_trilinear():
    t0 = time.perf_counter()
    res = 32
    rng = np.random.default_rng(0)
    coords = dense_coords(res)
    a, b = rng.normal(size=(3, 2)), rng.normal(size=2)
    grid = SparseAttributeGrid.from_arrays(coords, voxel_centers(coords, res) @ a + b, res,
                                           ChannelLayout(color=0, extra=2))
    pts = rng.uniform(-0.5, 0.5, (10_000, 3))
    _, w = corner_stencil(pts, res)
    pou = np.abs(w.sum(axis=1) - 1.0).max()
    lo, hi = voxel_centers(0, res), voxel_centers(res - 1, res)
    inner = rng.uniform(lo, hi, (10_000, 3))
    vals, _ = batch_query(grid, inner)
    affine = np.abs(vals - (inner @ a + b)).max()
    sites = coords[rng.integers(0, len(coords), 10_000)]
    site_vals, miss = batch_query(grid, voxel_centers(sites, res))
    collapse = np.array_equal(site_vals, grid.attrs[grid.index_of(encode_keys(sites, res))]) and np.all(miss == 0)
    dt = time.perf_counter() - t0
    ok = pou <= 1e-12 and affine <= 1e-9 and collapse and dt < 5.0
    record("1", "trilinear", ok, f"unity err {pou:.1e}, affine err {affine:.1e}, "
                                 f"lattice exact {collapse}, {dt:.2f}s")


# -- 2. bake / render ------------------------------------------------------------------------

def test_criterion_2_bake_and_render():
    mesh = box_mesh(0.3)
    grid = colored_grid(mesh, 16)
    pm = bake_position_map(mesh, 64, 64)
    img = bake_texture(grid, pm)
    rows, cols = np.nonzero(pm.mask)
    bake_ok = all(np.array_equal(img.values[r, c], trilinear_query(grid, pm.positions[r, c]).values)
                  for r, c in zip(rows, cols))
    tri = random_mesh(50, np.random.default_rng(0))
    bad = 0
    for view in ("+z", "-x"):
        cam = OrthoCamera.from_view(view, 24, 24)
        face, _ = brute_force_hits(tri, cam)
        bad += int(np.sum(render_position_map(tri, cam).face_ids != face))
    record("2", "bake/render", bake_ok and bad == 0,
           f"{len(rows)} texels bake==query {bake_ok}, render mismatched pixels {bad}")


# -- 3. autodiff ------------------------------------------------------------------------------

def _op_errors():
    errs = {}
    for name, op in UNARY.items():
        rng = np.random.default_rng(zlib.crc32(name.encode()))
        a = param(rng, 6, 4)
        a.data[np.abs(a.data) < 0.05] += 0.1
        a.data[np.abs(np.abs(a.data) - 0.5) < 0.05] += 0.1
        errs[name] = grad_check(lambda: weighted(op(a)), [a])
    for name, op in BINARY.items():
        rng = np.random.default_rng(len(name))
        a, b = param(rng, 6, 4), param(rng, 6, 4)
        errs[name] = grad_check(lambda: weighted(op(a, b)), [a, b])
    rng = np.random.default_rng(4)
    coords = np.array([[0, 0, 0], [0, 0, 1], [1, 1, 1], [2, 3, 1], [3, 3, 3]])
    x, k, b = param(rng, 5, 2), param(rng, 3, 3, 3, 2, 3), param(rng, 3)
    wu, bu = param(rng, 3, 8, 2), param(rng, 2)
    errs["sparse_conv+upsample"] = grad_check(
        lambda: weighted(F.sparse_upsample(F.sparse_conv(F.SparseTokenSet(coords, x, 4), k, b, stride=2),
                                           wu, bu).features), [x, k, b, wu, bu])
    errs["sparse_conv_s1"] = grad_check(
        lambda: weighted(F.sparse_conv(F.SparseTokenSet(coords, x, 4), k, b).features), [x, k, b])
    rng = np.random.default_rng(6)
    x, ctx = param(rng, 5, 4), param(rng, 3, 6)
    wq, wk, wv, wo = (param(rng, 4, 4) for _ in range(4))
    ck, cv = param(rng, 6, 4), param(rng, 6, 4)
    errs["windowed_attention"] = grad_check(
        lambda: weighted(F.windowed_sparse_attention(F.SparseTokenSet(coords, x, 8), wq, wk, wv, wo,
                                                     heads=2, window=2).features), [x, wq, wk, wv, wo])
    errs["cross_attention"] = grad_check(lambda: weighted(F.cross_attention(x, ctx, wq, ck, cv, wo, heads=2)),
                                         [x, ctx, wq, ck, cv, wo])
    rng = np.random.default_rng(7)
    y = param(rng, 5, 3)
    y.data[np.abs(y.data - 0.2) < 0.05] += 0.1
    labels = rng.uniform(size=(5, 3)) < 0.5
    idx = np.array([[0, 1, -1, 4, 2, 2, 3, 0]] * 2)
    w = rng.uniform(size=(2, 8))
    lw, lb = param(rng, 3, 4), param(rng, 4)
    errs["linear"] = grad_check(lambda: weighted(F.linear(y, lw, lb)), [y, lw, lb])
    errs["bce"] = grad_check(lambda: F.bce_with_logits(y, labels), [y])
    errs["l1"] = grad_check(lambda: F.l1_loss(y, 0.2), [y])
    errs["mse"] = grad_check(lambda: F.mse_loss(y, 0.2), [y])
    errs["interp_gather"] = grad_check(lambda: weighted(F.interp_gather(y, idx, w)), [y])
    return errs


def test_criterion_3_autodiff():
    t0 = time.perf_counter()
    errs = _op_errors()
    mesh = box_mesh(0.3)
    grid = colored_grid(mesh, 16)
    micro = dict(resolution=16, widths=(4, 4, 4), d_latent=2, blocks=1, heads=2, view_size=8, views=2)
    for mode in ("render", "cube"):
        cfg = VAEConfig(**micro, loss_mode=mode, lambda_kl=1e-2)
        vae = AttributeVAE(cfg)
        sample = prepare_sample(grid, supervision_maps(mesh, 8, 2), cfg)
        errs[f"micro_vae_{mode}"] = grad_check(lambda: sample_loss(vae, sample, make_rng(3))[0], vae.parameters(),
                                               max_per_param=3)
    dt = time.perf_counter() - t0
    worst = max(errs, key=errs.get)
    ok = errs[worst] < 1e-4 and dt < 120
    record("3", "autodiff", ok, f"{len(errs)} checks, worst {worst} {errs[worst]:.1e}, {dt:.1f}s")


# -- 4. sparse attention oracle ----------------------------------------------------------------

def _dense_attention(x, wq, wk, wv, wo, heads):
    q, k, v = x @ wq, x @ wk, x @ wv
    dh = q.shape[1] // heads
    out = np.zeros_like(q)
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        s = q[:, sl] @ k[:, sl].T / np.sqrt(dh)
        s = np.exp(s - s.max(axis=1, keepdims=True))
        out[:, sl] = s / s.sum(axis=1, keepdims=True) @ v[:, sl]
    return out @ wo


def test_criterion_4_sparse_attention():
    rng = np.random.default_rng(0)
    ws = [rng.normal(size=(8, 8)) / np.sqrt(8) for _ in range(4)]
    tw = [Tensor(w) for w in ws]
    coords = np.unique(rng.integers(0, 4, (30, 3)), axis=0)
    x = rng.normal(size=(len(coords), 8))
    out = F.windowed_sparse_attention(F.SparseTokenSet(coords, Tensor(x), 8), *tw, heads=2, window=4)
    dense_err = np.abs(out.features.data - _dense_attention(x, *ws, 2)).max()
    single = np.array([[0, 0, 0], [0, 4, 0], [4, 4, 4], [12, 0, 8], [8, 12, 4]])
    xs = rng.normal(size=(len(single), 8))
    out = F.windowed_sparse_attention(F.SparseTokenSet(single, Tensor(xs), 16), *tw, heads=2, window=4)
    exact = np.array_equal(out.features.data, (xs @ ws[2]) @ ws[3])
    record("4", "sparse attention", dense_err <= 1e-10 and exact,
           f"one-block vs dense {dense_err:.1e}, singletons exact {exact}")


# -- 5. VAE overfit ----------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_5_vae_overfit():
    mesh, grid = toy_box_asset(32)
    t0 = time.process_time()
    results = []
    for seed in range(10):
        _, m, _ = overfit(grid, mesh, VAEConfig(seed=seed, lr=1e-4, steps=2000))
        results.append(m)
    cpu_min = (time.process_time() - t0) / 60
    good = sum(m["render_l1"] < 0.05 and m["prune_acc"] > 0.99 for m in results)
    l1 = ", ".join(f"{m['render_l1']:.4f}" for m in results)
    acc = min(m["prune_acc"] for m in results)
    record("5", "VAE overfit", good >= 8 and cpu_min < 80,
           f"{good}/10 seeds pass ({len(grid)} voxels; L1 [{l1}]; min prune acc {acc:.4f}), {cpu_min:.1f} CPU-min")


# -- 6. rectified flow ---------------------------------------------------------------------------

def test_criterion_6_rectified_flow():
    rep = toy_flow_benchmark(seed=0)
    rng = np.random.default_rng(1)
    model = AttributeDiT(DiTConfig(d_latent=4, d_model=12, heads=2, blocks=1))
    coords = np.array([[0, 0, 0], [0, 1, 0], [1, 1, 1], [5, 2, 0]])
    cond = ConditionBundle(rng.integers(0, 8, (3, 3)), rng.normal(size=(3, 4)),
                           rng.normal(size=(64, PatchPoolExtractor().out_dim)))
    x1 = rng.normal(size=(4, 4))
    vf = model.velocity_fn(coords, cond)
    cfg_ok = np.array_equal(euler_sample(vf, x1, 5, guidance=1.0),
                            euler_sample(lambda x, t, k: vf(x, t, True), x1, 5, guidance=1.0))
    c = rng.normal(size=(4, 4))
    const_ok = all(np.array_equal(euler_sample(lambda x, t, k: c, x1, s, g), x1 - c)
                   for s in (1, 2, 3, 7, 15, 50, 64) for g in (1.0, 3.0))
    errs = ", ".join(f"{e:.3f}" for e in rep.mean_errors)
    record("6", "rectified flow", rep.passed and cfg_ok and const_ok,
           f"mode mean errors [{errs}], CFG g=1 bit-exact {cfg_ok}, constant velocity exact {const_ok}")


# -- 7. ablation hooks ---------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_7a_loss_ablation():
    mesh, grid = toy_box_asset(32)
    ab = loss_ablation(grid, mesh, steps=2000)

    def converged(m):
        return m["render_l1"] < 0.05 and m["prune_acc"] > 0.99

    ok = converged(ab.render) and converged(ab.cube)
    record("7a", "render vs cube loss", ok,
           f"render L1 {ab.render['render_l1']:.4f} / {ab.cube['render_l1']:.4f}, "
           f"cube MSE {ab.render['cube_mse']:.1e} / {ab.cube['cube_mse']:.1e}, "
           f"prune acc {ab.render['prune_acc']:.4f} / {ab.cube['prune_acc']:.4f} (render-trained / cube-trained)")


@pytest.mark.slow
def test_criterion_7b_condition_ablation():
    vae = pretrain_micro_vae()
    items, _ = micro_task_items(vae)
    ab = condition_ablation(items, seeds=range(5), steps=1000)
    pairs = ", ".join(f"{a:.4f}<{b:.4f}" if b > a else f"{a:.4f}>={b:.4f}"
                      for a, b in zip(ab.loss_with, ab.loss_without))
    record("7b", "sparse condition ablation", ab.wins >= 4, f"{ab.wins}/5 seeds worse without it [{pairs}]")


# -- 8. segmentation -------------------------------------------------------------------------------

def _brute_single_linkage(pts, eps):
    n = len(pts)
    lab = np.arange(n)
    d = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    changed = True
    while changed:
        changed = False
        for i in range(n):
            for j in range(n):
                if d[i, j] <= eps and lab[i] != lab[j]:
                    lab[lab == max(lab[i], lab[j])] = min(lab[i], lab[j])
                    changed = True
    return lab


def _same_partition(a, b):
    return len(set(zip(a, b))) == len(set(a)) == len(set(b))


def _exhaustive_miou(p, g, areas, n_p, n_g):
    import itertools
    iou = np.zeros((n_p, n_g))
    for i in range(n_p):
        for j in range(n_g):
            inter = areas[(p == i) & (g == j)].sum()
            union = areas[(p == i) | (g == j)].sum()
            iou[i, j] = inter / union if union > 0 else 0.0
    best = 0.0
    for perm in itertools.permutations(range(max(n_p, n_g)), n_g):
        tot = [iou[perm[j], j] for j in range(n_g) if perm[j] < n_p]
        best = max(best, float(np.sum(tot)))
    return best / n_g


def test_criterion_8_segmentation():
    def one_view(labels, feats, tau):
        out = merge_regions(RegionMaskSet([np.array(labels)], [np.array(feats, float)]), tau)
        return out.labels[0].tolist(), out.features[0]

    # hand-run agglomerations (background 0, regions from 1)
    hand = [
        (([[1, 2, 3]], [(1, 0), (1, 0), (0, 1)], 0.9), [[1, 1, 2]], [[1, 0], [0, 1]]),
        (([[1, 1, 1, 2, 3]], [(1, 0), (1, 0.2), (0, 1)], 0.5), [[1, 1, 1, 1, 2]], [[1, 0.05], [0, 1]]),
        (([[1, 2, 3]], [(1, 0), (1, 1), (0, 1)], 0.7), [[1, 1, 2]], [[1, 0.5], [0, 1]]),
    ]
    merges = []
    for args, labels, feats in hand:
        got_l, got_f = one_view(*args)
        merges.append(got_l == labels and np.allclose(got_f, feats, atol=1e-15, rtol=0))
    rng = np.random.default_rng(0)
    link_ok = True
    for n in (5, 20, 50):
        pts = rng.uniform(size=(n, 3))
        link_ok &= _same_partition(single_linkage(pts, 0.2), _brute_single_linkage(pts, 0.2))
        link_ok &= _same_partition(cluster_labels(pts, 0.2).face_parts, _brute_single_linkage(pts, 0.2))
    miou_ok, cases = True, 0
    for n_p in range(1, 5):
        for n_g in range(1, 5):
            for _ in range(3):
                n = 12
                p, g = rng.integers(0, n_p, n), rng.integers(0, n_g, n)
                p[:n_p], g[:n_g] = np.arange(n_p), np.arange(n_g)
                areas = rng.uniform(0.1, 1.0, n)
                got = miou(PartSegmentation(p, np.zeros((n_p, 3)), n_p), PartSegmentation(g, np.zeros((n_g, 3)), n_g),
                           areas)
                miou_ok &= abs(got - _exhaustive_miou(p, g, areas, n_p, n_g)) <= 1e-15
                cases += 1
    parts = np.array([0, 0, 1, 2, 2, 1])
    seg = PartSegmentation(parts, np.zeros((3, 3)), 3)
    ident = miou(seg, seg, np.ones(6)) == 1.0
    # disjoint supports: no face of positive area is shared by any pred/gt part pair
    disjoint = (np.all(iou_matrix(np.array([0, 0, 1, 1]), np.array([2, 2, 3, 3]), np.ones(4), 2, 4)[:, :2] == 0)
                and miou(PartSegmentation(np.zeros(4, int), np.zeros((1, 3)), 1),
                         PartSegmentation(np.array([0, 0, 1, 1]), np.zeros((2, 3)), 2), np.zeros(4)) == 0.0)
    ok = all(merges) and link_ok and miou_ok and ident and disjoint
    record("8", "segmentation", ok, f"hand merges {sum(merges)}/3, single-linkage {link_ok}, "
                                    f"mIoU exhaustive {cases} cases {miou_ok}, identity {ident}, disjoint {disjoint}")


# -- 9. formats ------------------------------------------------------------------------------------

def test_criterion_9_formats(tmp_path):
    rng = np.random.default_rng(0)
    coords = np.unique(rng.integers(0, 16, (300, 3)), axis=0)
    grid = SparseAttributeGrid.from_arrays(coords, rng.uniform(size=(len(coords), 5)), 16, ChannelLayout(3, 2, 0, 0))
    gblob = grid_to_bytes(grid)
    pblob = posmap_to_bytes(bake_position_map(box_mesh(0.3), 24, 16))
    params = {"w": rng.normal(size=(3, 4)), "b": rng.normal(size=4)}
    cblob = checkpoint_to_bytes(params, {"kind": "vae", "note": "x"})
    p2, meta = checkpoint_from_bytes(cblob)
    trips = {
        "TXGRID": grid_to_bytes(grid_from_bytes(gblob)) == gblob,
        "TXPOS": posmap_to_bytes(posmap_from_bytes(pblob)) == pblob,
        "TXCKPT1": checkpoint_to_bytes(p2, meta) == cblob,
    }
    bad_grid, bad_pos, bad_ckpt = tmp_path / "g.txg", tmp_path / "p.txpos", tmp_path / "c.txckpt"
    good_grid, good_pos = tmp_path / "ok.txg", tmp_path / "ok.txpos"
    good_grid.write_bytes(gblob)
    good_pos.write_bytes(pblob)
    bad_grid.write_bytes(b"XXXX" + gblob[4:])
    bad_pos.write_bytes(b"XXXX" + pblob[4:])
    bad_ckpt.write_bytes(b"TXCKPT0" + cblob[7:])
    runner = CliRunner()
    codes = {
        "TXGRID": runner.invoke(main, ["bake-texture", "--grid", str(bad_grid), "--posmap", str(good_pos),
                                       "--out", str(tmp_path / "a.png")]).exit_code,
        "TXPOS": runner.invoke(main, ["bake-texture", "--grid", str(good_grid), "--posmap", str(bad_pos),
                                      "--out", str(tmp_path / "b.png")]).exit_code,
        "TXCKPT1": runner.invoke(main, ["train-dit", "--vae", str(bad_ckpt), "--out", str(tmp_path / "d")]).exit_code,
    }
    ok = all(trips.values()) and all(c != 0 for c in codes.values())
    record("9", "formats", ok, f"byte-identical round trips {trips}, malformed exit codes {codes}")
