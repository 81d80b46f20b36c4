"""``attrgrid`` command line."""
from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click
import numpy as np

from . import config as cfgmod
from .errors import AttrGridError

log = logging.getLogger("attrgrid")


class _Group(click.Group):
    """Turn library errors and I/O failures into a clean nonzero exit."""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except (AttrGridError, OSError, KeyError) as exc:
            raise click.ClickException(f"{type(exc).__name__}: {exc}") from exc


@click.group(cls=_Group)
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose: bool) -> None:
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(message)s")


def _size(size) -> tuple[int, int]:
    w, h = size
    if w <= 0 or h <= 0:
        raise click.BadParameter("size must be positive")
    return int(w), int(h)


@main.command("bake-posmap")
@click.option("--mesh", "mesh_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--size", nargs=2, type=int, required=True, metavar="W H")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def bake_posmap_cmd(mesh_path, size, out):
    """Rasterise the mesh UV layout into a position map."""
    from .mesh import read_obj
    from .uv import bake_position_map, write_posmap
    w, h = _size(size)
    pm = bake_position_map(read_obj(mesh_path), w, h)
    write_posmap(out, pm)
    click.echo(f"{out}: {int(pm.mask.sum())} valid texels, {pm.skipped} zero-area faces skipped")


@main.command("render-posmap")
@click.option("--mesh", "mesh_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--view", default="+z", show_default=True)
@click.option("--size", nargs=2, type=int, required=True, metavar="W H")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def render_posmap_cmd(mesh_path, view, size, out):
    """Ray-cast an orthographic view position map."""
    from .mesh import read_obj
    from .render import OrthoCamera, render_position_map
    from .uv import write_posmap
    w, h = _size(size)
    pm = render_position_map(read_obj(mesh_path), OrthoCamera.from_view(view, w, h))
    write_posmap(out, pm)
    click.echo(f"{out}: {int(pm.mask.sum())} covered pixels")


@main.command("voxelize")
@click.option("--mesh", "mesh_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--res", "resolution", required=True, type=int)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def voxelize_cmd(mesh_path, resolution, out):
    """Surface-voxelise a mesh into an occupancy-only grid."""
    from .grid import write_grid
    from .mesh import read_obj
    from .voxelize import occupancy_grid
    grid = occupancy_grid(read_obj(mesh_path), resolution)
    write_grid(out, grid)
    click.echo(f"{out}: {len(grid)} voxels at {resolution}^3")


@main.command("project")
@click.option("--image", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--posmap", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--res", "resolution", required=True, type=int)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def project_cmd(image, posmap, resolution, out):
    """Lift image pixels into a sparse colour grid through a view position map."""
    from .grid import write_grid
    from .projection import project_image_to_grid
    from .uv import load_image, read_posmap
    grid = project_image_to_grid(load_image(image), read_posmap(posmap, kind="view"), resolution)
    write_grid(out, grid)
    click.echo(f"{out}: {len(grid)} voxels")


@main.command("bake-texture")
@click.option("--grid", "grid_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--posmap", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--span", default="color", show_default=True)
@click.option("--dilate", default=0, show_default=True, type=click.IntRange(min=0))
@click.option("--renormalize", is_flag=True, help="Divide by the present corner weight instead of zero-filling.")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def bake_texture_cmd(grid_path, posmap, span, dilate, renormalize, out):
    """Sample a grid span at every valid texel and write a PNG."""
    from .grid import read_grid
    from .uv import bake_texture, dilate_texture, read_posmap, save_image
    img = bake_texture(read_grid(grid_path), read_posmap(posmap), span, renormalize=renormalize)
    if dilate:
        img = dilate_texture(img, dilate)
    save_image(out, img)
    click.echo(f"{out}: {img.width}x{img.height}")


def _overrides(pairs) -> dict:
    out = {}
    for item in pairs:
        if "=" not in item:
            raise click.BadParameter(f"expected key=value, got {item!r}", param_hint="--set")
        k, v = item.split("=", 1)
        out[k.strip().replace("-", "_")] = cfgmod.parse_value(v)
    return out


def _run_config(config_path, sets, **flags) -> dict:
    values = cfgmod.load_config(config_path) if config_path else {}
    values.update(_overrides(sets))
    values.update({k: v for k, v in flags.items() if v is not None})
    return values


def _toy_or_files(values: dict, key: str = "asset"):
    """Yield (mesh, grid) pairs from ``asset = toy`` / ``mesh``+``grid`` / ``assets = m.obj:g.txg; ...``."""
    from .assets import toy_box_asset
    from .grid import read_grid
    from .mesh import read_obj
    res = int(values.get("resolution", 32))
    source = values.get(key, "toy")
    if "mesh" in values and "grid" in values:
        return [(read_obj(values["mesh"]), read_grid(values["grid"]))]
    if source == "toy":
        return [toy_box_asset(res)]
    if isinstance(source, str) and source.startswith("toy"):
        from .ablation import micro_assets
        return micro_assets(int(source[3:]), res)
    pairs = []
    for entry in str(source).split(";"):
        m, g = entry.strip().split(":")
        pairs.append((read_obj(m), read_grid(g)))
    return pairs


@main.command("train-vae")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--set", "sets", multiple=True, metavar="KEY=VALUE", help="Override a config entry.")
@click.option("--steps", type=int)
@click.option("--seed", type=int)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def train_vae_cmd(config_path, sets, steps, seed, out):
    """Overfit the attribute VAE on one asset (mesh + ground-truth grid)."""
    from .nn.checkpoint import save_checkpoint
    from .vae import AttributeVAE, VAEConfig, VAETrainer, evaluate, prepare_sample, supervision_maps
    values = _run_config(config_path, sets, steps=steps, seed=seed)
    known, rest = cfgmod.split_known(VAEConfig, values)
    cfg = cfgmod.build(VAEConfig, known)
    mesh, grid = _toy_or_files({**rest, "resolution": cfg.resolution})[0]
    model = AttributeVAE(cfg)
    sample = prepare_sample(grid, supervision_maps(mesh, cfg.view_size, cfg.views), cfg)
    trainer = VAETrainer(model)
    every = int(rest.get("log_every", 100))
    for i in range(cfg.steps):
        rec = trainer.train_step([sample])
        if every and (i + 1) % every == 0:
            log.info("step %d loss %.5f", i + 1, rec["total"])
    metrics = evaluate(model, sample)
    save_checkpoint(out, model.state_dict(), {"kind": "vae", "config": cfg.to_dict(), "metrics": metrics})
    click.echo(json.dumps({"out": out, **{k: round(v, 6) for k, v in metrics.items()}}))


def _load_vae(path):
    from .nn.checkpoint import load_checkpoint
    from .vae import model_from_checkpoint
    return model_from_checkpoint(*load_checkpoint(path))


@main.command("train-dit")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--set", "sets", multiple=True, metavar="KEY=VALUE")
@click.option("--vae", "vae_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--steps", type=int)
@click.option("--seed", type=int)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def train_dit_cmd(config_path, sets, vae_path, steps, seed, out):
    """Train the flow transformer on VAE latents, conditioned on each asset's front view."""
    from .flow_dit import (AttributeDiT, DiTConfig, DiTTrainer, FlowItem, LatentStats, eval_flow_loss,
                           make_condition)
    from .nn.checkpoint import save_checkpoint
    from .nn.tensor import no_grad
    from .render import OrthoCamera, render_position_map, render_view
    values = _run_config(config_path, sets, steps=steps, seed=seed, vae=vae_path)
    known, rest = cfgmod.split_known(DiTConfig, values)
    cfg = cfgmod.build(DiTConfig, known)
    if "vae" not in rest:
        raise click.UsageError("a VAE checkpoint is required (--vae or 'vae =' in the config)")
    vae = _load_vae(rest["vae"])
    size = int(rest.get("view_size", 64))
    raw, coords, conds = [], [], []
    for mesh, grid in _toy_or_files({**rest, "resolution": vae.config.resolution}, key="assets"):
        vpm = render_position_map(mesh, OrthoCamera.from_view("+z", size, size))
        with no_grad():
            lat = vae.encode(grid)
        raw.append(lat.mu.data.copy())
        coords.append(lat.coords)
        conds.append(make_condition(render_view(grid, vpm), vpm, vae))
    stats = LatentStats.fit(raw)
    items = [FlowItem(stats.normalize(z), c, cd) for z, c, cd in zip(raw, coords, conds)]
    model = AttributeDiT(cfg)
    trainer = DiTTrainer(model)
    every = int(rest.get("log_every", 100))
    for i in range(cfg.steps):
        rec = trainer.train_step(items)
        if every and (i + 1) % every == 0:
            log.info("step %d loss %.5f", i + 1, rec["loss"])
    final = eval_flow_loss(model, items)
    save_checkpoint(out, model.state_dict(), {
        "kind": "dit", "config": cfg.to_dict(), "latent_mean": stats.mean.tolist(),
        "latent_std": stats.std.tolist(), "final_loss": final})
    click.echo(json.dumps({"out": out, "final_loss": round(final, 6), "assets": len(items)}))


@main.command("sample")
@click.option("--vae", "vae_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--dit", "dit_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--cond", "cond_path", required=True, type=click.Path(exists=True, dir_okay=False),
              help="Condition grid from `project`.")
@click.option("--image", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--mesh", "mesh_path", required=True, type=click.Path(exists=True, dir_okay=False),
              help="Target geometry; fixes the latent token set.")
@click.option("--steps", default=15, show_default=True, type=click.IntRange(min=1))
@click.option("--cfg", "guidance", default=3.0, show_default=True, type=float)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def sample_cmd(vae_path, dit_path, cond_path, image, mesh_path, steps, guidance, seed, out):
    """Generate an attribute grid for a mesh from a conditioning image."""
    from .flow_dit import ConditionBundle, PatchPoolExtractor, model_from_checkpoint, sample
    from .grid import read_grid, write_grid
    from .mesh import read_obj
    from .nn.checkpoint import load_checkpoint
    from .nn.layers import make_rng
    from .nn.tensor import Tensor, no_grad
    from .pruning import OccupancyPyramid
    from .uv import load_image
    from .voxelize import voxelize_surface
    vae = _load_vae(vae_path)
    dit, stats = model_from_checkpoint(*load_checkpoint(dit_path))
    res = vae.config.resolution
    pyramid = OccupancyPyramid.build(voxelize_surface(read_obj(mesh_path), res), res)
    cond_grid = read_grid(cond_path)
    global_feats = PatchPoolExtractor()(load_image(image))
    with no_grad():
        if len(cond_grid):
            lat = vae.encode(cond_grid)
            cond = ConditionBundle(lat.coords, lat.mu.data.copy(), global_feats)
        else:
            cond = ConditionBundle(np.zeros((0, 3), dtype=np.int64), np.zeros((0, vae.config.d_latent)),
                                   global_feats)
        coords = pyramid.coarsest
        x0 = sample(dit, coords, cond, steps=steps, guidance=guidance, rng=make_rng(seed))
        z = stats.denormalize(x0) if stats is not None else x0
        grid = vae.decode(Tensor(z), coords, pyramid).to_grid()
    write_grid(out, grid)
    click.echo(f"{out}: {len(grid)} voxels, {steps} steps, guidance {guidance}")


@main.command("segment")
@click.option("--grid", "grid_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--mesh", "mesh_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--eps", default=0.1, show_default=True, type=float)
@click.option("--span", default="semantic", show_default=True)
@click.option("--texture", type=click.Path(dir_okay=False), help="Also write a part-coloured UV texture.")
@click.option("--size", nargs=2, type=int, default=(256, 256), show_default=True, metavar="W H")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def segment_cmd(grid_path, mesh_path, eps, span, texture, size, out):
    """Cluster per-face label colours into parts (one id per line, OBJ face order)."""
    from .grid import read_grid
    from .mesh import read_obj
    from .segmentation import part_texture, segment_mesh, write_face_parts
    from .uv import bake_position_map, save_image
    mesh = read_obj(mesh_path)
    seg, labels = segment_mesh(read_grid(grid_path), mesh, eps, span)
    write_face_parts(out, seg)
    if texture:
        save_image(texture, part_texture(seg, bake_position_map(mesh, *_size(size))))
    click.echo(f"{out}: {seg.num_parts} parts over {len(seg.face_parts)} faces "
               f"({int(labels.flagged.sum())} faces used the nearest-voxel fallback)")


@main.command("eval-miou")
@click.option("--pred", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--gt", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--mesh", "mesh_path", required=True, type=click.Path(exists=True, dir_okay=False))
def eval_miou_cmd(pred, gt, mesh_path):
    """Area-weighted class-agnostic mIoU between two per-face part files."""
    from .mesh import read_obj
    from .segmentation import miou, read_face_parts
    mesh = read_obj(mesh_path)
    click.echo(f"mIoU {miou(read_face_parts(pred), read_face_parts(gt), mesh.face_areas()):.6f}")


@main.command("selftest")
def selftest_cmd():
    """Run the fast invariant checks; exit code 0 iff all pass."""
    from .selftest import run_selftest
    if not run_selftest(click.echo):
        sys.exit(1)


if __name__ == "__main__":
    main()
