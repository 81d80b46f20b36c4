"""Runnable ablation experiments on desk-scale micro-tasks.

* loss ablation: rendering-based L1 versus per-voxel "cube" MSE on the VAE overfit task;
* condition ablation: the flow transformer with and without the sparse latent condition.
"""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass

import numpy as np

from .assets import colored_grid, smooth_color_field, toy_box_asset
from .flow_dit import (AttributeDiT, DiTConfig, DiTTrainer, FeatureExtractor, FlowItem, LatentStats,
                       eval_flow_loss, make_condition)
from .nn.tensor import no_grad
from .render import OrthoCamera, render_position_map, render_view
from .vae import AttributeVAE, VAEConfig, VAETrainer, evaluate, overfit, prepare_sample, supervision_maps

log = logging.getLogger(__name__)

# rotations and a mirror about the view (z) axis; the box is symmetric under all of them
MICRO_TRANSFORMS = (
    np.eye(3),
    np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]),
    np.diag([-1.0, -1.0, 1.0]),
    np.array([[0.0, 1.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]),
    np.diag([-1.0, 1.0, 1.0]),
)


def micro_assets(n_assets: int = 5, resolution: int = 32):
    """Boxes sharing one geometry and one colour field, rearranged by a rigid symmetry.

    Every front view holds the same patch colours in a different layout, so the
    assets can only be told apart from spatially explicit information.
    """
    if n_assets > len(MICRO_TRANSFORMS):
        raise ValueError(f"at most {len(MICRO_TRANSFORMS)} micro-task assets")
    out = []
    for m in MICRO_TRANSFORMS[:n_assets]:
        mesh, _ = toy_box_asset(resolution)
        out.append((mesh, colored_grid(mesh, resolution, field=lambda p, m=m: smooth_color_field(p @ m.T))))
    return out


def pretrain_micro_vae(n_assets: int = 5, steps: int = 300, lr: float = 1e-3, seed: int = 0,
                       config: VAEConfig | None = None) -> AttributeVAE:
    """Jointly fit a VAE on the micro-task assets so its latents carry their colours.

    An untrained encoder is dominated by its position embedding (latents then barely
    differ between assets), which would make any conditional task degenerate.
    """
    cfg = config or VAEConfig(seed=seed, lr=lr)
    vae = AttributeVAE(cfg)
    samples = [prepare_sample(g, supervision_maps(m, cfg.view_size, cfg.views), cfg)
               for m, g in micro_assets(n_assets, cfg.resolution)]
    trainer = VAETrainer(vae)
    for _ in range(steps):
        trainer.train_step(samples)
    return vae


def micro_task_items(vae: AttributeVAE, n_assets: int = 5, view_size: int = 64,
                     extractor: FeatureExtractor | None = None) -> tuple[list[FlowItem], LatentStats]:
    """Normalised clean latents of each asset, conditioned on its rendered front view."""
    raw, conds, coords = [], [], []
    for mesh, grid in micro_assets(n_assets, vae.config.resolution):
        vpm = render_position_map(mesh, OrthoCamera.from_view("+z", view_size, view_size))
        with no_grad():
            lat = vae.encode(grid)
        raw.append(lat.mu.data.copy())
        coords.append(lat.coords)
        conds.append(make_condition(render_view(grid, vpm), vpm, vae, extractor))
    stats = LatentStats.fit(raw)
    return [FlowItem(stats.normalize(z), c, cd) for z, c, cd in zip(raw, coords, conds)], stats


def between_asset_fraction(items: list[FlowItem]) -> float:
    """Share of latent variance explained by which asset it is (0 = condition is useless)."""
    x = np.stack([it.x0 for it in items])
    return float(x.var(axis=0).mean() / x.var())


def train_on_items(config: DiTConfig, items: list[FlowItem], steps: int) -> tuple[AttributeDiT, list[dict]]:
    model = AttributeDiT(config)
    trainer = DiTTrainer(model)
    for _ in range(steps):
        trainer.train_step(items)
    return model, trainer.history


@dataclass
class ConditionAblation:
    seeds: list[int]
    loss_with: list[float]
    loss_without: list[float]

    @property
    def wins(self) -> int:
        """Seeds where removing the sparse condition gives a strictly higher loss."""
        return sum(b > a for a, b in zip(self.loss_with, self.loss_without))


def condition_ablation(items: list[FlowItem], seeds=range(5), steps: int = 1000, lr: float = 1e-3,
                       base: DiTConfig | None = None) -> ConditionAblation:
    """Final (fixed-draw) training loss of the full model versus the no-sparse-condition model."""
    base = base or DiTConfig(lr=lr)
    with_, without = [], []
    for seed in seeds:
        for flag, out in ((True, with_), (False, without)):
            cfg = dataclasses.replace(base, seed=seed, use_sparse_condition=flag)
            model, _ = train_on_items(cfg, items, steps)
            out.append(eval_flow_loss(model, items))
            log.info("seed %d sparse=%s loss %.5f", seed, flag, out[-1])
    return ConditionAblation(list(seeds), with_, without)


@dataclass
class LossAblation:
    render: dict
    cube: dict
    render_history: list
    cube_history: list


def loss_ablation(grid, mesh, steps: int = 2000, seed: int = 0, **overrides) -> LossAblation:
    """Train the same VAE twice, once per reconstruction objective, and evaluate both."""
    out = {}
    for mode in ("render", "cube"):
        cfg = VAEConfig(seed=seed, loss_mode=mode, steps=steps, **overrides)
        _, metrics, hist = overfit(grid, mesh, cfg)
        out[mode] = (metrics, hist)
    return LossAblation(out["render"][0], out["cube"][0], out["render"][1], out["cube"][1])
