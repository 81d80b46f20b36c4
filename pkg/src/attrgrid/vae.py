"""Sparse attribute VAE: strided sparse convs -> transformer -> latent -> transformer ->
transposed sparse convs with pruning after every upsampling stage.

Training is teacher forced: after each upsampling stage the decoder keeps exactly
the ground-truth occupancy of that level, while the prune head is supervised with
BCE on every candidate child.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import AttrGridError, EmptyInputError, LayoutError
from .grid import ChannelLayout, SparseAttributeGrid, encode_keys, require_nonempty
from .nn import functional as F
from .nn.layers import LayerNorm, Linear, Module, SparseConv3d, SparseUpsample, TransformerBlock, make_rng
from .nn.optim import AdamW
from .nn.tensor import Tensor, absolute, clip, concat, exp, gelu, no_grad, sigmoid
from .pruning import OccupancyPyramid, prune_targets
from .render import default_cameras, render_position_map, view_stencil
from .mesh import TriangleMesh
from .uv import PositionMap

log = logging.getLogger(__name__)

LOGVAR_MIN, LOGVAR_MAX = -30.0, 20.0
PE_DIM = 48


@dataclass
class VAEConfig:
    resolution: int = 32
    layout: tuple = (3, 0, 0, 0)
    widths: tuple = (32, 64, 128)
    d_latent: int = 16
    blocks: int = 2
    heads: int = 4
    window: int = 4
    mlp_ratio: int = 2
    seed: int = 0
    # loss
    lambda_l1: float = 1.0
    lambda_prune: float = 1.0
    lambda_kl: float = 1e-6
    lambda_lpips: float = 0.0
    lambda_adv: float = 0.0
    loss_mode: str = "render"          # "render" or "cube"
    views: int = 6
    view_size: int = 64
    prune_dilation: int = 0
    # optimiser
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.01
    steps: int = 2000

    def __post_init__(self):
        self.layout = tuple(self.layout)
        self.widths = tuple(self.widths)
        self.betas = tuple(self.betas)
        if len(self.widths) != 3:
            raise LayoutError("the VAE has exactly three down/up-sampling stages")
        if self.resolution % 8:
            raise LayoutError("resolution must be divisible by 8")
        if self.loss_mode not in ("render", "cube"):
            raise LayoutError(f"unknown loss mode {self.loss_mode!r}")
        if self.lambda_lpips or self.lambda_adv:
            raise LayoutError("perceptual and adversarial terms are not implemented; keep their weights at 0")

    @property
    def channel_layout(self) -> ChannelLayout:
        return ChannelLayout(*self.layout)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LatentGrid:
    coords: np.ndarray      # (N, 3) at resolution R / 8
    mu: Tensor              # (N, d_lat)
    logvar: Tensor          # (N, d_lat)
    resolution: int

    def __len__(self) -> int:
        return len(self.coords)


@dataclass
class DecodeResult:
    coords: np.ndarray
    attrs: Tensor
    resolution: int
    layout: ChannelLayout
    stage_coords: list = field(default_factory=list)   # candidate coords per stage
    stage_logits: list = field(default_factory=list)   # prune logits per stage (Tensor)

    def to_grid(self) -> SparseAttributeGrid:
        values = np.clip(self.attrs.data, 0.0, 1.0) if self.layout.has("color") else self.attrs.data
        attrs = self.attrs.data.copy()
        if self.layout.has("color"):
            attrs[:, self.layout.span("color")] = values[:, self.layout.span("color")]
        return SparseAttributeGrid.from_arrays(self.coords, attrs, self.resolution, self.layout)


# -- plans: precomputed index structure for one occupancy pyramid --------------------------

@dataclass
class EncoderPlan:
    coords: np.ndarray
    resolution: int
    neighbors: list          # per stage (out_coords, nbr)
    latent_coords: np.ndarray
    partition: tuple
    pe: Tensor


def encoder_plan(coords: np.ndarray, resolution: int, window: int) -> EncoderPlan:
    nbrs = []
    cur, r = coords, resolution
    for _ in range(3):
        out, nbr = F.conv_neighbors(cur, r, 2)
        nbrs.append((out, nbr))
        cur, r = out, r // 2
    return EncoderPlan(coords, resolution, nbrs, cur, F.block_partition(cur, window),
                       F.position_embed(cur, PE_DIM))


@dataclass
class DecoderStage:
    kids: np.ndarray
    order: np.ndarray
    kid_pe: Tensor
    labels: np.ndarray | None
    keep_idx: np.ndarray | None
    kept: np.ndarray | None
    neighbors: tuple | None


def decoder_stage(parent_coords: np.ndarray, child_res: int, target: np.ndarray | None,
                  dilation: int = 0) -> DecoderStage:
    kids, order = F.upsample_plan(parent_coords)
    pe = F.position_embed(kids, PE_DIM)
    if target is None:
        return DecoderStage(kids, order, pe, None, None, None, None)
    labels = prune_targets(kids, target, child_res, dilation)
    kid_keys = encode_keys(kids, child_res)
    tgt_keys = encode_keys(target, child_res)
    keep_idx = np.searchsorted(kid_keys, tgt_keys)
    if np.any(keep_idx >= len(kid_keys)) or np.any(kid_keys[np.minimum(keep_idx, len(kid_keys) - 1)] != tgt_keys):
        raise AttrGridError("target occupancy is not contained in the children of the previous level")
    return DecoderStage(kids, order, pe, labels, keep_idx, target,
                        F.conv_neighbors(target, child_res, 1))


def decoder_plan(pyramid: OccupancyPyramid, dilation: int = 0) -> list[DecoderStage]:
    stages = []
    for s in (3, 2, 1):
        stages.append(decoder_stage(pyramid.levels[s], pyramid.level_resolution(s - 1),
                                    pyramid.levels[s - 1], dilation))
    return stages


# -- model -------------------------------------------------------------------------------

class AttributeVAE(Module):
    def __init__(self, config: VAEConfig):
        self.config = config
        rng = make_rng(config.seed)
        k = config.channel_layout.k
        w1, w2, w3 = config.widths
        d, dl = w3, config.d_latent
        self.enc_convs = [SparseConv3d(k, w1, rng, 2), SparseConv3d(w1, w2, rng, 2),
                          SparseConv3d(w2, w3, rng, 2)]
        self.enc_pe = Linear(PE_DIM, d, rng, bias=False)
        self.enc_blocks = [TransformerBlock(d, config.heads, config.window, rng, config.mlp_ratio)
                           for _ in range(config.blocks)]
        self.enc_norm = LayerNorm(d)
        self.enc_out = Linear(d, 2 * dl, rng)

        self.dec_in = Linear(dl, d, rng)
        self.dec_pe = Linear(PE_DIM, d, rng, bias=False)
        self.dec_blocks = [TransformerBlock(d, config.heads, config.window, rng, config.mlp_ratio)
                           for _ in range(config.blocks)]
        self.dec_norm = LayerNorm(d)
        up_widths = [(w3, w2), (w2, w1), (w1, w1)]
        self.ups = [SparseUpsample(a, b, rng) for a, b in up_widths]
        self.up_pe = [Linear(PE_DIM, b, rng, bias=False) for _, b in up_widths]
        self.prune_heads = [Linear(b, 1, rng) for _, b in up_widths]
        self.refines = [SparseConv3d(b, b, rng, 1) for _, b in up_widths]
        self.out_norm = LayerNorm(w1)
        self.out = Linear(w1, k, rng)

    # -- encoder ---------------------------------------------------------------------
    def encode(self, grid: SparseAttributeGrid, plan: EncoderPlan | None = None) -> LatentGrid:
        require_nonempty(grid)
        cfg = self.config
        if grid.resolution != cfg.resolution or grid.layout != cfg.channel_layout:
            raise LayoutError("grid resolution/layout does not match the VAE config")
        if plan is None:
            plan = encoder_plan(grid.coords, grid.resolution, cfg.window)
        tokens = F.SparseTokenSet(grid.coords, Tensor(grid.attrs), grid.resolution)
        for conv, nbr in zip(self.enc_convs, plan.neighbors):
            tokens = conv(tokens, nbr)
            tokens = tokens.replace(gelu(tokens.features))
        tokens = tokens.replace(tokens.features + self.enc_pe(plan.pe))
        for block in self.enc_blocks:
            tokens = block(tokens, plan.partition)
        stats = self.enc_out(self.enc_norm(tokens.features))
        dl = cfg.d_latent
        mu = stats[:, :dl]
        logvar = clip(stats[:, dl:], LOGVAR_MIN, LOGVAR_MAX)
        return LatentGrid(tokens.coords, mu, logvar, tokens.resolution)

    # -- decoder ---------------------------------------------------------------------
    def decode(self, z: Tensor, latent_coords: np.ndarray,
               target: OccupancyPyramid | list[DecoderStage] | None = None) -> DecodeResult:
        """Decode latent tokens. With ``target`` the kept voxels are forced to its occupancy."""
        cfg = self.config
        r = cfg.resolution // 8
        if isinstance(target, OccupancyPyramid):
            if not np.array_equal(target.coarsest, latent_coords):
                raise LayoutError("latent coordinates do not match the target pyramid's coarsest level")
            stages = decoder_plan(target, cfg.prune_dilation)
        else:
            stages = target
        x = self.dec_in(z) + self.dec_pe(F.position_embed(latent_coords, PE_DIM))
        tokens = F.SparseTokenSet(latent_coords, x, r)
        partition = F.block_partition(latent_coords, cfg.window)
        for block in self.dec_blocks:
            tokens = block(tokens, partition)
        tokens = tokens.replace(self.dec_norm(tokens.features))
        result = DecodeResult(latent_coords, tokens.features, cfg.resolution, cfg.channel_layout)
        for s in range(3):
            stage = stages[s] if stages is not None else decoder_stage(tokens.coords, r * 2, None)
            up = self.ups[s](tokens, (stage.kids, stage.order))
            h = gelu(up.features + self.up_pe[s](stage.kid_pe))
            logits = self.prune_heads[s](h).reshape(-1)
            result.stage_coords.append(stage.kids)
            result.stage_logits.append(logits)
            if stage.keep_idx is not None:
                keep_idx, kept, nbrs = stage.keep_idx, stage.kept, stage.neighbors
            else:
                keep_idx = np.nonzero(logits.data >= 0.0)[0]
                kept = stage.kids[keep_idx]
                nbrs = F.conv_neighbors(kept, r * 2, 1)
            r *= 2
            feats = F.take_rows(h, keep_idx)
            tokens = F.SparseTokenSet(kept, feats, r)
            if len(kept):
                refined = self.refines[s](tokens.replace(gelu(feats)), nbrs)
                tokens = tokens.replace(feats + refined.features)
        raw = self.out(self.out_norm(tokens.features)) if len(tokens) else Tensor(
            np.zeros((0, cfg.channel_layout.k)))
        result.coords = tokens.coords
        result.attrs = self._activate(raw)
        return result

    def _activate(self, raw: Tensor) -> Tensor:
        layout = self.config.channel_layout
        if not layout.has("color"):
            return raw
        parts = []
        start = 0
        for name in ("color", "semantic", "pbr", "extra"):
            width = getattr(layout, name)
            if width == 0:
                continue
            piece = raw[:, start:start + width]
            # colours (and label colours) live in [0, 1]
            parts.append(sigmoid(piece) if name in ("color", "semantic") else piece)
            start += width
        return parts[0] if len(parts) == 1 else concat(parts, axis=1)

    def reconstruct(self, grid: SparseAttributeGrid, *, sample: bool = False,
                    rng: np.random.Generator | None = None, teacher_forced: bool = True) -> DecodeResult:
        lat = self.encode(grid)
        z = reparameterize(lat, rng or make_rng(0)) if sample else lat.mu
        target = OccupancyPyramid.build(grid.coords, grid.resolution) if teacher_forced else None
        return self.decode(z, lat.coords, target)


def reparameterize(lat: LatentGrid, rng: np.random.Generator) -> Tensor:
    """z = mu + exp(logvar / 2) * eps with eps ~ N(0, I) drawn from ``rng``."""
    eps = rng.standard_normal(lat.mu.shape)
    return lat.mu + exp(lat.logvar * 0.5) * Tensor(eps)


# -- losses ------------------------------------------------------------------------------

def kl_loss(lat: LatentGrid) -> Tensor:
    """Mean over tokens and channels of 0.5 * (mu^2 + exp(logvar) - 1 - logvar)."""
    mu, lv = lat.mu, lat.logvar
    return ((mu * mu + exp(lv) - 1.0 - lv) * 0.5).mean()


def masked_l1(recon: list[Tensor], target: list[np.ndarray]) -> Tensor:
    """L1 over the valid pixels of all views (each entry already holds valid pixels only)."""
    if len(recon) != len(target):
        raise LayoutError(f"{len(recon)} reconstructed views vs {len(target)} targets")
    total = sum(int(np.prod(t.shape)) for t in target)
    if total == 0:
        return Tensor(0.0)
    acc = None
    for r, t in zip(recon, target):
        if r.shape != t.shape:
            raise LayoutError("view render shape mismatch")
        term = absolute(r - Tensor(t)).sum()
        acc = term if acc is None else acc + term
    return acc * (1.0 / total)


def vae_loss(recon_views: list[Tensor], gt_views: list[np.ndarray], prune_logits: list[Tensor],
             prune_labels: list[np.ndarray], lat: LatentGrid, config: VAEConfig,
             cube: tuple[Tensor, np.ndarray] | None = None) -> tuple[Tensor, dict]:
    """Weighted sum of reconstruction, pruning BCE and KL terms.

    In ``cube`` mode the reconstruction term is the MSE over voxel vectors instead
    of the rendered L1.
    """
    if len(prune_logits) != len(prune_labels):
        raise LayoutError("prune logits and labels are not aligned by stage")
    if config.loss_mode == "cube":
        pred, gt = cube
        recon = F.mse_loss(pred, gt)
    else:
        recon = masked_l1(recon_views, gt_views)
    if prune_logits:
        logits = concat([l.reshape(-1) for l in prune_logits], axis=0)
        labels = np.concatenate([np.asarray(y).reshape(-1) for y in prune_labels])
        prune = F.bce_with_logits(logits, labels)
    else:
        prune = Tensor(0.0)
    kl = kl_loss(lat)
    total = recon * config.lambda_l1 + prune * config.lambda_prune + kl * config.lambda_kl
    terms = {"recon": float(recon.data), "prune": float(prune.data), "kl": float(kl.data),
             "lpips": 0.0, "adv": 0.0, "total": float(total.data)}
    return total, terms


# -- training ----------------------------------------------------------------------------

@dataclass
class VAESample:
    """A grid plus everything precomputed for teacher-forced training on it."""

    grid: SparseAttributeGrid
    enc: EncoderPlan
    dec: list
    stencils: list          # per view (idx, w)
    targets: list           # per view (P, k) ground-truth renders of valid pixels

    @property
    def prune_labels(self) -> list[np.ndarray]:
        return [s.labels for s in self.dec]


def supervision_maps(mesh: TriangleMesh, size: int, count: int) -> list[PositionMap]:
    return [render_position_map(mesh, cam) for cam in default_cameras(size, size, count)]


def prepare_sample(grid: SparseAttributeGrid, view_maps: list[PositionMap], config: VAEConfig) -> VAESample:
    pyramid = OccupancyPyramid.build(grid.coords, grid.resolution)
    stencils, targets = [], []
    for vpm in view_maps:
        idx, w = view_stencil(grid, vpm)
        stencils.append((idx, w))
        gt = np.zeros((len(idx), grid.k))
        for c in range(8):
            present = idx[:, c] >= 0
            gt[present] += w[present, c, None] * grid.attrs[idx[present, c]]
        targets.append(gt)
    return VAESample(grid, encoder_plan(grid.coords, grid.resolution, config.window),
                     decoder_plan(pyramid, config.prune_dilation), stencils, targets)


def render_decoded(attrs: Tensor, sample: VAESample) -> list[Tensor]:
    return [F.interp_gather(attrs, idx, w) for idx, w in sample.stencils]


def sample_loss(model: AttributeVAE, sample: VAESample, rng: np.random.Generator | None,
                *, stochastic: bool = True) -> tuple[Tensor, dict, DecodeResult]:
    lat = model.encode(sample.grid, sample.enc)
    z = reparameterize(lat, rng) if stochastic else lat.mu
    dec = model.decode(z, lat.coords, sample.dec)
    views = render_decoded(dec.attrs, sample) if model.config.loss_mode == "render" else []
    total, terms = vae_loss(views, sample.targets, dec.stage_logits, sample.prune_labels, lat,
                            model.config, cube=(dec.attrs, sample.grid.attrs))
    return total, terms, dec


class NonFiniteLoss(AttrGridError):
    pass


class VAETrainer:
    def __init__(self, model: AttributeVAE, seed: int | None = None):
        cfg = model.config
        self.model = model
        self.opt = AdamW(model.parameters(), lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay)
        self.rng = make_rng(cfg.seed + 1 if seed is None else seed)
        self.history: list[dict] = []

    def train_step(self, batch: list[VAESample]) -> dict:
        self.opt.zero_grad()
        total = None
        record: dict = {}
        for sample in batch:
            loss, terms, _ = sample_loss(self.model, sample, self.rng)
            total = loss if total is None else total + loss
            for key, val in terms.items():
                record[key] = record.get(key, 0.0) + val / len(batch)
        total = total * (1.0 / len(batch))
        if not math.isfinite(float(total.data)):
            raise NonFiniteLoss(f"non-finite loss at step {self.opt.step_count}: {record}")
        total.backward()
        self.opt.step()
        record["step"] = self.opt.step_count
        self.history.append(record)
        return record


def evaluate(model: AttributeVAE, sample: VAESample) -> dict:
    """Deterministic (mean-latent) teacher-forced metrics."""
    with no_grad():
        lat = model.encode(sample.grid, sample.enc)
        dec = model.decode(lat.mu, lat.coords, sample.dec)
        views = render_decoded(dec.attrs, sample)
        l1 = float(masked_l1(views, sample.targets).data)
        logits = np.concatenate([l.data.reshape(-1) for l in dec.stage_logits])
        labels = np.concatenate(sample.prune_labels)
        acc = float(np.mean((logits >= 0.0) == (labels > 0.5)))
        mse = float(np.mean((dec.attrs.data - sample.grid.attrs) ** 2))
    return {"render_l1": l1, "prune_acc": acc, "cube_mse": mse}


def overfit(grid: SparseAttributeGrid, mesh: TriangleMesh, config: VAEConfig,
            steps: int | None = None, log_every: int = 0) -> tuple[AttributeVAE, dict, list]:
    """Train on a single asset; returns the model, final metrics and the loss history."""
    model = AttributeVAE(config)
    maps = supervision_maps(mesh, config.view_size, config.views)
    sample = prepare_sample(grid, maps, config)
    trainer = VAETrainer(model)
    for i in range(steps if steps is not None else config.steps):
        rec = trainer.train_step([sample])
        if log_every and (i + 1) % log_every == 0:
            log.info("step %d %s", i + 1, {k: round(v, 5) for k, v in rec.items()})
    return model, evaluate(model, sample), trainer.history


def model_from_checkpoint(params: dict, meta: dict) -> AttributeVAE:
    if meta.get("kind") != "vae":
        raise AttrGridError("checkpoint does not hold a VAE")
    model = AttributeVAE(VAEConfig(**meta["config"]))
    model.load_state_dict(params)
    return model
