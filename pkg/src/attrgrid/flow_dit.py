"""Image-conditioned rectified-flow transformer over sparse VAE latents.

Convention: ``x_0`` is data, ``x_1`` is Gaussian noise, ``x_t = (1 - t) x_0 + t x_1``
and the network regresses the constant velocity ``x_1 - x_0``. Sampling integrates
from t = 1 down to t = 0 with Euler steps.

Each block mixes tokens with windowed sparse self-attention, then adds two
independent cross-attention branches: one over position-embedded VAE latents of
the projected front view ("sparse condition"), one over global image tokens.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Protocol

import numpy as np

from .errors import AttrGridError, LayoutError
from .nn import functional as F
from .nn.layers import CrossAttention, LayerNorm, Linear, MLP, Module, WindowedSelfAttention, make_rng
from .nn.optim import AdamW
from .nn.tensor import Tensor, concat, gelu, no_grad
from .projection import project_image_to_grid
from .uv import PositionMap, TextureImage

log = logging.getLogger(__name__)


# -- conditioning ------------------------------------------------------------------------

class FeatureExtractor(Protocol):
    out_dim: int

    def __call__(self, img: TextureImage) -> np.ndarray: ...


class PatchPoolExtractor:
    """Global image tokens: average-pooled colour of each cell of a ``grid x grid`` split.

    Each token is ``[masked mean RGB, coverage]``; the DiT maps it to model width with
    one learned linear layer. The tokens carry no position, so the global branch sees
    the image as a bag of patch colours. ``n_freq > 0`` appends a sinusoidal cell
    position (off by default).
    """

    def __init__(self, grid: int = 8, n_freq: int = 0):
        self.grid = grid
        self.n_freq = n_freq
        self.out_dim = 3 + 1 + 4 * n_freq

    def __call__(self, img: TextureImage) -> np.ndarray:
        g = self.grid
        h, w = img.height, img.width
        rows = np.minimum((np.arange(h) * g) // h, g - 1)
        cols = np.minimum((np.arange(w) * g) // w, g - 1)
        cell = rows[:, None] * g + cols[None, :]
        m = img.mask.astype(np.float64)
        count = np.bincount(cell.ravel(), weights=m.ravel(), minlength=g * g)
        area = np.bincount(cell.ravel(), minlength=g * g).astype(np.float64)
        rgb = np.stack([np.bincount(cell.ravel(), weights=(img.values[..., c] * m).ravel(), minlength=g * g)
                        for c in range(3)], axis=1)
        mean = rgb / np.maximum(count, 1.0)[:, None]
        parts = [mean, (count / area)[:, None]]
        if self.n_freq:
            cy, cx = np.divmod(np.arange(g * g), g)
            parts += [F.sinusoid(cy, self.n_freq, base=g), F.sinusoid(cx, self.n_freq, base=g)]
        return np.concatenate(parts, axis=1)


@dataclass
class ConditionBundle:
    sparse_coords: np.ndarray      # (Ns, 3) latent-space coordinates
    sparse_feats: np.ndarray       # (Ns, d_latent) encoder means
    global_feats: np.ndarray       # (Ng, d_global)

    @property
    def n_sparse(self) -> int:
        return len(self.sparse_coords)

    @staticmethod
    def concat(bundles: list["ConditionBundle"]) -> "ConditionBundle":
        """Multi-view conditioning: concatenate per-view token sets."""
        return ConditionBundle(
            np.concatenate([b.sparse_coords for b in bundles]).reshape(-1, 3),
            np.concatenate([b.sparse_feats for b in bundles]),
            np.concatenate([b.global_feats for b in bundles]),
        )


def make_condition(front_img: TextureImage, vpm: PositionMap, vae, extractor: FeatureExtractor | None = None
                   ) -> ConditionBundle:
    """Project the front view into a grid, encode it with the VAE (means only)."""
    if vae is None:
        raise AttrGridError("a trained VAE is required to build the sparse condition")
    extractor = extractor or PatchPoolExtractor()
    cfg = vae.config
    cond_grid = project_image_to_grid(front_img, vpm, cfg.resolution, cfg.channel_layout)
    g = extractor(front_img)
    if len(cond_grid) == 0:
        return ConditionBundle(np.zeros((0, 3), dtype=np.int64), np.zeros((0, cfg.d_latent)), g)
    with no_grad():
        lat = vae.encode(cond_grid)
    return ConditionBundle(lat.coords, lat.mu.data.copy(), g)


# -- rectified flow ----------------------------------------------------------------------

def rf_interpolate(x0, eps, t):
    x0, eps = np.asarray(x0, dtype=np.float64), np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise LayoutError(f"shape mismatch {x0.shape} vs {eps.shape}")
    if not 0.0 <= t <= 1.0:
        raise LayoutError("t must lie in [0, 1]")
    return (1.0 - t) * x0 + t * eps


def rf_target(x0, eps):
    x0, eps = np.asarray(x0, dtype=np.float64), np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise LayoutError(f"shape mismatch {x0.shape} vs {eps.shape}")
    return eps - x0


VelocityFn = Callable[[np.ndarray, float, bool], np.ndarray]


def euler_sample(velocity: VelocityFn, x1: np.ndarray, steps: int = 15, guidance: float = 3.0) -> np.ndarray:
    """Integrate from t=1 (noise) to t=0 with classifier-free guidance.

    ``velocity(x, t, conditional)`` returns the conditional or the null-condition
    prediction. With ``guidance == 1`` the null pass is skipped entirely, so the
    result is exactly the conditional path.

    The state is kept as ``x_k = x_1 + (t_k - 1) * vbar_k`` where ``vbar_k`` is the
    step-weighted running mean of the velocities seen so far. This is plain Euler,
    but a constant field leaves ``vbar`` bit-identical, so it lands on ``x_1 - c``
    exactly for any step count.
    """
    if steps < 1:
        raise LayoutError("steps must be >= 1")
    x1 = np.array(x1, dtype=np.float64)
    x = x1
    vbar = None
    ts = np.linspace(1.0, 0.0, steps + 1)
    for i in range(steps):
        t = ts[i]
        v_cond = velocity(x, t, True)
        if guidance == 1.0:
            v = v_cond
        else:
            v_null = velocity(x, t, False)
            v = v_null + guidance * (v_cond - v_null)
        if vbar is None:
            vbar = np.array(v, dtype=np.float64)
        else:
            vbar = vbar + ((t - ts[i + 1]) / (1.0 - ts[i + 1])) * (v - vbar)
        x = x1 + (ts[i + 1] - 1.0) * vbar
    return x


# -- model -------------------------------------------------------------------------------

@dataclass
class DiTConfig:
    d_latent: int = 16
    d_model: int = 96
    heads: int = 4
    blocks: int = 2
    window: int = 4
    mlp_ratio: int = 2
    d_global: int = PatchPoolExtractor().out_dim
    use_sparse_condition: bool = True
    use_global_condition: bool = True
    drop_prob: float = 0.1
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.01
    seed: int = 0
    steps: int = 1000
    sample_steps: int = 15
    guidance: float = 3.0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.d_model % 6:
            raise LayoutError("d_model must be divisible by 6 for the position embedding")

    def to_dict(self) -> dict:
        return asdict(self)


class DiTBlock(Module):
    def __init__(self, cfg: DiTConfig, rng: np.random.Generator):
        d = cfg.d_model
        self.t_proj = Linear(d, d, rng)
        self.norm1 = LayerNorm(d)
        self.attn = WindowedSelfAttention(d, cfg.heads, cfg.window, rng)
        self.norm2 = LayerNorm(d)
        self.cross_sparse = CrossAttention(d, d, cfg.heads, rng) if cfg.use_sparse_condition else None
        self.cross_global = CrossAttention(d, d, cfg.heads, rng) if cfg.use_global_condition else None
        self.norm3 = LayerNorm(d)
        self.mlp = MLP(d, cfg.mlp_ratio * d, rng)

    def conditioning(self, h: Tensor, ctx_sparse: Tensor | None, ctx_global: Tensor | None) -> Tensor:
        """Hybrid cross-attention: the sum of the two independent branches."""
        out = None
        if self.cross_sparse is not None:
            out = self.cross_sparse(h, ctx_sparse)
        if self.cross_global is not None:
            g = self.cross_global(h, ctx_global)
            out = g if out is None else out + g
        return out

    def __call__(self, tokens: F.SparseTokenSet, temb: Tensor, ctx_sparse, ctx_global, partition) -> F.SparseTokenSet:
        x = tokens.features + self.t_proj(temb)
        x = x + self.attn(tokens.replace(self.norm1(x)), partition).features
        cond = self.conditioning(self.norm2(x), ctx_sparse, ctx_global)
        if cond is not None:
            x = x + cond
        x = x + self.mlp(self.norm3(x))
        return tokens.replace(x)


class AttributeDiT(Module):
    def __init__(self, config: DiTConfig):
        self.config = config
        rng = make_rng(config.seed)
        d = config.d_model
        self.x_in = Linear(config.d_latent, d, rng)
        self.t_mlp = MLP(d, d, rng)
        if config.use_sparse_condition:
            self.sparse_in = Linear(config.d_latent, d, rng)
            self.null_sparse = Tensor(rng.normal(0.0, 0.02, (1, d)), requires_grad=True)
        if config.use_global_condition:
            self.global_in = Linear(config.d_global, d, rng)
            self.null_global = Tensor(rng.normal(0.0, 0.02, (1, d)), requires_grad=True)
        self.blocks = [DiTBlock(config, rng) for _ in range(config.blocks)]
        self.out_norm = LayerNorm(d)
        self.out = Linear(d, config.d_latent, rng)

    def contexts(self, cond: ConditionBundle | None, drop: bool) -> tuple[Tensor | None, Tensor | None]:
        cfg = self.config
        ctx_s = ctx_g = None
        if cfg.use_sparse_condition:
            if drop or cond is None or cond.n_sparse == 0:
                ctx_s = self.null_sparse
            else:
                pe = F.position_embed(cond.sparse_coords, cfg.d_model)
                ctx_s = self.sparse_in(Tensor(cond.sparse_feats)) + pe
        if cfg.use_global_condition:
            if drop or cond is None or len(cond.global_feats) == 0:
                ctx_g = self.null_global
            else:
                ctx_g = self.global_in(Tensor(cond.global_feats))
        return ctx_s, ctx_g

    def forward(self, x_t, coords: np.ndarray, t: float, cond: ConditionBundle | None,
                drop: bool = False, resolution: int = 4) -> Tensor:
        """Predicted velocity for tokens at ``coords`` (latent-space coordinates)."""
        cfg = self.config
        x_t = x_t if isinstance(x_t, Tensor) else Tensor(x_t)
        if x_t.shape[1] != cfg.d_latent:
            raise LayoutError(f"latent width {x_t.shape[1]} != {cfg.d_latent}")
        temb = self.t_mlp(Tensor(F.timestep_embed(t, cfg.d_model)))
        h = self.x_in(x_t) + F.position_embed(coords, cfg.d_model)
        tokens = F.SparseTokenSet(coords, h, resolution)
        partition = F.block_partition(coords, cfg.window)
        ctx_s, ctx_g = self.contexts(cond, drop)
        for block in self.blocks:
            tokens = block(tokens, temb, ctx_s, ctx_g, partition)
        return self.out(self.out_norm(tokens.features))

    __call__ = forward

    def velocity_fn(self, coords: np.ndarray, cond: ConditionBundle | None) -> VelocityFn:
        def velocity(x, t, conditional):
            with no_grad():
                return self.forward(x, coords, t, cond, drop=not conditional).data
        return velocity


def sample(model: AttributeDiT, coords: np.ndarray, cond: ConditionBundle | None,
           steps: int = 15, guidance: float = 3.0, rng: np.random.Generator | None = None) -> np.ndarray:
    """Draw ``x_1 ~ N(0, I)`` and integrate to an ``x_0`` estimate (normalised latents)."""
    rng = rng or make_rng(0)
    x1 = rng.standard_normal((len(coords), model.config.d_latent))
    return euler_sample(model.velocity_fn(coords, cond), x1, steps, guidance)


# -- training ----------------------------------------------------------------------------

@dataclass
class FlowItem:
    """One training example: normalised clean latents, their coordinates, the condition."""

    x0: np.ndarray
    coords: np.ndarray
    cond: ConditionBundle | None


@dataclass
class LatentStats:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, latents: list[np.ndarray]) -> "LatentStats":
        allz = np.concatenate(latents)
        return cls(allz.mean(axis=0), np.maximum(allz.std(axis=0), 1e-6))

    def normalize(self, z):
        return (np.asarray(z) - self.mean) / self.std

    def denormalize(self, x):
        return np.asarray(x) * self.std + self.mean


class DiTTrainer:
    def __init__(self, model: AttributeDiT, seed: int | None = None):
        cfg = model.config
        self.model = model
        self.opt = AdamW(model.parameters(), lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay)
        self.rng = make_rng(cfg.seed + 7 if seed is None else seed)
        self.history: list[dict] = []

    def train_step(self, batch: list[FlowItem], drop_prob: float | None = None) -> dict:
        p = self.model.config.drop_prob if drop_prob is None else drop_prob
        self.opt.zero_grad()
        total = None
        dropped = 0
        for item in batch:
            t = float(self.rng.uniform())
            eps = self.rng.standard_normal(item.x0.shape)
            drop = bool(self.rng.uniform() < p)
            dropped += drop
            pred = self.model(rf_interpolate(item.x0, eps, t), item.coords, t, item.cond, drop=drop)
            loss = F.mse_loss(pred, rf_target(item.x0, eps))
            total = loss if total is None else total + loss
        total = total * (1.0 / len(batch))
        value = float(total.data)
        if not math.isfinite(value):
            raise AttrGridError(f"non-finite DiT loss at step {self.opt.step_count}")
        total.backward()
        self.opt.step()
        rec = {"step": self.opt.step_count, "loss": value, "dropped": dropped}
        self.history.append(rec)
        return rec


def drop_decisions(n: int, drop_prob: float, rng: np.random.Generator) -> np.ndarray:
    """The per-sample condition-drop draws used in training, exposed for auditing."""
    return rng.uniform(size=n) < drop_prob


def eval_flow_loss(model: AttributeDiT, items: list[FlowItem], draws: int = 32, seed: int = 1234) -> float:
    """Conditional flow-matching loss on a fixed set of (t, noise) draws."""
    rng = make_rng(seed)
    total, count = 0.0, 0
    with no_grad():
        for item in items:
            for _ in range(draws):
                t = float(rng.uniform())
                eps = rng.standard_normal(item.x0.shape)
                pred = model(rf_interpolate(item.x0, eps, t), item.coords, t, item.cond).data
                total += float(np.mean((pred - rf_target(item.x0, eps)) ** 2))
                count += 1
    return total / count


def model_from_checkpoint(params: dict, meta: dict) -> tuple[AttributeDiT, LatentStats | None]:
    if meta.get("kind") != "dit":
        raise AttrGridError("checkpoint does not hold a DiT")
    model = AttributeDiT(DiTConfig(**meta["config"]))
    model.load_state_dict(params)
    stats = None
    if "latent_mean" in meta:
        stats = LatentStats(np.array(meta["latent_mean"]), np.array(meta["latent_std"]))
    return model, stats


# -- toy benchmark -----------------------------------------------------------------------

class ToyVelocityNet(Module):
    def __init__(self, rng: np.random.Generator, hidden: int = 64, t_dim: int = 16):
        self.t_dim = t_dim
        self.fc1 = Linear(2 + t_dim, hidden, rng)
        self.fc2 = Linear(hidden, hidden, rng)
        self.fc3 = Linear(hidden, 2, rng)

    def __call__(self, x: np.ndarray, t: np.ndarray) -> Tensor:
        temb = F.sinusoid(np.asarray(t) * 100.0, self.t_dim // 2)
        h = gelu(self.fc1(Tensor(np.concatenate([x, temb], axis=1))))
        h = gelu(self.fc2(h))
        return self.fc3(h)


@dataclass
class ToyFlowReport:
    true_means: np.ndarray
    sampled_means: np.ndarray
    mean_errors: np.ndarray
    mode_fractions: np.ndarray
    final_loss: float
    samples: np.ndarray = field(repr=False)

    @property
    def passed(self) -> bool:
        return bool(np.all(self.mean_errors < 0.1))


def two_gaussian_mixture(n: int, rng: np.random.Generator, means=((-2.0, 0.0), (2.0, 0.0)),
                         std: float = 0.3) -> np.ndarray:
    means = np.asarray(means, dtype=np.float64)
    which = rng.integers(0, len(means), size=n)
    return means[which] + std * rng.standard_normal((n, 2))


def toy_flow_benchmark(seed: int = 0, train_steps: int = 2000, batch: int = 1024, lr: float = 2e-3,
                       n_samples: int = 4000, sample_steps: int = 50,
                       means=((-2.0, 0.0), (2.0, 0.0))) -> ToyFlowReport:
    """Train a small MLP with rectified flow on a 2D two-Gaussian mixture and audit its samples.

    ``train_steps=0`` gives the untrained negative control.
    """
    rng = make_rng(seed)
    net = ToyVelocityNet(rng)
    opt = AdamW(net.parameters(), lr=lr, weight_decay=0.0)
    means = np.asarray(means, dtype=np.float64)
    loss_val = float("nan")
    for step in range(train_steps):
        # cosine decay: the late low-noise updates sharpen the modes noticeably
        opt.lr = 0.5 * lr * (1.0 + math.cos(math.pi * step / train_steps))
        x0 = two_gaussian_mixture(batch, rng, means)
        eps = rng.standard_normal(x0.shape)
        t = rng.uniform(size=(batch, 1))
        xt = (1.0 - t) * x0 + t * eps
        opt.zero_grad()
        loss = F.mse_loss(net(xt, t[:, 0]), eps - x0)
        loss.backward()
        opt.step()
        loss_val = float(loss.data)

    def velocity(x, t, conditional):
        with no_grad():
            return net(x, np.full(len(x), t)).data

    x1 = rng.standard_normal((n_samples, 2))
    xs = euler_sample(velocity, x1, sample_steps, guidance=1.0)
    nearest = np.argmin(((xs[:, None, :] - means[None]) ** 2).sum(-1), axis=1)
    sampled = np.array([xs[nearest == m].mean(axis=0) if np.any(nearest == m) else np.full(2, np.inf)
                        for m in range(len(means))])
    errors = np.linalg.norm(sampled - means, axis=1)
    fractions = np.bincount(nearest, minlength=len(means)) / n_samples
    return ToyFlowReport(means, sampled, errors, fractions, loss_val, xs)
