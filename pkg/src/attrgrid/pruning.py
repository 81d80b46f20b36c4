"""Occupancy pyramids, prune targets and the pruning BCE used by the VAE decoder."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BoundsError, LayoutError
from .grid import SparseAttributeGrid, decode_keys, encode_keys

PRUNE_THRESHOLD = 0.5


def downsample_occupancy(coords, factor: int, resolution: int) -> np.ndarray:
    """Sorted unique coarse coordinates ``floor(c / factor)``."""
    if factor < 1 or resolution % factor:
        raise BoundsError(f"factor {factor} does not divide resolution {resolution}")
    c = np.asarray(coords, dtype=np.int64).reshape(-1, 3) // factor
    coarse = resolution // factor
    return decode_keys(np.unique(encode_keys(c, coarse)), coarse)


def children(coords) -> np.ndarray:
    """All 8 children of each coordinate at twice the resolution, sorted."""
    c = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    offs = np.array([[(o >> 2) & 1, (o >> 1) & 1, o & 1] for o in range(8)])
    kids = (2 * c[:, None, :] + offs[None]).reshape(-1, 3)
    order = np.lexsort((kids[:, 2], kids[:, 1], kids[:, 0]))
    return kids[order]


@dataclass
class OccupancyPyramid:
    """Occupancy at R, R/2, R/4, R/8 (``levels[0]`` is the finest)."""

    resolution: int
    levels: list

    @classmethod
    def build(cls, coords, resolution: int, depth: int = 3) -> "OccupancyPyramid":
        levels = [decode_keys(np.unique(encode_keys(coords, resolution)), resolution)]
        for s in range(1, depth + 1):
            levels.append(downsample_occupancy(levels[0], 2 ** s, resolution))
        return cls(resolution, levels)

    def level_resolution(self, s: int) -> int:
        return self.resolution >> s

    @property
    def coarsest(self) -> np.ndarray:
        return self.levels[-1]


def dilate_coords(coords, resolution: int, radius: int) -> np.ndarray:
    if radius <= 0:
        return np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    c = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    r = np.arange(-radius, radius + 1)
    offs = np.stack(np.meshgrid(r, r, r, indexing="ij"), -1).reshape(-1, 3)
    grown = (c[:, None, :] + offs[None]).reshape(-1, 3)
    grown = grown[np.all((grown >= 0) & (grown < resolution), axis=1)]
    return decode_keys(np.unique(encode_keys(grown, resolution)), resolution)


def prune_targets(pred_coords, gt_coords, resolution: int, dilation: int = 0) -> np.ndarray:
    """1 where a predicted voxel is on the (optionally dilated) target surface, else 0."""
    gt = dilate_coords(gt_coords, resolution, dilation)
    keep = np.isin(encode_keys(pred_coords, resolution), encode_keys(gt, resolution))
    return keep.astype(np.float64)


def log_sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))


def prune_bce(logits, labels) -> float:
    """Mean binary cross-entropy on logits."""
    s = np.asarray(logits, dtype=np.float64).reshape(-1)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if s.shape != y.shape:
        raise LayoutError(f"{len(s)} logits vs {len(y)} labels")
    if len(s) == 0:
        return 0.0
    return float(-np.mean(y * log_sigmoid(s) + (1.0 - y) * log_sigmoid(-s)))


def keep_mask_from_logits(logits) -> np.ndarray:
    """Inference-time decision: keep when sigmoid(logit) >= 0.5, i.e. logit >= 0."""
    return np.asarray(logits) >= 0.0


def apply_prune(grid: SparseAttributeGrid, keep_mask) -> SparseAttributeGrid:
    mask = np.asarray(keep_mask, dtype=bool).reshape(-1)
    if len(mask) != len(grid):
        raise LayoutError(f"mask length {len(mask)} != grid size {len(grid)}")
    return grid.subset(mask)
