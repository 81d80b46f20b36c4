"""Part segmentation: 2D region merging, label clustering, per-face assignment, mIoU."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .errors import AttrGridError, EmptyInputError, LayoutError
from .grid import SparseAttributeGrid, batch_query, voxel_centers
from .mesh import TriangleMesh
from .uv import PositionMap, TextureImage


# -- 2D region merging -------------------------------------------------------------------

def region_features(image: np.ndarray, labels: np.ndarray, bins: int = 8) -> np.ndarray:
    """Default features: mean RGB plus a normalised per-channel histogram, one row per id 1..n."""
    n = int(labels.max(initial=0))
    flat = labels.ravel()
    rgb = np.clip(np.asarray(image, dtype=np.float64).reshape(-1, 3), 0.0, 1.0)
    counts = np.bincount(flat, minlength=n + 1)[1:].astype(np.float64)
    denom = np.maximum(counts, 1.0)[:, None]
    feats = [np.stack([np.bincount(flat, weights=rgb[:, c], minlength=n + 1)[1:] for c in range(3)], 1) / denom]
    b = np.minimum((rgb * bins).astype(np.int64), bins - 1)
    for c in range(3):
        hist = np.bincount(flat * bins + b[:, c], minlength=(n + 1) * bins).reshape(n + 1, bins)[1:]
        feats.append(hist / denom)
    return np.concatenate(feats, axis=1)


@dataclass
class RegionMaskSet:
    """Per-view integer label images (0 = background, regions 1..n) and feature rows (row i is id i+1)."""

    labels: list[np.ndarray]
    features: list[np.ndarray]

    def __post_init__(self):
        if len(self.labels) != len(self.features):
            raise LayoutError("one feature table per view is required")
        for lab, feat in zip(self.labels, self.features):
            ids = np.unique(lab[lab > 0])
            if len(ids) and (ids[0] != 1 or ids[-1] != len(ids)):
                raise LayoutError("region ids must be contiguous from 1")
            if len(feat) != len(ids):
                raise LayoutError(f"{len(feat)} feature rows for {len(ids)} regions")

    @classmethod
    def from_images(cls, images: list[np.ndarray], labels: list[np.ndarray],
                    extractor: Callable[[np.ndarray, np.ndarray], np.ndarray] = region_features) -> "RegionMaskSet":
        labels = [relabel_contiguous(lab) for lab in labels]
        return cls(labels, [extractor(img, lab) for img, lab in zip(images, labels)])

    def region_counts(self) -> list[int]:
        return [int(lab.max(initial=0)) for lab in self.labels]


def relabel_contiguous(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    ids, inv = np.unique(labels, return_inverse=True)
    new = np.arange(len(ids)) + (0 if ids[0] == 0 else 1)
    return new[inv].reshape(labels.shape)


def adjacent_pairs(labels: np.ndarray) -> set[tuple[int, int]]:
    """Unordered foreground id pairs that share a 4-connected pixel boundary."""
    pairs = set()
    for a, b in ((labels[:, :-1], labels[:, 1:]), (labels[:-1, :], labels[1:, :])):
        m = (a != b) & (a > 0) & (b > 0)
        lo, hi = np.minimum(a[m], b[m]), np.maximum(a[m], b[m])
        pairs.update(zip(lo.tolist(), hi.tolist()))
    return pairs


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a @ b / (na * nb))


def _merge_view(labels: np.ndarray, feats: np.ndarray, tau: float) -> tuple[np.ndarray, np.ndarray]:
    n = len(feats)
    counts = np.bincount(labels.ravel(), minlength=n + 1)[1:].astype(np.float64)
    feat = {i + 1: np.asarray(feats[i], dtype=np.float64) for i in range(n)}
    count = {i + 1: counts[i] for i in range(n)}
    parent = np.arange(n + 1)
    adj: dict[int, set[int]] = {i: set() for i in feat}
    for a, b in adjacent_pairs(labels):
        adj[a].add(b)
        adj[b].add(a)
    sim = {(a, b): _cosine(feat[a], feat[b]) for a in adj for b in adj[a] if a < b}
    while sim:
        # highest similarity first, then the lexicographically smallest id pair
        (a, b), s = min(sim.items(), key=lambda kv: (-kv[1], kv[0]))
        if s < tau:
            break
        w = count[a] + count[b]
        feat[a] = (count[a] * feat[a] + count[b] * feat[b]) / w
        count[a] = w
        parent[parent == b] = a
        for c in adj.pop(b):
            sim.pop((min(b, c), max(b, c)), None)
            if c != a:
                adj[c].discard(b)
                adj[c].add(a)
                adj[a].add(c)
        adj[a].discard(b)
        del feat[b], count[b]
        for c in adj[a]:
            sim[(min(a, c), max(a, c))] = _cosine(feat[a], feat[c])
    survivors = sorted(feat)
    remap = np.zeros(n + 1, dtype=np.int64)
    for new, old in enumerate(survivors, start=1):
        remap[parent == old] = new
    remap[0] = 0
    return remap[labels], np.array([feat[i] for i in survivors]).reshape(len(survivors), feats.shape[1])


def merge_regions(masks: RegionMaskSet, tau: float) -> RegionMaskSet:
    """Greedy agglomeration of adjacent regions while cosine similarity >= ``tau``.

    Merged features are pixel-count-weighted means; surviving ids are renumbered
    contiguously in order of their smallest original id.
    """
    out_l, out_f = [], []
    for lab, feat in zip(masks.labels, masks.features):
        l2, f2 = _merge_view(np.asarray(lab, dtype=np.int64), np.asarray(feat, dtype=np.float64).reshape(len(feat), -1), tau)
        out_l.append(l2)
        out_f.append(f2)
    return RegionMaskSet(out_l, out_f)


# -- per-face labels ---------------------------------------------------------------------

@dataclass
class FaceLabels:
    samples: np.ndarray     # (F, 4, 3): centroid then the three edge midpoints
    flagged: np.ndarray     # (F,) face fell back to the nearest voxel

    @property
    def raw(self) -> np.ndarray:
        """One raw label colour per face (the centroid sample)."""
        return self.samples[:, 0]


def face_sample_points(mesh: TriangleMesh) -> np.ndarray:
    tri = mesh.triangles
    mids = np.stack([(tri[:, 0] + tri[:, 1]) / 2, (tri[:, 1] + tri[:, 2]) / 2, (tri[:, 2] + tri[:, 0]) / 2], 1)
    return np.concatenate([tri.mean(axis=1)[:, None], mids], axis=1)


def assign_labels(grid: SparseAttributeGrid, mesh: TriangleMesh, span: str = "semantic") -> FaceLabels:
    """Sample the label span at each face's centroid and edge midpoints.

    A face with no grid support at any sample, or with zero area, falls back to
    the value of the voxel nearest its centroid.
    """
    if len(grid) == 0:
        raise EmptyInputError("grid is empty")
    if grid.layout.span(span).stop - grid.layout.span(span).start != 3:
        raise LayoutError(f"span {span!r} must hold 3 label channels")
    pts = face_sample_points(mesh)
    n = len(pts)
    vals, missing = batch_query(grid, pts.reshape(-1, 3), renormalize=True, span=span)
    vals = vals.reshape(n, 4, 3)
    missing = missing.reshape(n, 4)
    flagged = np.any(missing >= 1.0 - 1e-12, axis=1) | (mesh.face_areas() <= 0.0)
    if flagged.any():
        tree = cKDTree(voxel_centers(grid.coords, grid.resolution))
        _, nearest = tree.query(pts[flagged, 0])
        sl = grid.layout.span(span)
        vals[flagged] = grid.attrs[nearest, sl][:, None, :]
    return FaceLabels(vals, flagged)


# -- clustering --------------------------------------------------------------------------

@dataclass
class PartSegmentation:
    face_parts: np.ndarray
    centers: np.ndarray
    num_parts: int

    def __post_init__(self):
        self.face_parts = np.asarray(self.face_parts, dtype=np.int64)
        if len(self.face_parts) and (self.face_parts.min() < 0 or self.face_parts.max() >= self.num_parts):
            raise LayoutError("face part ids must lie in [0, num_parts)")


def single_linkage(points: np.ndarray, eps: float) -> np.ndarray:
    """Connected components of the graph linking points at distance <= eps; ids by first occurrence."""
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    pairs = cKDTree(points).query_pairs(eps, output_type="ndarray")
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    _, comp = connected_components(graph, directed=False)
    _, first = np.unique(comp, return_index=True)
    order = np.empty(len(first), dtype=np.int64)
    order[np.argsort(first, kind="stable")] = np.arange(len(first))
    return order[comp]


def cluster_labels(raw, eps: float = 0.1) -> PartSegmentation:
    """Single-linkage clustering of raw label colours; each cluster is a part.

    ``raw`` is (F, 3) or (F, S, 3) with several samples per face, in which case a
    face takes the most common cluster among its samples (ties: earliest sample).
    """
    if eps <= 0:
        raise AttrGridError("eps must be positive")
    if isinstance(raw, FaceLabels):
        raw = raw.samples
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim == 2:
        raw = raw[:, None, :]
    f, s, _ = raw.shape
    pts = raw.reshape(-1, 3)
    ids = single_linkage(pts, eps)
    p = int(ids.max()) + 1 if len(ids) else 0
    centers = np.stack([pts[ids == k].mean(axis=0) for k in range(p)]) if p else np.zeros((0, 3))
    per_face = ids.reshape(f, s)
    parts = np.empty(f, dtype=np.int64)
    for i, row in enumerate(per_face):
        votes = np.bincount(row, minlength=p)
        best = votes.max()
        parts[i] = next(c for c in row if votes[c] == best)
    return PartSegmentation(parts, centers, p)


def segment_mesh(grid: SparseAttributeGrid, mesh: TriangleMesh, eps: float = 0.1,
                 span: str = "semantic") -> tuple[PartSegmentation, FaceLabels]:
    labels = assign_labels(grid, mesh, span)
    return cluster_labels(labels, eps), labels


def random_palette(n: int, rng: np.random.Generator, min_dist: float = 0.2, max_tries: int = 10000) -> np.ndarray:
    """Random RGB part colours with a minimum pairwise distance (rejection sampling)."""
    colors: list[np.ndarray] = []
    tries = 0
    while len(colors) < n:
        tries += 1
        if tries > max_tries:
            raise AttrGridError(f"could not place {n} colours at spacing {min_dist}")
        c = rng.uniform(size=3)
        if all(np.linalg.norm(c - o) >= min_dist for o in colors):
            colors.append(c)
    return np.array(colors).reshape(n, 3)


def part_texture(seg: PartSegmentation, posmap: PositionMap, colors: np.ndarray | None = None) -> TextureImage:
    """Colour-code a UV layout by part (cluster centres unless a palette is given)."""
    colors = seg.centers if colors is None else np.asarray(colors)
    h, w = posmap.mask.shape
    out = np.zeros((h, w, 3))
    m = posmap.mask
    out[m] = colors[seg.face_parts[posmap.face_ids[m]]]
    return TextureImage(out, m.copy(), (~m).astype(np.float64))


# -- evaluation --------------------------------------------------------------------------

def iou_matrix(pred: np.ndarray, gt: np.ndarray, areas: np.ndarray, n_pred: int, n_gt: int) -> np.ndarray:
    areas = np.asarray(areas, dtype=np.float64)
    inter = np.zeros((n_pred, n_gt))
    np.add.at(inter, (pred, gt), areas)
    a_pred = np.bincount(pred, weights=areas, minlength=n_pred)
    a_gt = np.bincount(gt, weights=areas, minlength=n_gt)
    union = a_pred[:, None] + a_gt[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / union, 0.0)


def miou(pred: PartSegmentation, gt: PartSegmentation, areas) -> float:
    """Class-agnostic mIoU: one-to-one Hungarian matching, averaged over ground-truth parts."""
    if pred.num_parts == 0 or gt.num_parts == 0:
        raise EmptyInputError("part counts must be positive")
    if len(pred.face_parts) != len(gt.face_parts) or len(areas) != len(gt.face_parts):
        raise LayoutError("segmentations must cover the same faces")
    iou = iou_matrix(pred.face_parts, gt.face_parts, areas, pred.num_parts, gt.num_parts)
    rows, cols = linear_sum_assignment(iou, maximize=True)
    # correctly rounded sum, so the result does not depend on matching order
    return math.fsum(iou[rows, cols].tolist()) / gt.num_parts


def write_face_parts(path, seg: PartSegmentation) -> None:
    with open(path, "w") as fh:
        fh.write("".join(f"{int(p)}\n" for p in seg.face_parts))


def read_face_parts(path) -> PartSegmentation:
    with open(path) as fh:
        ids = np.array([int(line) for line in fh if line.strip()], dtype=np.int64)
    if len(ids) == 0:
        raise EmptyInputError(f"{path}: no face ids")
    return PartSegmentation(ids, np.zeros((ids.max() + 1, 3)), int(ids.max()) + 1)
