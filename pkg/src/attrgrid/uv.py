"""UV position maps and grid-to-texture baking.

Image arrays are indexed ``[row, col]`` with row 0 at ``v = 0`` (the bottom of the
texture). PNG files are written top row first, so rows are flipped on disk.
Texel ``(i, j)`` samples UV ``((i + 0.5) / W, (j + 0.5) / H)``.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import FormatError, LayoutError
from .grid import SparseAttributeGrid, batch_query
from .mesh import TriangleMesh, require_mesh

log = logging.getLogger(__name__)


@dataclass
class PositionMap:
    """Per-texel 3D surface point plus validity mask.

    Used both for UV lookups (``kind="uv"``) and camera views (``kind="view"``).
    Invalid texels hold NaN positions and ``face_ids == -1``.
    """

    positions: np.ndarray          # (H, W, 3) float64
    mask: np.ndarray               # (H, W) bool
    face_ids: np.ndarray | None = None
    kind: str = "uv"
    skipped: int = 0               # zero-area UV triangles ignored while baking

    @property
    def height(self) -> int:
        return self.positions.shape[0]

    @property
    def width(self) -> int:
        return self.positions.shape[1]

    def valid_points(self) -> np.ndarray:
        return self.positions[self.mask]

    def as_kind(self, kind: str) -> "PositionMap":
        return PositionMap(self.positions, self.mask, self.face_ids, kind, self.skipped)


UVPositionMap = PositionMap
ViewPositionMap = PositionMap


@dataclass
class TextureImage:
    values: np.ndarray             # (H, W, c), row 0 at the bottom
    mask: np.ndarray               # (H, W) bool
    missing: np.ndarray | None = field(default=None)  # (H, W) trilinear missing mass

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]


def empty_position_map(width: int, height: int, kind: str = "uv") -> PositionMap:
    return PositionMap(
        np.full((height, width, 3), np.nan),
        np.zeros((height, width), dtype=bool),
        np.full((height, width), -1, dtype=np.int64),
        kind,
    )


def _is_top_left(a: np.ndarray, b: np.ndarray) -> bool:
    # counter-clockwise winding with y up
    dx, dy = b[0] - a[0], b[1] - a[1]
    return dy < 0 or (dy == 0 and dx < 0)


def rasterize_triangle(uv_px: np.ndarray, width: int, height: int):
    """Texels covered by one triangle given in pixel units.

    Returns ``(rows, cols, bary)`` where ``bary`` is ``(n, 3)`` barycentric weights
    of the original vertex order, or ``None`` for a zero-area triangle.
    """
    order = [0, 1, 2]
    p = uv_px.astype(np.float64)
    area2 = (p[1, 0] - p[0, 0]) * (p[2, 1] - p[0, 1]) - (p[1, 1] - p[0, 1]) * (p[2, 0] - p[0, 0])
    if area2 == 0:
        return None
    if area2 < 0:
        order = [0, 2, 1]
        p = p[order]
        area2 = -area2
    lo = np.maximum(np.floor(p.min(axis=0) - 0.5).astype(int), 0)
    hi = np.minimum(np.ceil(p.max(axis=0) - 0.5).astype(int), [width - 1, height - 1])
    if np.any(hi < lo):
        return np.zeros(0, int), np.zeros(0, int), np.zeros((0, 3))
    cols, rows = np.meshgrid(np.arange(lo[0], hi[0] + 1), np.arange(lo[1], hi[1] + 1))
    sx, sy = cols.ravel() + 0.5, rows.ravel() + 0.5
    inside = np.ones(sx.shape, dtype=bool)
    e = []
    for a, b in ((1, 2), (2, 0), (0, 1)):
        pa, pb = p[a], p[b]
        ev = (pb[0] - pa[0]) * (sy - pa[1]) - (pb[1] - pa[1]) * (sx - pa[0])
        inside &= (ev >= 0) if _is_top_left(pa, pb) else (ev > 0)
        e.append(ev)
    bary_sorted = np.stack(e, axis=1)[inside] / area2
    bary = np.empty_like(bary_sorted)
    bary[:, order] = bary_sorted
    return rows.ravel()[inside], cols.ravel()[inside], bary


def bake_position_map(mesh: TriangleMesh, width: int, height: int) -> PositionMap:
    """Rasterize the mesh in UV space; later triangles overwrite earlier ones."""
    require_mesh(mesh)
    uv = mesh.uv_triangles
    if np.any(uv < 0.0) or np.any(uv > 1.0):
        raise FormatError("UV coordinates must lie in [0, 1]^2")
    pm = empty_position_map(width, height, "uv")
    tris = mesh.triangles
    scale = np.array([width, height], dtype=np.float64)
    for f in range(len(mesh.faces)):
        res = rasterize_triangle(uv[f] * scale, width, height)
        if res is None:
            pm.skipped += 1
            continue
        rows, cols, bary = res
        if len(rows) == 0:
            continue
        pos = bary @ tris[f]
        pm.positions[rows, cols] = np.clip(pos, -0.5, 0.5)
        pm.mask[rows, cols] = True
        pm.face_ids[rows, cols] = f
    if pm.skipped:
        log.warning("skipped %d zero-area UV triangles", pm.skipped)
    return pm


def bake_texture(grid: SparseAttributeGrid, posmap: PositionMap, span: str = "color", *,
                 fill=None, renormalize: bool = False) -> TextureImage:
    """Trilinearly sample ``grid`` at every valid texel of ``posmap``."""
    if not grid.layout.has(span):
        raise LayoutError(f"grid layout has no {span!r} span")
    width = grid.layout.span(span).stop - grid.layout.span(span).start
    values = np.zeros((posmap.height, posmap.width, width))
    missing = np.ones((posmap.height, posmap.width))
    pts = posmap.positions[posmap.mask]
    if len(pts):
        vals, miss = batch_query(grid, pts, fill=fill, renormalize=renormalize, span=span)
        values[posmap.mask] = vals
        missing[posmap.mask] = miss
    return TextureImage(values, posmap.mask.copy(), missing)


def dilate_texture(img: TextureImage, iterations: int) -> TextureImage:
    """Grow valid regions outwards; new texels take the mean of their valid 8-neighbours."""
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    values = img.values.copy()
    mask = img.mask.copy()
    h, w = mask.shape
    for _ in range(iterations):
        vpad = np.pad(values * mask[..., None], ((1, 1), (1, 1), (0, 0)))
        mpad = np.pad(mask.astype(np.float64), 1)
        total = np.zeros_like(values)
        count = np.zeros(mask.shape)
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                if dy == 0 and dx == 0:
                    continue
                total += vpad[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
                count += mpad[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
        grow = (~mask) & (count > 0)
        if not grow.any():
            break
        values[grow] = total[grow] / count[grow, None]
        mask = mask | grow
    return TextureImage(values, mask, None if img.missing is None else img.missing.copy())


# -- files ------------------------------------------------------------------------------

POS_MAGIC = b"TXPOS"
_POS_HEADER = struct.Struct("<5sII")


def posmap_to_bytes(pm: PositionMap) -> bytes:
    data = np.empty((pm.height, pm.width, 4), dtype="<f4")
    data[..., :3] = pm.positions
    data[..., 3] = pm.mask
    return _POS_HEADER.pack(POS_MAGIC, pm.width, pm.height) + data.tobytes()


def posmap_from_bytes(blob: bytes, kind: str = "uv") -> PositionMap:
    if len(blob) < _POS_HEADER.size:
        raise FormatError("TXPOS: truncated header")
    magic, w, h = _POS_HEADER.unpack_from(blob, 0)
    if magic != POS_MAGIC:
        raise FormatError(f"TXPOS: bad magic {magic!r}")
    expected = _POS_HEADER.size + w * h * 16
    if len(blob) != expected:
        raise FormatError(f"TXPOS: expected {expected} bytes, got {len(blob)}")
    data = np.frombuffer(blob, dtype="<f4", offset=_POS_HEADER.size).reshape(h, w, 4)
    flag = data[..., 3]
    if not np.all((flag == 0) | (flag == 1)):
        raise FormatError("TXPOS: mask channel must be 0 or 1")
    mask = flag == 1
    pos = data[..., :3].astype(np.float64)
    if mask.any():
        valid = pos[mask]
        if not np.all(np.isfinite(valid)) or np.abs(valid).max() > 0.5:
            raise FormatError("TXPOS: valid texel outside the unit cube")
    return PositionMap(pos, mask, None, kind)


def write_posmap(path, pm: PositionMap) -> None:
    Path(path).write_bytes(posmap_to_bytes(pm))


def read_posmap(path, kind: str = "uv") -> PositionMap:
    return posmap_from_bytes(Path(path).read_bytes(), kind)


def save_image(path, img: TextureImage) -> None:
    """8-bit PNG; RGB data gets an alpha channel carrying the validity mask."""
    vals = np.clip(img.values, 0.0, 1.0)
    q = np.round(vals * 255.0).astype(np.uint8)
    c = img.channels
    if c == 1:
        q = np.repeat(q, 3, axis=2)
    elif c == 2:
        q = np.concatenate([q, np.zeros_like(q[..., :1])], axis=2)
    elif c > 4:
        raise LayoutError("images hold at most 4 channels")
    if q.shape[2] == 3:
        alpha = np.where(img.mask, 255, 0).astype(np.uint8)[..., None]
        q = np.concatenate([q, alpha], axis=2)
    Image.fromarray(q[::-1].copy(), mode="RGBA").save(path, format="PNG")


def load_image(path) -> TextureImage:
    """Inverse of :func:`save_image`; returns RGB values in [0, 1]."""
    try:
        im = Image.open(path)
        im.load()
    except Exception as exc:
        raise FormatError(f"cannot read image {path}: {exc}") from exc
    arr = np.asarray(im.convert("RGBA"))[::-1]
    mask = arr[..., 3] > 0
    return TextureImage(arr[..., :3].astype(np.float64) / 255.0, mask.copy())
