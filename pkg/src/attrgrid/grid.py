"""Sparse voxel attribute grid with trilinear querying.

Attributes live at voxel centers. A point ``p`` in ``[-0.5, 0.5]^3`` maps to the
continuous lattice coordinate ``(p + 0.5) * R - 0.5``, so integer coordinates hit
stored sites exactly.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

from .errors import BoundsError, EmptyInputError, FormatError, LayoutError

SPAN_NAMES = ("color", "semantic", "pbr", "extra")

# corner c = (i << 2) | (j << 1) | k, bit set means the upper neighbour on that axis
CORNER_OFFSETS = np.array(
    [[(c >> 2) & 1, (c >> 1) & 1, c & 1] for c in range(8)], dtype=np.int64
)


@dataclass(frozen=True)
class ChannelLayout:
    """Named channel spans of an attribute vector, in storage order."""

    color: int = 3
    semantic: int = 0
    pbr: int = 0
    extra: int = 0

    def __post_init__(self):
        for name in SPAN_NAMES:
            if getattr(self, name) < 0:
                raise LayoutError(f"negative span width for {name!r}")
        if self.k == 0:
            raise LayoutError("layout has no channels")

    @property
    def k(self) -> int:
        return self.color + self.semantic + self.pbr + self.extra

    @property
    def counts(self) -> tuple[int, int, int, int]:
        return (self.color, self.semantic, self.pbr, self.extra)

    def span(self, name: str) -> slice:
        if name not in SPAN_NAMES:
            raise LayoutError(f"unknown span {name!r}; expected one of {SPAN_NAMES}")
        start = 0
        for n in SPAN_NAMES:
            width = getattr(self, n)
            if n == name:
                if width == 0:
                    raise LayoutError(f"span {name!r} is empty in this layout")
                return slice(start, start + width)
            start += width
        raise AssertionError("unreachable")

    def has(self, name: str) -> bool:
        return getattr(self, name, 0) > 0


def _check_resolution(resolution: int) -> int:
    r = int(resolution)
    if r < 1 or r & (r - 1):
        raise BoundsError(f"resolution must be a positive power of two, got {resolution}")
    if r > 2**31:
        raise BoundsError("resolution above 2^31 is not supported")
    return r


def encode_keys(coords: np.ndarray, resolution: int) -> np.ndarray:
    """Linear keys whose ascending order is lexicographic (x, y, z) order."""
    c = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    r = np.int64(resolution)
    return (c[:, 0] * r + c[:, 1]) * r + c[:, 2]


def decode_keys(keys: np.ndarray, resolution: int) -> np.ndarray:
    k = np.asarray(keys, dtype=np.int64)
    r = np.int64(resolution)
    return np.stack([k // (r * r), (k // r) % r, k % r], axis=1)


class SparseAttributeGrid:
    """Sorted structure-of-arrays map from voxel coordinates to attribute vectors.

    ``coords`` is an ``(M, 3)`` int64 array in strictly increasing lexicographic
    order (z fastest); ``attrs`` is the parallel ``(M, k)`` float64 array.
    """

    def __init__(self, resolution: int, layout: ChannelLayout | None = None):
        self.resolution = _check_resolution(resolution)
        self.layout = layout or ChannelLayout()
        self.coords = np.zeros((0, 3), dtype=np.int64)
        self.attrs = np.zeros((0, self.layout.k), dtype=np.float64)
        self._keys = np.zeros(0, dtype=np.int64)

    @classmethod
    def from_arrays(cls, coords, attrs, resolution: int, layout: ChannelLayout | None = None,
                    *, validate_color: bool = True) -> "SparseAttributeGrid":
        """Bulk construction; on duplicate coordinates the last row wins."""
        grid = cls(resolution, layout)
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        attrs = np.asarray(attrs, dtype=np.float64)
        if attrs.ndim == 1 and len(coords) <= 1:
            attrs = attrs.reshape(len(coords), -1)
        if attrs.ndim != 2 or attrs.shape[1] != grid.layout.k or len(attrs) != len(coords):
            raise LayoutError(
                f"attrs shape {attrs.shape} does not match {len(coords)} coords x k={grid.layout.k}"
            )
        grid._check_coords(coords)
        if validate_color:
            grid._check_color(attrs)
        keys = encode_keys(coords, grid.resolution)
        # last occurrence wins: unique on the reversed key array
        rev_keys = keys[::-1]
        uniq, first_rev = np.unique(rev_keys, return_index=True)
        pick = len(keys) - 1 - first_rev
        grid._keys = uniq
        grid.coords = coords[pick].copy()
        grid.attrs = attrs[pick].copy()
        return grid

    def _check_coords(self, coords: np.ndarray) -> None:
        if coords.size and (coords.min() < 0 or coords.max() >= self.resolution):
            bad = np.nonzero(((coords < 0) | (coords >= self.resolution)).any(axis=1))[0][0]
            raise BoundsError(
                f"coordinate {tuple(coords[bad])} outside [0, {self.resolution})^3"
            )

    def _check_color(self, attrs: np.ndarray) -> None:
        if not self.layout.has("color") or attrs.size == 0:
            return
        col = attrs[..., self.layout.span("color")]
        if np.any(col < 0.0) or np.any(col > 1.0) or np.any(np.isnan(col)):
            raise LayoutError("color channels must lie in [0, 1]")

    # -- mapping interface ---------------------------------------------------------
    def __len__(self) -> int:
        return len(self._keys)

    @property
    def k(self) -> int:
        return self.layout.k

    @property
    def keys(self) -> np.ndarray:
        return self._keys

    def __iter__(self) -> Iterator[tuple[tuple[int, int, int], np.ndarray]]:
        for c, a in zip(self.coords, self.attrs):
            yield (int(c[0]), int(c[1]), int(c[2])), a

    def index_of(self, keys: np.ndarray) -> np.ndarray:
        """Row index for each key, or -1 where the key is absent."""
        keys = np.asarray(keys, dtype=np.int64)
        pos = np.searchsorted(self._keys, keys)
        pos_c = np.minimum(pos, max(len(self._keys) - 1, 0))
        if len(self._keys) == 0:
            return np.full(keys.shape, -1, dtype=np.int64)
        found = self._keys[pos_c] == keys
        return np.where(found, pos_c, -1)

    def insert(self, coord, values) -> "SparseAttributeGrid":
        c = np.asarray(coord, dtype=np.int64).reshape(1, 3)
        a = np.asarray(values, dtype=np.float64).reshape(-1)
        if a.shape[0] != self.layout.k:
            raise LayoutError(f"vector length {a.shape[0]} != k={self.layout.k}")
        self._check_coords(c)
        self._check_color(a)
        key = encode_keys(c, self.resolution)[0]
        pos = int(np.searchsorted(self._keys, key))
        if pos < len(self._keys) and self._keys[pos] == key:
            self.attrs[pos] = a
        else:
            self._keys = np.insert(self._keys, pos, key)
            self.coords = np.insert(self.coords, pos, c[0], axis=0)
            self.attrs = np.insert(self.attrs, pos, a, axis=0)
        return self

    def get(self, coord) -> np.ndarray | None:
        c = np.asarray(coord, dtype=np.int64).reshape(1, 3)
        self._check_coords(c)
        idx = self.index_of(encode_keys(c, self.resolution))[0]
        return None if idx < 0 else self.attrs[idx].copy()

    def __contains__(self, coord) -> bool:
        c = np.asarray(coord, dtype=np.int64).reshape(1, 3)
        if c.min() < 0 or c.max() >= self.resolution:
            return False
        return bool(self.index_of(encode_keys(c, self.resolution))[0] >= 0)

    def subset(self, mask) -> "SparseAttributeGrid":
        mask = np.asarray(mask, dtype=bool)
        out = SparseAttributeGrid(self.resolution, self.layout)
        out._keys = self._keys[mask].copy()
        out.coords = self.coords[mask].copy()
        out.attrs = self.attrs[mask].copy()
        return out

    def copy(self) -> "SparseAttributeGrid":
        return self.subset(np.ones(len(self), dtype=bool))

    def with_attrs(self, attrs) -> "SparseAttributeGrid":
        """Same coordinates, new attribute array (row-aligned)."""
        return SparseAttributeGrid.from_arrays(self.coords, attrs, self.resolution, self.layout)

    def __eq__(self, other) -> bool:
        if not isinstance(other, SparseAttributeGrid):
            return NotImplemented
        return (
            self.resolution == other.resolution
            and self.layout == other.layout
            and np.array_equal(self.coords, other.coords)
            and np.array_equal(self.attrs, other.attrs)
        )

    def __repr__(self) -> str:
        return f"SparseAttributeGrid(R={self.resolution}, M={len(self)}, layout={self.layout})"


def voxel_centers(coords, resolution: int) -> np.ndarray:
    return (np.asarray(coords, dtype=np.float64) + 0.5) / resolution - 0.5


def containing_voxel(points, resolution: int) -> np.ndarray:
    """Index of the cell containing each point (upper boundary folds into the last cell)."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    idx = np.floor((p + 0.5) * resolution).astype(np.int64)
    return np.clip(idx, 0, resolution - 1)


# -- trilinear interpolation ------------------------------------------------------------

class QueryResult(NamedTuple):
    values: np.ndarray
    missing_mass: float


def _check_points(points: np.ndarray) -> None:
    bad = ~np.all((points >= -0.5) & (points <= 0.5), axis=1)
    if bad.any():
        i = int(np.nonzero(bad)[0][0])
        raise BoundsError(f"query point {i} = {tuple(points[i])} outside [-0.5, 0.5]^3")


def corner_stencil(points, resolution: int) -> tuple[np.ndarray, np.ndarray]:
    """Base corner ``v0`` (N, 3) and the eight corner weights (N, 8) for each point."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    _check_points(p)
    r = resolution
    cont = np.clip((p + 0.5) * r - 0.5, 0.0, r - 1.0)
    v0 = np.clip(np.floor(cont).astype(np.int64), 0, max(r - 2, 0))
    alpha = cont - v0
    lo, hi = 1.0 - alpha, alpha
    w = np.empty((len(p), 8), dtype=np.float64)
    for c in range(8):
        i, j, k = CORNER_OFFSETS[c]
        wx = hi[:, 0] if i else lo[:, 0]
        wy = hi[:, 1] if j else lo[:, 1]
        wz = hi[:, 2] if k else lo[:, 2]
        w[:, c] = wx * wy * wz
    return v0, w


def query_stencil(grid: SparseAttributeGrid, points) -> tuple[np.ndarray, np.ndarray]:
    """Row indices into ``grid.attrs`` (-1 when absent) and weights, both (N, 8)."""
    v0, w = corner_stencil(points, grid.resolution)
    corners = v0[:, None, :] + CORNER_OFFSETS[None, :, :]
    inside = np.all(corners < grid.resolution, axis=2)
    keys = encode_keys(np.minimum(corners, grid.resolution - 1), grid.resolution)
    idx = grid.index_of(keys).reshape(-1, 8)
    idx[~inside] = -1
    return idx, w


def batch_query(grid: SparseAttributeGrid, points, *, fill=None, renormalize: bool = False,
                span: str | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised trilinear query. Returns ``(values (N, c), missing_mass (N,))``."""
    idx, w = query_stencil(grid, points)
    sl = grid.layout.span(span) if span else slice(None)
    table = grid.attrs[:, sl]
    width = table.shape[1]
    fill_vec = np.zeros(width) if fill is None else np.broadcast_to(
        np.asarray(fill, dtype=np.float64), (width,))
    out = np.zeros((len(idx), width), dtype=np.float64)
    missing = np.zeros(len(idx), dtype=np.float64)
    padded = np.vstack([table, fill_vec[None, :]])
    for c in range(8):
        ic = idx[:, c]
        absent = ic < 0
        out += w[:, c, None] * padded[np.where(absent, len(table), ic)]
        missing += np.where(absent, w[:, c], 0.0)
    if renormalize:
        present = 1.0 - missing
        ok = present > 1e-12
        out[ok] = out[ok] / present[ok, None]
        out[~ok] = fill_vec
    return out, missing


def trilinear_query(grid: SparseAttributeGrid, p, *, fill=None,
                    renormalize: bool = False) -> QueryResult:
    """Single-point query, written as a plain loop over the eight corners."""
    p = np.asarray(p, dtype=np.float64).reshape(3)
    _check_points(p[None, :])
    r = grid.resolution
    v0, alpha = [], []
    for d in range(3):
        cont = min(max((p[d] + 0.5) * r - 0.5, 0.0), r - 1.0)
        base = min(max(math.floor(cont), 0), max(r - 2, 0))
        v0.append(base)
        alpha.append(cont - base)
    fill_vec = np.zeros(grid.k) if fill is None else np.broadcast_to(
        np.asarray(fill, dtype=np.float64), (grid.k,))
    out = np.zeros(grid.k, dtype=np.float64)
    missing = 0.0
    for c in range(8):
        bits = CORNER_OFFSETS[c]
        w = 1.0
        for d in range(3):
            w = w * (alpha[d] if bits[d] else 1.0 - alpha[d])
        corner = [v0[d] + int(bits[d]) for d in range(3)]
        value = grid.get(corner) if max(corner) < r else None
        if value is None:
            out += w * fill_vec
            missing += w
        else:
            out += w * value
    if renormalize:
        present = 1.0 - missing
        out = out / present if present > 1e-12 else fill_vec.copy()
    return QueryResult(out, missing)


# -- TXGRID binary format ---------------------------------------------------------------

GRID_MAGIC = b"TXG1"
_GRID_HEADER = struct.Struct("<4sII4IQ")


def grid_to_bytes(grid: SparseAttributeGrid) -> bytes:
    k = grid.layout.k
    header = _GRID_HEADER.pack(GRID_MAGIC, grid.resolution, k, *grid.layout.counts, len(grid))
    rec = np.dtype([("c", "<u4", (3,)), ("a", "<f4", (k,))])
    body = np.empty(len(grid), dtype=rec)
    body["c"] = grid.coords
    body["a"] = grid.attrs
    return header + body.tobytes()


def grid_from_bytes(data: bytes) -> SparseAttributeGrid:
    if len(data) < _GRID_HEADER.size:
        raise FormatError("TXGRID: truncated header")
    magic, r, k, c0, c1, c2, c3, m = _GRID_HEADER.unpack_from(data, 0)
    if magic != GRID_MAGIC:
        raise FormatError(f"TXGRID: bad magic {magic!r}")
    if c0 + c1 + c2 + c3 != k:
        raise FormatError("TXGRID: span counts do not sum to channel count")
    try:
        layout = ChannelLayout(c0, c1, c2, c3)
        resolution = _check_resolution(r)
    except (LayoutError, BoundsError) as exc:
        raise FormatError(f"TXGRID: {exc}") from exc
    rec = np.dtype([("c", "<u4", (3,)), ("a", "<f4", (k,))])
    expected = _GRID_HEADER.size + m * rec.itemsize
    if len(data) != expected:
        raise FormatError(f"TXGRID: expected {expected} bytes, got {len(data)}")
    body = np.frombuffer(data, dtype=rec, offset=_GRID_HEADER.size, count=m)
    coords = body["c"].astype(np.int64)
    if coords.size and coords.max() >= resolution:
        raise FormatError("TXGRID: coordinate outside grid resolution")
    keys = encode_keys(coords, resolution)
    if np.any(np.diff(keys) <= 0):
        raise FormatError("TXGRID: coordinates unsorted or duplicated")
    grid = SparseAttributeGrid(resolution, layout)
    grid._keys = keys
    grid.coords = coords
    grid.attrs = body["a"].astype(np.float64).reshape(m, k)
    return grid


def write_grid(path, grid: SparseAttributeGrid) -> None:
    Path(path).write_bytes(grid_to_bytes(grid))


def read_grid(path) -> SparseAttributeGrid:
    return grid_from_bytes(Path(path).read_bytes())


def require_nonempty(grid: SparseAttributeGrid) -> None:
    if len(grid) == 0:
        raise EmptyInputError("grid has no voxels")
