"""Surface voxelization by triangle/box overlap.

A cell is occupied when the triangle meets it in a set of positive area: the
triangle enters the open cell, or lies in one of the cell's face planes and
overlaps that face. Contacts along an edge or at a corner do not count, so a
triangle lying exactly on a shared face marks the two cells on either side of it
and nothing else. Zero-area triangles mark the cells containing their vertices.
"""
from __future__ import annotations

import numpy as np

from .grid import ChannelLayout, SparseAttributeGrid, containing_voxel, encode_keys, decode_keys
from .mesh import TriangleMesh, require_mesh, check_unit_cube

# relative shrink of the cell before the separating-axis test; turns closed-box
# contact into strict interior overlap
_SHRINK = 1e-9
_DEGENERATE_AREA = 1e-14


def _sat_overlap(tri: np.ndarray, centers: np.ndarray, half: float) -> np.ndarray:
    """Separating-axis test of one triangle against many axis-aligned boxes."""
    edges = tri[[1, 2, 0]] - tri
    normal = np.cross(edges[0], edges[1])
    axes = [np.eye(3)[i] for i in range(3)] + [normal]
    for e in edges:
        for i in range(3):
            axes.append(np.cross(np.eye(3)[i], e))
    keep = np.ones(len(centers), dtype=bool)
    for a in axes:
        norm = np.abs(a).sum()
        if norm < 1e-300:
            continue
        proj = tri @ a
        r = half * norm
        c = centers @ a
        keep &= ~((proj.min() - c > r) | (proj.max() - c < -r))
    return keep


def _sat_overlap_2d(tri2: np.ndarray, centers2: np.ndarray, half: float) -> np.ndarray:
    edges = tri2[[1, 2, 0]] - tri2
    axes = [np.array([1.0, 0.0]), np.array([0.0, 1.0])]
    axes += [np.array([-e[1], e[0]]) for e in edges]
    keep = np.ones(len(centers2), dtype=bool)
    for a in axes:
        norm = np.abs(a).sum()
        if norm < 1e-300:
            continue
        proj = tri2 @ a
        c = centers2 @ a
        r = half * norm
        keep &= ~((proj.min() - c > r) | (proj.max() - c < -r))
    return keep


def _cell_block(lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    axes = [np.arange(lo[d], hi[d] + 1) for d in range(3)]
    g = np.meshgrid(*axes, indexing="ij")
    return np.stack([x.ravel() for x in g], axis=1)


def triangle_cells(tri: np.ndarray, resolution: int) -> np.ndarray:
    """Occupied cell coordinates (n, 3) for a single triangle."""
    r = resolution
    h = 1.0 / r
    tri = np.asarray(tri, dtype=np.float64)
    area = 0.5 * np.linalg.norm(np.cross(tri[1] - tri[0], tri[2] - tri[0]))
    if area <= _DEGENERATE_AREA:
        return np.unique(containing_voxel(tri, r), axis=0)

    lo = np.clip(np.floor((tri.min(axis=0) + 0.5) * r).astype(np.int64) - 1, 0, r - 1)
    hi = np.clip(np.floor((tri.max(axis=0) + 0.5) * r).astype(np.int64), 0, r - 1)
    cells = _cell_block(lo, hi)
    centers = (cells + 0.5) * h - 0.5
    half = 0.5 * h * (1.0 - 2 * _SHRINK)
    hit = _sat_overlap(tri, centers, half)
    found = [cells[hit]]

    # triangle lying in a cell-boundary plane: both neighbouring layers
    for axis in range(3):
        coord = tri[:, axis]
        if np.ptp(coord) > 1e-12:
            continue
        s = (coord[0] + 0.5) * r
        b = int(round(s))
        if abs(s - b) > 1e-9:
            continue
        others = [d for d in range(3) if d != axis]
        tri2 = tri[:, others]
        for layer in (b - 1, b):
            if not 0 <= layer < r:
                continue
            lo2, hi2 = lo.copy(), hi.copy()
            lo2[axis] = hi2[axis] = layer
            block = _cell_block(lo2, hi2)
            c2 = ((block[:, others] + 0.5) * h - 0.5)
            found.append(block[_sat_overlap_2d(tri2, c2, half)])
    out = np.concatenate(found, axis=0)
    return np.unique(out, axis=0) if len(out) else out.reshape(0, 3)


def voxelize_surface(mesh: TriangleMesh, resolution: int) -> np.ndarray:
    """Sorted (M, 3) coordinates of every cell overlapped by some triangle."""
    require_mesh(mesh)
    check_unit_cube(mesh)
    keys = [encode_keys(triangle_cells(t, resolution), resolution) for t in mesh.triangles]
    return decode_keys(np.unique(np.concatenate(keys)), resolution)


def occupancy_grid(mesh: TriangleMesh, resolution: int) -> SparseAttributeGrid:
    """Occupancy-only grid: one ``extra`` channel set to 1 on every surface voxel."""
    coords = voxelize_surface(mesh, resolution)
    layout = ChannelLayout(color=0, extra=1)
    return SparseAttributeGrid.from_arrays(coords, np.ones((len(coords), 1)), resolution, layout)
