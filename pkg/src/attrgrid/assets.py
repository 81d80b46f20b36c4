"""Procedural meshes and attribute fields for tests, demos and toy training runs."""
from __future__ import annotations

import numpy as np

from .grid import ChannelLayout, SparseAttributeGrid, voxel_centers
from .mesh import TriangleMesh
from .voxelize import voxelize_surface

# outward normal axis/sign, then the two in-plane axes (u, v) chosen so u x v = normal
_BOX_FACES = [
    (0, +1, 1, 2), (0, -1, 2, 1),
    (1, +1, 2, 0), (1, -1, 0, 2),
    (2, +1, 0, 1), (2, -1, 1, 0),
]


def box_mesh(half_extent=0.25, center=(0.0, 0.0, 0.0), pad: float = 0.02) -> TriangleMesh:
    """Axis-aligned box; each face gets its own island in a 3x2 UV atlas."""
    half = np.broadcast_to(np.asarray(half_extent, dtype=np.float64), (3,))
    center = np.asarray(center, dtype=np.float64)
    verts, faces, uvs, face_uvs = [], [], [], []
    for f, (axis, sign, ua, va) in enumerate(_BOX_FACES):
        base = len(verts)
        col, row = f % 3, f // 3
        for du, dv in [(-1, -1), (1, -1), (1, 1), (-1, 1)]:
            p = center.copy()
            p[axis] += sign * half[axis]
            p[ua] += du * half[ua]
            p[va] += dv * half[va]
            verts.append(p)
            uvs.append([(col + pad + (1 - 2 * pad) * (du + 1) / 2) / 3,
                        (row + pad + (1 - 2 * pad) * (dv + 1) / 2) / 2])
        faces += [[base, base + 1, base + 2], [base, base + 2, base + 3]]
        face_uvs += [[base, base + 1, base + 2], [base, base + 2, base + 3]]
    return TriangleMesh(np.array(verts), np.array(faces), np.array(uvs), np.array(face_uvs), "box")


def quad_mesh(corner, u_edge, v_edge, uv_rect=(0.0, 0.0, 1.0, 1.0)) -> TriangleMesh:
    """Planar parallelogram spanned from ``corner`` by two edge vectors."""
    c = np.asarray(corner, dtype=np.float64)
    a, b = np.asarray(u_edge, dtype=np.float64), np.asarray(v_edge, dtype=np.float64)
    verts = np.array([c, c + a, c + a + b, c + b])
    u0, v0, u1, v1 = uv_rect
    uvs = np.array([[u0, v0], [u1, v0], [u1, v1], [u0, v1]])
    faces = np.array([[0, 1, 2], [0, 2, 3]])
    return TriangleMesh(verts, faces, uvs, faces.copy(), "quad")


def merge_meshes(*meshes: TriangleMesh) -> TriangleMesh:
    verts, faces, uvs, face_uvs = [], [], [], []
    vo = to = 0
    for m in meshes:
        verts.append(m.vertices)
        faces.append(m.faces + vo)
        if m.uvs is not None:
            uvs.append(m.uvs)
            face_uvs.append(m.face_uvs + to)
            to += len(m.uvs)
        vo += len(m.vertices)
    has_uv = len(uvs) == len(meshes)
    return TriangleMesh(
        np.concatenate(verts), np.concatenate(faces),
        np.concatenate(uvs) if has_uv else None,
        np.concatenate(face_uvs) if has_uv else None,
        "merged",
    )


def random_mesh(n_triangles: int, rng: np.random.Generator, scale: float = 0.35) -> TriangleMesh:
    """Random triangle soup inside the unit cube (for renderer oracles)."""
    centers = rng.uniform(-0.3, 0.3, size=(n_triangles, 1, 3))
    offsets = rng.uniform(-scale / 2, scale / 2, size=(n_triangles, 3, 3))
    tris = np.clip(centers + offsets, -0.5, 0.5)
    verts = tris.reshape(-1, 3)
    faces = np.arange(len(verts)).reshape(-1, 3)
    return TriangleMesh(verts, faces, name="soup")


def smooth_color_field(points, phase: float = 0.0) -> np.ndarray:
    """A smooth RGB field in [0.1, 0.9] used as a toy texture."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    r = 0.5 + 0.4 * np.sin(3.0 * p[:, 0] + 2.0 * p[:, 1] + phase)
    g = 0.5 + 0.4 * np.cos(2.5 * p[:, 1] - 1.5 * p[:, 2] + 0.7 * phase)
    b = 0.5 + 0.4 * np.sin(2.0 * p[:, 2] + 1.0 * p[:, 0] - 1.3 * phase)
    return np.stack([r, g, b], axis=1)


def colored_grid(mesh: TriangleMesh, resolution: int, field=smooth_color_field,
                 layout: ChannelLayout | None = None, **kwargs) -> SparseAttributeGrid:
    """Voxelize ``mesh`` and fill each voxel with ``field`` evaluated at its center."""
    coords = voxelize_surface(mesh, resolution)
    values = field(voxel_centers(coords, resolution), **kwargs)
    return SparseAttributeGrid.from_arrays(coords, values, resolution, layout or ChannelLayout())


def toy_box_asset(resolution: int = 32, phase: float = 0.0) -> tuple[TriangleMesh, SparseAttributeGrid]:
    """The overfit asset: a box whose faces sit on voxel-center planes.

    At R=32 the box spans ten cells per side, giving 488 surface voxels.
    """
    h = 1.0 / resolution
    # faces on the centre planes of cells 11 and 20
    lo = (11 + 0.5) * h - 0.5
    hi = (20 + 0.5) * h - 0.5
    mesh = box_mesh(half_extent=(hi - lo) / 2, center=((hi + lo) / 2,) * 3)
    return mesh, colored_grid(mesh, resolution, phase=phase)
