"""Orthographic ray casting into view position maps, and grid rendering through them."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BoundsError
from .grid import SparseAttributeGrid, query_stencil
from .mesh import TriangleMesh, require_mesh, check_unit_cube
from .uv import PositionMap, TextureImage, bake_texture, empty_position_map

AXIS_VIEWS = ("+x", "-x", "+y", "-y", "+z", "-z")
_EPS_T = 1e-12


def _view_vector(name: str) -> np.ndarray:
    if len(name) != 2 or name[0] not in "+-" or name[1] not in "xyz":
        raise BoundsError(f"unknown view {name!r}; expected one of {AXIS_VIEWS}")
    v = np.zeros(3)
    v["xyz".index(name[1])] = 1.0 if name[0] == "+" else -1.0
    return v


@dataclass
class OrthoCamera:
    """Parallel-projection camera.

    ``direction`` is the ray direction (unit). A camera named ``"+z"`` sits on the
    +z side and looks along -z. ``footprint`` is the side length of the square
    image plane; by default it is the tightest square containing the projected
    unit cube.
    """

    direction: np.ndarray
    width: int
    height: int
    footprint: float | None = None

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        n = np.linalg.norm(d)
        if n == 0:
            raise BoundsError("camera direction must be non-zero")
        self.direction = d / n
        right, up = self.basis()
        extent = 0.5 * max(np.abs(right).sum(), np.abs(up).sum())
        if self.footprint is None:
            self.footprint = 2.0 * extent
        elif self.footprint < 2.0 * extent - 1e-12:
            raise BoundsError("camera footprint does not cover the unit cube")

    @classmethod
    def from_view(cls, name: str, width: int, height: int) -> "OrthoCamera":
        return cls(-_view_vector(name), width, height)

    def basis(self) -> tuple[np.ndarray, np.ndarray]:
        back = -self.direction
        hint = np.array([0.0, 1.0, 0.0])
        if abs(back @ hint) > 0.99:
            hint = np.array([0.0, 0.0, -1.0]) if back[1] > 0 else np.array([0.0, 0.0, 1.0])
        right = np.cross(hint, back)
        right /= np.linalg.norm(right)
        up = np.cross(back, right)
        return right, up

    def rays(self) -> tuple[np.ndarray, np.ndarray]:
        """Ray origins (H, W, 3) and the shared direction."""
        right, up = self.basis()
        u = ((np.arange(self.width) + 0.5) / self.width - 0.5) * self.footprint
        v = ((np.arange(self.height) + 0.5) / self.height - 0.5) * self.footprint
        vv, uu = np.meshgrid(v, u, indexing="ij")
        origins = uu[..., None] * right + vv[..., None] * up - 2.0 * self.direction
        return origins, self.direction


def default_cameras(width: int, height: int, count: int = 6) -> list[OrthoCamera]:
    return [OrthoCamera.from_view(v, width, height) for v in AXIS_VIEWS[:count]]


def _moller_trumbore(origins: np.ndarray, d: np.ndarray, tri: np.ndarray) -> np.ndarray:
    """Hit distance per ray, ``inf`` where the ray misses the triangle."""
    e1 = tri[1] - tri[0]
    e2 = tri[2] - tri[0]
    pvec = np.cross(d, e2)
    det = e1 @ pvec
    t = np.full(len(origins), np.inf)
    if abs(det) < 1e-15:
        return t
    inv = 1.0 / det
    s = origins - tri[0]
    u = (s @ pvec) * inv
    q = np.cross(s, e1)
    v = (q @ d) * inv
    dist = (q @ e2) * inv
    hit = (u >= 0) & (v >= 0) & (u + v <= 1) & (dist > _EPS_T)
    t[hit] = dist[hit]
    return t


def render_position_map(mesh: TriangleMesh, cam: OrthoCamera) -> PositionMap:
    """Nearest hit per pixel; equal depths resolve to the smaller triangle index."""
    require_mesh(mesh)
    check_unit_cube(mesh)
    origins, d = cam.rays()
    flat = origins.reshape(-1, 3)
    best = np.full(len(flat), np.inf)
    face = np.full(len(flat), -1, dtype=np.int64)
    for f, tri in enumerate(mesh.triangles):
        t = _moller_trumbore(flat, d, tri)
        closer = t < best
        best[closer] = t[closer]
        face[closer] = f
    pm = empty_position_map(cam.width, cam.height, "view")
    hit = face >= 0
    pts = flat[hit] + best[hit, None] * d
    pm.positions.reshape(-1, 3)[hit] = np.clip(pts, -0.5, 0.5)
    pm.mask.reshape(-1)[hit] = True
    pm.face_ids.reshape(-1)[hit] = face[hit]
    return pm


def render_view(grid: SparseAttributeGrid, vpm: PositionMap, span: str = "color", **kwargs) -> TextureImage:
    """Attribute image seen through a view position map (same path as UV baking)."""
    return bake_texture(grid, vpm, span, **kwargs)


def view_stencil(grid: SparseAttributeGrid, vpm: PositionMap) -> tuple[np.ndarray, np.ndarray]:
    """Corner indices and trilinear weights for the valid pixels of ``vpm``.

    Rendering is then ``sum_c w[:, c] * attrs[idx[:, c]]``, which is linear in the
    grid attributes; the VAE uses this to backpropagate image losses.
    """
    return query_stencil(grid, vpm.positions[vpm.mask])
