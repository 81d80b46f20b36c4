import itertools

import numpy as np
import pytest

from attrgrid.assets import box_mesh, quad_mesh, toy_box_asset
from attrgrid.errors import EmptyInputError
from attrgrid.mesh import TriangleMesh
from attrgrid.voxelize import occupancy_grid, voxelize_surface


def clip_area(tri, lo, hi):
    """Area of a triangle clipped to the closed box [lo, hi] (Sutherland-Hodgman)."""
    poly = [np.asarray(v, dtype=float) for v in tri]
    for axis in range(3):
        for bound, keep_below in ((lo[axis], False), (hi[axis], True)):
            out = []
            for i, cur in enumerate(poly):
                prev = poly[i - 1]
                inside = lambda p: p[axis] <= bound if keep_below else p[axis] >= bound  # noqa: E731
                if inside(cur):
                    if not inside(prev):
                        t = (bound - prev[axis]) / (cur[axis] - prev[axis])
                        out.append(prev + t * (cur - prev))
                    out.append(cur)
                elif inside(prev):
                    t = (bound - prev[axis]) / (cur[axis] - prev[axis])
                    out.append(prev + t * (cur - prev))
            poly = out
            if not poly:
                return 0.0
    area = np.zeros(3)
    for i in range(1, len(poly) - 1):
        area += np.cross(poly[i] - poly[0], poly[i + 1] - poly[0])
    return 0.5 * np.linalg.norm(area)


def brute_force_voxels(mesh, res):
    h = 1.0 / res
    cells = set()
    for tri in mesh.triangles:
        for c in itertools.product(range(res), repeat=3):
            lo = np.array(c) * h - 0.5
            if clip_area(tri, lo, lo + h) > 1e-12:
                cells.add(c)
    return sorted(cells)


def test_quad_on_cell_face_marks_two_cells():
    res = 4
    h = 1.0 / res
    # unit-cell quad lying in the plane x = 0 (the face between cells 1 and 2)
    quad = quad_mesh((0.0, -0.5 + h, -0.5 + h), (0.0, h, 0.0), (0.0, 0.0, h))
    got = voxelize_surface(quad, res).tolist()
    assert got == [[1, 1, 1], [2, 1, 1]]


def test_full_cube_surface_boundary_cells():
    mesh = box_mesh(half_extent=0.5, pad=0.0)
    coords = voxelize_surface(mesh, 4)
    assert len(coords) == 4 ** 3 - 2 ** 3
    on_boundary = np.any((coords == 0) | (coords == 3), axis=1)
    assert on_boundary.all()


def test_degenerate_triangle_marks_vertex_cells():
    verts = np.array([[-0.4, -0.4, -0.4], [0.1, 0.1, 0.1], [0.1, 0.1, 0.1]])
    mesh = TriangleMesh(verts, [[0, 1, 2]])
    got = voxelize_surface(mesh, 4).tolist()
    assert got == [[0, 0, 0], [2, 2, 2]]


@pytest.mark.parametrize("seed", range(3))
def test_random_triangles_match_clipping_oracle(seed):
    rng = np.random.default_rng(seed)
    verts = rng.uniform(-0.45, 0.45, (12, 3))
    mesh = TriangleMesh(verts, np.arange(12).reshape(4, 3))
    got = [tuple(c) for c in voxelize_surface(mesh, 8).tolist()]
    assert got == brute_force_voxels(mesh, 8)


def test_toy_box_voxel_count():
    _, grid = toy_box_asset(32)
    assert len(grid) == 488


def test_voxelize_deterministic_and_sorted():
    mesh = box_mesh(0.3)
    a = voxelize_surface(mesh, 16)
    b = voxelize_surface(mesh, 16)
    assert np.array_equal(a, b)
    keys = (a[:, 0] * 16 + a[:, 1]) * 16 + a[:, 2]
    assert np.all(np.diff(keys) > 0)


def test_occupancy_grid_layout():
    g = occupancy_grid(box_mesh(0.3), 8)
    assert g.layout.k == 1 and g.layout.extra == 1
    assert np.all(g.attrs == 1.0)


def test_empty_mesh_rejected():
    with pytest.raises(EmptyInputError):
        voxelize_surface(TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3))), 8)
