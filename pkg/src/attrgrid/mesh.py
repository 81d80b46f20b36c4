"""Triangle meshes and the Wavefront OBJ subset we read and write (v, vt, f)."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyInputError, FormatError


@dataclass
class TriangleMesh:
    vertices: np.ndarray                 # (V, 3) float64
    faces: np.ndarray                    # (F, 3) int64
    uvs: np.ndarray | None = None        # (T, 2) float64
    face_uvs: np.ndarray | None = None   # (F, 3) int64 indices into uvs
    name: str = field(default="mesh")

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.uvs is not None:
            self.uvs = np.asarray(self.uvs, dtype=np.float64).reshape(-1, 2)
            self.face_uvs = np.asarray(self.face_uvs, dtype=np.int64).reshape(-1, 3)
            if self.face_uvs.shape != self.faces.shape:
                raise FormatError("face_uvs must be aligned with faces")

    @property
    def triangles(self) -> np.ndarray:
        """(F, 3, 3) vertex positions per face."""
        return self.vertices[self.faces]

    @property
    def uv_triangles(self) -> np.ndarray:
        if self.uvs is None:
            raise FormatError("mesh has no UV coordinates")
        return self.uvs[self.face_uvs]

    def face_areas(self) -> np.ndarray:
        t = self.triangles
        return 0.5 * np.linalg.norm(np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0]), axis=1)

    def face_centroids(self) -> np.ndarray:
        return self.triangles.mean(axis=1)

    def __len__(self) -> int:
        return len(self.faces)


def require_mesh(mesh: TriangleMesh) -> None:
    if mesh is None or len(mesh.faces) == 0:
        raise EmptyInputError("mesh has no faces")


def check_unit_cube(mesh: TriangleMesh, tol: float = 1e-9) -> None:
    if len(mesh.vertices) and np.abs(mesh.vertices).max() > 0.5 + tol:
        raise FormatError("mesh vertices must lie inside [-0.5, 0.5]^3")


def parse_obj(text: str) -> TriangleMesh:
    verts, uvs, faces, face_uvs = [], [], [], []
    has_uv = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        tag = parts[0]
        try:
            if tag == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif tag == "vt":
                uvs.append([float(x) for x in parts[1:3]])
            elif tag == "f":
                corners = parts[1:]
                if len(corners) < 3:
                    raise FormatError(f"line {lineno}: face needs at least 3 vertices")
                vi, ti = [], []
                for token in corners:
                    fields = token.split("/")
                    vi.append(_obj_index(fields[0], len(verts)))
                    if len(fields) > 1 and fields[1]:
                        ti.append(_obj_index(fields[1], len(uvs)))
                face_has_uv = len(ti) == len(vi)
                if has_uv is None:
                    has_uv = face_has_uv
                elif has_uv != face_has_uv:
                    raise FormatError(f"line {lineno}: mixed faces with and without UVs")
                # fan triangulation
                for a in range(1, len(vi) - 1):
                    faces.append([vi[0], vi[a], vi[a + 1]])
                    if face_has_uv:
                        face_uvs.append([ti[0], ti[a], ti[a + 1]])
        except (ValueError, IndexError) as exc:
            raise FormatError(f"line {lineno}: cannot parse {raw!r}") from exc
    mesh = TriangleMesh(
        np.array(verts, dtype=np.float64).reshape(-1, 3),
        np.array(faces, dtype=np.int64).reshape(-1, 3),
        np.array(uvs, dtype=np.float64).reshape(-1, 2) if has_uv else None,
        np.array(face_uvs, dtype=np.int64).reshape(-1, 3) if has_uv else None,
    )
    if len(mesh.faces) and (mesh.faces.max() >= len(mesh.vertices)):
        raise FormatError("face references a missing vertex")
    return mesh


def _obj_index(token: str, count: int) -> int:
    i = int(token)
    if i < 0:
        i = count + i + 1
    if i < 1:
        raise FormatError(f"invalid OBJ index {token}")
    return i - 1


def format_obj(mesh: TriangleMesh) -> str:
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    if mesh.uvs is not None:
        lines += [f"vt {u:.9g} {v:.9g}" for u, v in mesh.uvs]
        for f, t in zip(mesh.faces + 1, mesh.face_uvs + 1):
            lines.append("f " + " ".join(f"{a}/{b}" for a, b in zip(f, t)))
    else:
        lines += ["f " + " ".join(str(a) for a in f) for f in mesh.faces + 1]
    return "\n".join(lines) + "\n"


def read_obj(path) -> TriangleMesh:
    mesh = parse_obj(Path(path).read_text())
    mesh.name = Path(path).stem
    return mesh


def write_obj(path, mesh: TriangleMesh) -> None:
    Path(path).write_text(format_obj(mesh))
