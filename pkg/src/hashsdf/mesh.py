"""Isosurface extraction, area sampling and OBJ / binary PLY mesh I/O."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from skimage.measure import marching_cubes as _sk_marching_cubes


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (V, 3) float64
    triangles: np.ndarray  # (T, 3) int64
    normals: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and (self.triangles.min() < 0
                                    or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def face_areas(self) -> np.ndarray:
        v = self.vertices[self.triangles]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    def face_normals(self) -> np.ndarray:
        v = self.vertices[self.triangles]
        n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    def area(self) -> float:
        return float(self.face_areas().sum())


def empty_mesh() -> TriangleMesh:
    return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))


def sample_lattice(sdf_fn, resolution: int, bounds=(-1.0, 1.0), chunk: int = 65536):
    """SDF values on a resolution^3 lattice spanning ``bounds`` (index order x, y, z)."""
    lo, hi = bounds
    axis = np.linspace(lo, hi, resolution)
    grid = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), -1).reshape(-1, 3)
    out = np.empty(len(grid))
    with torch.no_grad():
        for s in range(0, len(grid), chunk):
            v = sdf_fn(torch.from_numpy(grid[s:s + chunk]))
            out[s:s + chunk] = torch.as_tensor(v).double().reshape(-1).numpy()
    return out.reshape(resolution, resolution, resolution)


def _drop_degenerate(verts: np.ndarray, faces: np.ndarray):
    v = verts[faces]
    area = 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)
    faces = faces[area > 1e-12]
    used = np.unique(faces)
    remap = np.full(len(verts), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return verts[used], remap[faces]


def marching_cubes(sdf_fn, resolution: int, bounds=(-1.0, 1.0), chunk: int = 65536,
                   level: float = 0.0) -> TriangleMesh:
    """Triangulate the zero level set of ``sdf_fn`` sampled on a lattice.

    ``sdf_fn`` maps an (M, 3) float64 tensor to M values.  Faces wind so
    that normals point towards increasing SDF (outwards).  A lattice with
    no sign change yields an empty mesh.
    """
    if resolution < 8:
        raise ValueError("resolution must be >= 8")
    vol = sample_lattice(sdf_fn, resolution, bounds, chunk)
    if not np.isfinite(vol).all():
        raise ValueError("non-finite sdf values on the lattice")
    if not (vol.min() < level < vol.max()):
        return empty_mesh()
    step = (bounds[1] - bounds[0]) / (resolution - 1)
    verts, faces, _, _ = _sk_marching_cubes(vol, level=level, spacing=(step, step, step),
                                            gradient_direction="descent", method="lorensen",
                                            allow_degenerate=False)
    verts = verts.astype(np.float64) + bounds[0]
    verts, faces = _drop_degenerate(verts, faces.astype(np.int64))
    return TriangleMesh(verts, faces)


def field_sdf_fn(field, active_levels=None):
    """Adapter so a neural field can be passed to :func:`marching_cubes`."""
    dtype = field.grid.tables.dtype

    def fn(p):
        return field.sdf(p.to(dtype), active_levels, n_features=0)[0]
    return fn


def sample_surface(mesh: TriangleMesh, n: int, seed: int = 0) -> np.ndarray:
    """Uniform area-weighted samples on the mesh surface, (n, 3)."""
    if mesh.is_empty:
        raise ValueError("cannot sample an empty mesh")
    rng = np.random.default_rng(seed)
    area = mesh.face_areas()
    face = rng.choice(len(area), size=n, p=area / area.sum())
    u, v = rng.random(n), rng.random(n)
    flip = u + v > 1
    u[flip], v[flip] = 1 - u[flip], 1 - v[flip]
    tri = mesh.vertices[mesh.triangles[face]]
    return tri[:, 0] + u[:, None] * (tri[:, 1] - tri[:, 0]) + v[:, None] * (tri[:, 2] - tri[:, 0])


# --- I/O ----------------------------------------------------------------------

def export_mesh(mesh: TriangleMesh, path, fmt: str | None = None) -> Path:
    """Write OBJ (text, 1-based faces) or binary little-endian PLY.

    OBJ coordinates use 17 significant digits so float64 values round-trip.
    """
    path = Path(path)
    fmt = (fmt or path.suffix.lstrip(".")).lower()
    if fmt == "obj":
        lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
        lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles.tolist()]
        path.write_text("".join(line + "\n" for line in lines))
    elif fmt == "ply":
        header = ("ply\nformat binary_little_endian 1.0\n"
                  f"element vertex {len(mesh.vertices)}\n"
                  "property double x\nproperty double y\nproperty double z\n"
                  f"element face {len(mesh.triangles)}\n"
                  "property list uchar int vertex_indices\nend_header\n")
        faces = np.zeros(len(mesh.triangles), dtype=[("n", "u1"), ("idx", "<i4", 3)])
        faces["n"] = 3
        faces["idx"] = mesh.triangles
        with open(path, "wb") as fh:
            fh.write(header.encode("ascii"))
            fh.write(mesh.vertices.astype("<f8").tobytes())
            fh.write(faces.tobytes())
    else:
        raise ValueError(f"unsupported mesh format {fmt!r}")
    return path


def import_mesh(path, fmt: str | None = None) -> TriangleMesh:
    path = Path(path)
    fmt = (fmt or path.suffix.lstrip(".")).lower()
    if fmt == "obj":
        verts, faces = [], []
        for line in path.read_text().splitlines():
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(p) for p in parts[1:4]])
            elif parts[0] == "f":
                faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
        return TriangleMesh(np.array(verts).reshape(-1, 3), np.array(faces).reshape(-1, 3))
    if fmt == "ply":
        data = path.read_bytes()
        end = data.index(b"end_header\n") + len(b"end_header\n")
        counts = {}
        for line in data[:end].decode("ascii").splitlines():
            if line.startswith("element"):
                _, name, n = line.split()
                counts[name] = int(n)
        nv, nf = counts.get("vertex", 0), counts.get("face", 0)
        verts = np.frombuffer(data, dtype="<f8", count=3 * nv, offset=end).reshape(nv, 3)
        faces = np.frombuffer(data, dtype=[("n", "u1"), ("idx", "<i4", 3)], count=nf,
                              offset=end + 24 * nv)
        return TriangleMesh(verts.copy(), faces["idx"].astype(np.int64))
    raise ValueError(f"unsupported mesh format {fmt!r}")
