"""Marching cubes extraction, surface sampling and mesh file I/O."""
import math
from collections import Counter

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from hashsdf.analytic import constant_sdf, plane_sdf, sphere_sdf
from hashsdf.mesh import (TriangleMesh, empty_mesh, export_mesh, import_mesh, marching_cubes,
                          sample_surface)


def edge_counts(mesh):
    e = np.concatenate([mesh.triangles[:, [0, 1]], mesh.triangles[:, [1, 2]],
                        mesh.triangles[:, [2, 0]]])
    return Counter(map(tuple, np.sort(e, axis=1).tolist()))


class TestMarchingCubes:
    """Isosurface of analytic stubs."""

    def test_sphere_vertices_within_cell_diagonal(self):
        mesh = marching_cubes(sphere_sdf(0.5), 64)
        err = np.abs(np.linalg.norm(mesh.vertices, axis=1) - 0.5)
        assert err.max() < 2 * math.sqrt(3) / 64

    def test_plane_exact(self):
        mesh = marching_cubes(plane_sdf((0, 0, 1), 0.0), 16)
        assert np.abs(mesh.vertices[:, 2]).max() < 1e-6
        n = mesh.face_normals()
        assert np.abs(np.abs(n[:, 2]) - 1).max() < 1e-3

    def test_positive_everywhere_is_empty(self):
        mesh = marching_cubes(constant_sdf(1.0), 16)
        assert mesh.is_empty and len(mesh.vertices) == 0

    def test_resolution_lower_bound(self):
        with pytest.raises(ValueError):
            marching_cubes(sphere_sdf(0.5), 7)

    def test_sphere_area_resolution_128(self):
        mesh = marching_cubes(sphere_sdf(0.5), 128)
        assert mesh.area() == pytest.approx(4 * math.pi * 0.25, rel=0.02)

    def test_sphere_watertight(self):
        mesh = marching_cubes(sphere_sdf(0.5), 48)
        assert set(edge_counts(mesh).values()) == {2}

    def test_normals_point_outward(self):
        mesh = marching_cubes(sphere_sdf(0.5), 32)
        centers = mesh.vertices[mesh.triangles].mean(1)
        assert ((mesh.face_normals() * centers).sum(1) > 0).all()

    def test_no_degenerate_triangles(self):
        mesh = marching_cubes(sphere_sdf(0.37), 40)
        assert mesh.face_areas().min() > 1e-12

    def test_deterministic(self):
        a = marching_cubes(sphere_sdf(0.5), 40)
        b = marching_cubes(sphere_sdf(0.5), 40)
        assert np.array_equal(a.vertices, b.vertices)
        assert np.array_equal(a.triangles, b.triangles)

    def test_chunking_does_not_change_result(self):
        a = marching_cubes(sphere_sdf(0.5), 24, chunk=65536)
        b = marching_cubes(sphere_sdf(0.5), 24, chunk=1000)
        assert np.array_equal(a.vertices, b.vertices)

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            marching_cubes(lambda p: torch.full((p.shape[0],), float("nan")), 8)

    @given(r=st.floats(0.2, 0.8))
    def test_sphere_radius_property(self, r):
        mesh = marching_cubes(sphere_sdf(r), 32)
        err = np.abs(np.linalg.norm(mesh.vertices, axis=1) - r)
        assert err.max() < 2 * math.sqrt(3) / 32


class TestSampleSurface:
    """Area-weighted point sampling."""

    def test_points_on_triangles(self):
        mesh = marching_cubes(plane_sdf((0, 0, 1), 0.0), 16)
        pts = sample_surface(mesh, 1000)
        assert np.abs(pts[:, 2]).max() < 1e-9

    def test_area_weighting(self):
        # areas 0.5 and 3
        v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [2, 0, 0], [5, 0, 0], [2, 2, 0.0]])
        mesh = TriangleMesh(v, [[0, 1, 2], [3, 4, 5]])
        pts = sample_surface(mesh, 20000, seed=1)
        frac = (pts[:, 0] >= 2).mean()
        assert frac == pytest.approx(3 / 3.5, abs=0.01)

    def test_seeded(self):
        mesh = marching_cubes(sphere_sdf(0.5), 16)
        assert np.array_equal(sample_surface(mesh, 50, 3), sample_surface(mesh, 50, 3))

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            sample_surface(empty_mesh(), 10)


class TestMeshIO:
    """OBJ and binary PLY round trips."""

    @pytest.mark.parametrize("fmt", ["obj", "ply"])
    def test_round_trip(self, tmp_path, fmt):
        mesh = marching_cubes(sphere_sdf(0.45), 20)
        path = export_mesh(mesh, tmp_path / f"m.{fmt}")
        back = import_mesh(path)
        assert np.array_equal(back.vertices, mesh.vertices)
        assert np.array_equal(back.triangles, mesh.triangles)

    @pytest.mark.parametrize("fmt", ["obj", "ply"])
    def test_empty_mesh(self, tmp_path, fmt):
        back = import_mesh(export_mesh(empty_mesh(), tmp_path / f"e.{fmt}"))
        assert back.is_empty and len(back.vertices) == 0

    def test_single_triangle_obj(self, tmp_path):
        mesh = TriangleMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
        lines = export_mesh(mesh, tmp_path / "t.obj").read_text().splitlines()
        assert sum(ln.startswith("v ") for ln in lines) == 3
        assert [ln for ln in lines if ln.startswith("f ")] == ["f 1 2 3"]

    def test_ply_is_little_endian_binary(self, tmp_path):
        mesh = TriangleMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
        data = export_mesh(mesh, tmp_path / "t.ply").read_bytes()
        assert b"format binary_little_endian 1.0" in data.split(b"end_header")[0]

    def test_unknown_format(self, tmp_path):
        with pytest.raises(ValueError):
            export_mesh(empty_mesh(), tmp_path / "m.stl")

    def test_bad_indices_rejected(self):
        with pytest.raises(ValueError):
            TriangleMesh([[0, 0, 0]], [[0, 1, 2]])
