"""Analytic scenes, the sphere-traced shader and dataset generation."""
import filecmp
import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from hashsdf.geometry import load_cameras
from hashsdf.synthetic import (AnalyticScene, Box, Difference, Lighting, Sphere, Torus, Union,
                               canonical_scene, load_dataset, make_camera, make_dataset,
                               render_ground_truth, scene_from_dict, scene_sdf, scene_to_dict)


def sphere_scene(**kw):
    return AnalyticScene("s", Sphere((0, 0, 0), 0.5, (0.8, 0.4, 0.2)), **kw)


def numerical_norm(scene, x, h=1e-6):
    eye = torch.eye(3, dtype=torch.float64) * h
    g = torch.stack([scene_sdf(scene, x + e) - scene_sdf(scene, x - e) for e in eye], -1)
    return (g / (2 * h)).norm(dim=-1)


def dir_tree(root):
    return sorted(p.relative_to(root) for p in root.rglob("*") if p.is_file())


class TestSceneSdf:
    """Primitive and CSG distance values."""

    def test_sphere_center(self):
        assert float(scene_sdf(sphere_scene(), [0.0, 0.0, 0.0])) == -0.5

    def test_sphere_outside(self):
        assert float(scene_sdf(sphere_scene(), [1.0, 0.0, 0.0])) == 0.5

    def test_union_min(self):
        s = AnalyticScene("u", Union([Sphere((-0.4, 0, 0), 0.3), Sphere((0.4, 0, 0), 0.3)]))
        assert float(scene_sdf(s, [0.0, 0.0, 0.0])) == pytest.approx(0.1, abs=1e-15)

    def test_box_and_torus_values(self):
        box = AnalyticScene("b", Box((0, 0, 0), (0.4, 0.3, 0.2)))
        assert float(scene_sdf(box, [1.0, 0.0, 0.0])) == pytest.approx(0.6)
        assert float(scene_sdf(box, [0.0, 0.0, 0.0])) == pytest.approx(-0.2)
        tor = AnalyticScene("t", Torus((0, 0, 0), 0.5, 0.2))
        assert float(scene_sdf(tor, [0.5, 0.0, 0.0])) == pytest.approx(-0.2)
        assert float(scene_sdf(tor, [0.0, 0.0, 0.0])) == pytest.approx(0.3)

    def test_difference(self):
        s = AnalyticScene("d", Difference(Sphere((0, 0, 0), 0.5), Sphere((0.5, 0, 0), 0.2)))
        assert float(scene_sdf(s, [0.5, 0.0, 0.0])) == pytest.approx(0.2)
        assert float(scene_sdf(s, [-0.2, 0.0, 0.0])) == pytest.approx(-0.3)

    def test_canonical_scenes_inside_ball(self):
        pts = torch.nn.functional.normalize(torch.randn(2000, 3, dtype=torch.float64), dim=1)
        for name in ("SPHERE", "BOX", "TORUS", "CSG-DIFF", "SPECULAR"):
            assert (scene_sdf(canonical_scene(name), 0.95 * pts) > 0).all(), name

    def test_unknown_scene(self):
        with pytest.raises(ValueError):
            canonical_scene("TEAPOT")

    def test_descriptor_round_trip(self):
        for name in ("SPHERE", "BOX", "TORUS", "CSG-DIFF", "SPECULAR"):
            scene = canonical_scene(name)
            assert scene_from_dict(json.loads(json.dumps(scene_to_dict(scene)))) == scene


class TestEikonalPrimitives:
    """Single primitives are exact distance functions."""

    def test_sphere(self):
        x = torch.rand(1000, 3, dtype=torch.float64) * 1.8 - 0.9
        x = x[x.norm(dim=1) > 1e-2]
        assert (numerical_norm(sphere_scene(), x) - 1).abs().max() < 1e-4

    def test_box(self):
        half = torch.tensor([0.4, 0.3, 0.2], dtype=torch.float64)
        scene = AnalyticScene("b", Box((0, 0, 0), tuple(half.tolist())))
        x = torch.rand(4000, 3, dtype=torch.float64) * 1.8 - 0.9
        face = (half - x.abs()).sort(dim=1).values
        inside = (face > 0).all(1)
        # interior medial set: two faces equally near
        keep = ~inside | (face[:, 1] - face[:, 0] > 2e-2)
        x = x[keep][:1000]
        assert x.shape[0] == 1000
        assert (numerical_norm(scene, x) - 1).abs().max() < 1e-4

    def test_torus(self):
        scene = AnalyticScene("t", Torus((0, 0, 0), 0.5, 0.2))
        x = torch.rand(4000, 3, dtype=torch.float64) * 1.8 - 0.9
        rho = x[:, :2].norm(dim=1)
        tube = torch.stack([rho - 0.5, x[:, 2]], 1).norm(dim=1)
        x = x[(rho > 1e-2) & (tube > 1e-2)][:1000]
        assert (numerical_norm(scene, x) - 1).abs().max() < 1e-4


class TestGroundTruthRender:
    """Sphere-traced Lambertian shading."""

    def test_miss_is_background(self):
        scene = sphere_scene(background=(0.1, 0.2, 0.3))
        cam = make_camera(np.array([0.0, -2.5, 0.0]), 16)
        out = render_ground_truth(scene, cam)
        assert np.array_equal(out["rgb"][0, 0], [0.1, 0.2, 0.3])
        assert not out["mask"][0, 0]

    def test_central_hit_full_diffuse(self):
        eye = np.array([0.0, -2.5, 0.0])
        light = Lighting(direction=tuple(eye), ambient=0.2, diffuse=0.7)
        scene = sphere_scene(lighting=light)
        out = render_ground_truth(scene, make_camera(eye, 33))
        expected = np.array([0.8, 0.4, 0.2]) * (0.2 + 0.7)
        assert np.allclose(out["rgb"][16, 16], expected, atol=1e-3)
        lum = out["rgb"].sum(-1)
        assert lum[out["mask"]].max() == pytest.approx(lum[16, 16], abs=1e-3)

    def test_central_depth(self):
        eye = np.array([0.0, -2.5, 0.0])
        cam = make_camera(eye, 33)
        out = render_ground_truth(sphere_scene(), cam)
        d = cam.pixel_directions()[16, 16]
        o = eye
        b = float(o @ d)
        t_near = -b - math.sqrt(b * b - (o @ o - 0.25))
        assert out["depth"][16, 16] == pytest.approx(t_near, abs=1e-3)

    def test_deterministic(self):
        cam = make_camera(np.array([1.0, -2.0, 1.0]), 24)
        scene = canonical_scene("CSG-DIFF")
        a, b = render_ground_truth(scene, cam), render_ground_truth(scene, cam)
        assert np.array_equal(a["rgb"], b["rgb"]) and np.array_equal(a["mask"], b["mask"])

    def test_specular_brightens(self):
        eye = np.array([0.0, -2.5, 0.0])
        cam = make_camera(eye, 17)
        plain = render_ground_truth(sphere_scene(lighting=Lighting(direction=tuple(eye))), cam)
        shiny = render_ground_truth(
            sphere_scene(lighting=Lighting(direction=tuple(eye), specular=0.5)), cam)
        assert shiny["rgb"][8, 8].sum() > plain["rgb"][8, 8].sum()


class TestMakeDataset:
    """On-disk multi-view datasets."""

    def test_orbit_rig(self, tmp_path):
        root = make_dataset("SPHERE", tmp_path, n_views=4, image_size=8, rig="orbit", n_test=0,
                            n_points=500)
        poses = [np.reshape(r["pose"], (3, 4)) for r in load_cameras(root / "cameras.json")]
        centers = np.array([p[:, 3] for p in poses])
        radii = np.linalg.norm(centers, axis=1)
        assert np.allclose(radii, radii[0])
        az = np.arctan2(centers[:, 1], centers[:, 0])
        gaps = np.diff(np.unwrap(az))
        assert np.allclose(gaps, 2 * np.pi / 4)

    def test_layout(self, sphere_dataset):
        for name in ("cameras.json", "gt_points.bin", "scene.json", "images/000.png",
                     "masks/000.png"):
            assert (sphere_dataset / name).exists()
        ds = load_dataset(sphere_dataset)
        assert ds.images.shape == (6, 16, 16, 3)
        assert ds.indices("train") == [0, 1, 2, 3] and ds.indices("test") == [4, 5]
        assert ds.gt_points.shape == (2000, 3)

    def test_gt_points_on_surface(self, tmp_path):
        root = make_dataset("CSG-DIFF", tmp_path, n_views=2, image_size=8, n_test=0,
                            n_points=3000)
        pts = load_dataset(root).gt_points
        scene = canonical_scene("CSG-DIFF")
        # float32 storage rounds coordinates by ~3e-8
        assert scene_sdf(scene, pts).abs().max() < 1e-4

    def test_same_seed_byte_identical(self, tmp_path):
        a = make_dataset("TORUS", tmp_path / "a", n_views=3, image_size=12, n_test=1,
                         n_points=500, seed=5)
        b = make_dataset("TORUS", tmp_path / "b", n_views=3, image_size=12, n_test=1,
                         n_points=500, seed=5)
        files = dir_tree(a)
        assert files == dir_tree(b)
        _, mismatch, errors = filecmp.cmpfiles(a, b, [str(f) for f in files], shallow=False)
        assert not mismatch and not errors

    def test_exposure_gains_recorded(self, tmp_path):
        root = make_dataset("SPHERE", tmp_path, n_views=4, image_size=8, n_test=1,
                            exposure=True, n_points=200, seed=2)
        gains = json.loads((root / "scene.json").read_text())["exposure_gains"]
        assert len(gains) == 5
        assert all(0.8 <= g <= 1.25 for g in gains) and len(set(gains)) == 5

    def test_too_few_views(self, tmp_path):
        with pytest.raises(ValueError):
            make_dataset("SPHERE", tmp_path, n_views=1)

    @given(n=st.integers(2, 12))
    def test_hemisphere_cameras_look_at_origin(self, n):
        from hashsdf.synthetic import rig_positions
        for eye in rig_positions(n, "hemisphere"):
            cam = make_camera(eye, 8)
            axis = cam.rotation @ np.array([0.0, 0.0, 1.0])
            assert np.allclose(axis, -eye / np.linalg.norm(eye), atol=1e-12)
