"""Analytic CSG scenes, a sphere-traced shader, and multi-view dataset generation."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .geometry import Camera, camera_from_record, camera_to_record, load_cameras, look_at, \
    save_cameras

# --- scene description ---------------------------------------------------


@dataclass
class Sphere:
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 0.5
    albedo: tuple = (0.8, 0.35, 0.25)


@dataclass
class Box:
    center: tuple = (0.0, 0.0, 0.0)
    half: tuple = (0.4, 0.4, 0.4)
    albedo: tuple = (0.3, 0.6, 0.8)


@dataclass
class Torus:
    """Ring in the xy-plane around ``center``."""
    center: tuple = (0.0, 0.0, 0.0)
    major: float = 0.5
    minor: float = 0.2
    albedo: tuple = (0.85, 0.7, 0.3)


@dataclass
class Union:
    children: list


@dataclass
class Intersection:
    children: list


@dataclass
class Difference:
    a: object
    b: object


@dataclass
class Lighting:
    direction: tuple = (0.3, 0.2, 1.0)  # towards the light
    ambient: float = 0.3
    diffuse: float = 0.7
    specular: float = 0.0
    shininess: float = 32.0

    def unit_direction(self) -> np.ndarray:
        d = np.asarray(self.direction, dtype=np.float64)
        return d / np.linalg.norm(d)


@dataclass
class AnalyticScene:
    name: str
    root: object
    background: tuple = (1.0, 1.0, 1.0)
    lighting: Lighting = field(default_factory=Lighting)


def _t(v, like):
    return torch.as_tensor(v, dtype=like.dtype)


def _node_sdf(node, x: torch.Tensor):
    """Returns (sdf (N,), albedo (N, 3))."""
    if isinstance(node, Sphere):
        d = (x - _t(node.center, x)).norm(dim=-1) - node.radius
        return d, _t(node.albedo, x).expand(x.shape[0], 3)
    if isinstance(node, Box):
        q = (x - _t(node.center, x)).abs() - _t(node.half, x)
        d = q.clamp_min(0).norm(dim=-1) + q.max(dim=-1).values.clamp_max(0)
        return d, _t(node.albedo, x).expand(x.shape[0], 3)
    if isinstance(node, Torus):
        p = x - _t(node.center, x)
        q = torch.stack([p[:, :2].norm(dim=-1) - node.major, p[:, 2]], dim=-1)
        return q.norm(dim=-1) - node.minor, _t(node.albedo, x).expand(x.shape[0], 3)
    if isinstance(node, (Union, Intersection)):
        parts = [_node_sdf(c, x) for c in node.children]
        ds = torch.stack([p[0] for p in parts], dim=1)
        cs = torch.stack([p[1] for p in parts], dim=1)
        d, i = ds.min(dim=1) if isinstance(node, Union) else ds.max(dim=1)
        return d, cs[torch.arange(x.shape[0]), i]
    if isinstance(node, Difference):
        da, ca = _node_sdf(node.a, x)
        db, cb = _node_sdf(node.b, x)
        use_b = -db > da
        return torch.maximum(da, -db), torch.where(use_b[:, None], cb, ca)
    raise TypeError(f"unknown scene node {type(node).__name__}")


def scene_sdf(scene: AnalyticScene, x) -> torch.Tensor:
    """Signed distance of points (N, 3); exact for single primitives.

    Union is exact outside overlaps; intersection and difference give a
    lower bound on the true distance.
    """
    x = torch.as_tensor(x, dtype=torch.float64)
    squeeze = x.dim() == 1
    d, _ = _node_sdf(scene.root, x.reshape(-1, 3))
    return d[0] if squeeze else d


def scene_albedo(scene: AnalyticScene, x: torch.Tensor) -> torch.Tensor:
    return _node_sdf(scene.root, x)[1]


def scene_normal(scene: AnalyticScene, x: torch.Tensor, h: float = 1e-6) -> torch.Tensor:
    eye = torch.eye(3, dtype=x.dtype) * h
    g = torch.stack([scene_sdf(scene, x + e) - scene_sdf(scene, x - e) for e in eye], dim=-1)
    return torch.nn.functional.normalize(g / (2 * h), dim=-1)


def canonical_scene(name: str) -> AnalyticScene:
    name = name.upper()
    if name == "SPHERE":
        root = Sphere((0, 0, 0), 0.5, (0.8, 0.35, 0.25))
    elif name == "BOX":
        root = Box((0, 0, 0), (0.45, 0.35, 0.3), (0.3, 0.6, 0.8))
    elif name == "TORUS":
        root = Torus((0, 0, 0), 0.5, 0.2, (0.85, 0.7, 0.3))
    elif name == "CSG-DIFF":
        root = Difference(Sphere((0, 0, 0), 0.6, (0.8, 0.35, 0.25)),
                          Box((0, 0, 0.55), (0.3, 0.3, 0.45), (0.25, 0.5, 0.8)))
    elif name == "SPECULAR":
        return AnalyticScene(name, Sphere((0, 0, 0), 0.5, (0.6, 0.3, 0.2)),
                             lighting=Lighting(specular=0.6, shininess=16.0))
    else:
        raise ValueError(f"unknown scene {name!r}; expected SPHERE, BOX, TORUS, CSG-DIFF, SPECULAR")
    return AnalyticScene(name, root)


# --- scene descriptor (JSON) ----------------------------------------------

def _node_to_dict(node) -> dict:
    if isinstance(node, (Sphere, Box, Torus)):
        d = {"type": type(node).__name__.lower()}
        d.update({k: (list(v) if isinstance(v, tuple) else v) for k, v in node.__dict__.items()})
        return d
    if isinstance(node, (Union, Intersection)):
        return {"type": type(node).__name__.lower(),
                "children": [_node_to_dict(c) for c in node.children]}
    if isinstance(node, Difference):
        return {"type": "difference", "a": _node_to_dict(node.a), "b": _node_to_dict(node.b)}
    raise TypeError(type(node).__name__)


def _node_from_dict(d: dict):
    kind = d["type"]
    prim = {"sphere": Sphere, "box": Box, "torus": Torus}
    if kind in prim:
        kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items() if k != "type"}
        return prim[kind](**kw)
    if kind == "union":
        return Union([_node_from_dict(c) for c in d["children"]])
    if kind == "intersection":
        return Intersection([_node_from_dict(c) for c in d["children"]])
    if kind == "difference":
        return Difference(_node_from_dict(d["a"]), _node_from_dict(d["b"]))
    raise ValueError(f"unknown node type {kind!r}")


def scene_to_dict(scene: AnalyticScene) -> dict:
    return {"name": scene.name, "background": list(scene.background),
            "lighting": {k: (list(v) if isinstance(v, tuple) else v)
                         for k, v in scene.lighting.__dict__.items()},
            "root": _node_to_dict(scene.root)}


def scene_from_dict(d: dict) -> AnalyticScene:
    light = {k: (tuple(v) if isinstance(v, list) else v) for k, v in d["lighting"].items()}
    return AnalyticScene(d["name"], _node_from_dict(d["root"]), tuple(d["background"]),
                         Lighting(**light))


# --- ground-truth rendering ------------------------------------------------

def sphere_trace(scene: AnalyticScene, origins: torch.Tensor, dirs: torch.Tensor,
                 max_steps: int = 256, threshold: float = 1e-4, radius: float = 1.0):
    """March rays to the zero level set.  Returns (t, hit)."""
    b = (origins * dirs).sum(-1)
    c = (origins * origins).sum(-1) - radius * radius
    disc = b * b - c
    root = disc.clamp_min(0).sqrt()
    t = (-b - root).clamp_min(0)
    far = -b + root
    alive = (disc > 0) & (far > 0)
    hit = torch.zeros_like(alive)
    for _ in range(max_steps):
        if not alive.any():
            break
        idx = alive.nonzero()[:, 0]
        d = scene_sdf(scene, origins[idx] + t[idx, None] * dirs[idx])
        done = d.abs() < threshold
        hit[idx[done]] = True
        t[idx[~done]] += d[~done]
        gone = t[idx] > far[idx]
        alive[idx[done | gone]] = False
    return t, hit


def render_ground_truth(scene: AnalyticScene, camera: Camera, gain: float = 1.0) -> dict:
    """Lambertian (+ optional Phong) shading of the traced surface.

    Returns float arrays ``rgb`` (H, W, 3) in [0, 1], ``depth`` (H, W) and
    boolean ``mask`` (H, W).  Misses get the background color exactly.
    """
    H, W = camera.height, camera.width
    d = torch.as_tensor(camera.pixel_directions().reshape(-1, 3))
    o = torch.as_tensor(camera.center).expand_as(d).contiguous()
    t, hit = sphere_trace(scene, o, d)
    bg = torch.as_tensor(scene.background, dtype=torch.float64)
    rgb = bg.expand(d.shape[0], 3).clone()
    if hit.any():
        x = o[hit] + t[hit, None] * d[hit]
        n = scene_normal(scene, x)
        light = torch.as_tensor(scene.lighting.unit_direction())
        ndl = (n @ light).clamp_min(0)
        lit = scene.lighting
        col = scene_albedo(scene, x) * (lit.ambient + lit.diffuse * ndl)[:, None]
        if lit.specular > 0:
            refl = 2 * (n @ light)[:, None] * n - light
            rdv = (refl * -d[hit]).sum(-1).clamp_min(0)
            col = col + lit.specular * (rdv ** lit.shininess)[:, None]
        rgb[hit] = (col * gain).clamp(0, 1)
    depth = torch.where(hit, t, torch.zeros_like(t))
    return {"rgb": rgb.reshape(H, W, 3).numpy(), "depth": depth.reshape(H, W).numpy(),
            "mask": hit.reshape(H, W).numpy()}


# --- camera rigs --------------------------------------------------------------

CAMERA_DISTANCE = 2.5
FILL_RADIUS = 0.8  # a sphere of this radius at the origin spans the image


def make_camera(eye, image_size: int) -> Camera:
    half_angle = math.asin(FILL_RADIUS / np.linalg.norm(eye))
    f = 0.5 * image_size / math.tan(half_angle)
    c = 0.5 * image_size
    return Camera(f, f, c, c, image_size, image_size, look_at(eye), np.asarray(eye, float))


def rig_positions(n: int, rig: str, distance: float = CAMERA_DISTANCE,
                  azimuth_offset: float = 0.0) -> np.ndarray:
    """Camera centers looking at the origin.

    ``orbit``: a circle at 30 degrees elevation.  ``hemisphere``: a
    Fibonacci spiral over elevations from -15 to 75 degrees.
    """
    if rig == "orbit":
        az = azimuth_offset + 2 * np.pi * np.arange(n) / n
        el = np.full(n, np.radians(30.0))
    elif rig == "hemisphere":
        i = np.arange(n) + 0.5
        lo, hi = np.sin(np.radians(-15.0)), np.sin(np.radians(75.0))
        el = np.arcsin(lo + (hi - lo) * i / n)
        az = azimuth_offset + np.pi * (3 - 5 ** 0.5) * np.arange(n)
    else:
        raise ValueError(f"unknown rig {rig!r}")
    return distance * np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], 1)


# --- surface samples --------------------------------------------------------

def project_to_surface(scene: AnalyticScene, x: torch.Tensor, iters: int = 30) -> torch.Tensor:
    """Newton steps x <- x - f(x) grad f / |grad f|^2 onto the zero set."""
    for _ in range(iters):
        f = scene_sdf(scene, x)
        h = 1e-7
        eye = torch.eye(3, dtype=x.dtype) * h
        g = torch.stack([scene_sdf(scene, x + e) - scene_sdf(scene, x - e) for e in eye], -1)
        g = g / (2 * h)
        x = x - (f / (g * g).sum(-1).clamp_min(1e-12))[:, None] * g
    return x


def surface_points(scene: AnalyticScene, n: int, seed: int = 0, resolution: int = 128):
    """Area-weighted samples of the analytic surface, float64 (n, 3)."""
    from .mesh import marching_cubes, sample_surface

    mesh = marching_cubes(lambda p: scene_sdf(scene, p), resolution)
    pts = torch.as_tensor(sample_surface(mesh, int(n * 1.25) + 64, seed))
    pts = project_to_surface(scene, pts)
    ok = scene_sdf(scene, pts).abs() < 1e-9
    pts = pts[ok]
    if pts.shape[0] < n:
        raise RuntimeError("surface projection failed to converge for enough samples")
    return pts[:n].numpy()


# --- dataset on disk ------------------------------------------------------------

@dataclass
class SceneDataset:
    root: Path
    cameras: list
    images: np.ndarray  # (V, H, W, 3) float32 in [0, 1]
    masks: np.ndarray  # (V, H, W) bool
    splits: list
    scene: dict
    gt_points: np.ndarray | None

    def indices(self, split: str) -> list[int]:
        return [i for i, s in enumerate(self.splits) if s == split]


def write_png(path, rgb: np.ndarray) -> None:
    arr = np.round(np.clip(rgb, 0, 1) * 255).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def read_png(path) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.float32) / 255.0


def make_dataset(scene: AnalyticScene | str, out_dir, n_views: int = 16, image_size: int = 64,
                 rig: str = "hemisphere", seed: int = 0, n_test: int = 4,
                 exposure: bool = False, n_points: int = 100_000) -> Path:
    """Render a posed multi-view dataset of an analytic scene.

    Layout: ``cameras.json``, ``images/NNN.png``, ``masks/NNN.png``,
    ``gt_points.bin`` (little-endian float32 xyz triples) and ``scene.json``.
    Test views sit on a 35-degree ring between the training azimuths.
    """
    if isinstance(scene, str):
        scene = canonical_scene(scene)
    if n_views < 2:
        raise ValueError("need at least two views")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(exist_ok=True)
    rng = np.random.default_rng(seed)

    eyes = list(rig_positions(n_views, rig))
    az = np.pi / max(n_views, 1) + 2 * np.pi * np.arange(n_test) / max(n_test, 1)
    el = np.radians(35.0)
    for a in az:
        eyes.append(CAMERA_DISTANCE * np.array([np.cos(el) * np.cos(a), np.cos(el) * np.sin(a),
                                                np.sin(el)]))
    splits = ["train"] * n_views + ["test"] * n_test
    gains = rng.uniform(0.8, 1.25, size=len(eyes)) if exposure else np.ones(len(eyes))

    records = []
    for i, (eye, split) in enumerate(zip(eyes, splits)):
        cam = make_camera(eye, image_size)
        gt = render_ground_truth(scene, cam, float(gains[i]))
        name = f"{i:03d}.png"
        write_png(out / "images" / name, gt["rgb"])
        write_png(out / "masks" / name, np.repeat(gt["mask"][..., None], 3, -1).astype(float))
        records.append(camera_to_record(cam, image=f"images/{name}", mask=f"masks/{name}",
                                        split=split))
    save_cameras(out / "cameras.json", records)

    pts = surface_points(scene, n_points, seed)
    pts.astype("<f4").tofile(out / "gt_points.bin")

    desc = scene_to_dict(scene)
    desc["exposure_gains"] = [float(g) for g in gains] if exposure else None
    desc["rig"], desc["seed"] = rig, seed
    (out / "scene.json").write_text(json.dumps(desc, indent=1) + "\n")
    return out


def load_dataset(root) -> SceneDataset:
    root = Path(root)
    records = load_cameras(root / "cameras.json")
    cams = [camera_from_record(r) for r in records]
    images = np.stack([read_png(root / r["image"])[..., :3] for r in records])
    masks = np.stack([read_png(root / r["mask"])[..., 0] > 0.5 for r in records])
    gt = root / "gt_points.bin"
    pts = np.fromfile(gt, dtype="<f4").reshape(-1, 3).astype(np.float64) if gt.exists() else None
    scene = json.loads((root / "scene.json").read_text())
    return SceneDataset(root, cams, images, masks, [r.get("split", "train") for r in records],
                        scene, pts)
