"""Pinhole cameras, rays and scene normalization.

Conventions: cameras follow the OpenCV frame (x right, y down, z forward),
poses are camera-to-world, and pixel (u, v) samples the cell center
(u + 0.5, v + 0.5).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ROI_RADIUS = 0.95


class InvalidInput(ValueError):
    """Raised when an operation receives arguments outside its contract."""


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidInput(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidInput("principal point outside the image")
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6) or np.linalg.det(R) < 0:
            raise InvalidInput("rotation must be orthonormal with determinant +1")

    @property
    def center(self) -> np.ndarray:
        return self.translation

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def pose_3x4(self) -> np.ndarray:
        return np.concatenate([self.rotation, self.translation[:, None]], axis=1)

    def with_pose(self, rotation, translation) -> "Camera":
        return Camera(self.fx, self.fy, self.cx, self.cy, self.width, self.height,
                      rotation, translation)

    def pixel_directions(self) -> np.ndarray:
        """Unit world-space directions for every pixel, shape (H, W, 3)."""
        v, u = np.meshgrid(np.arange(self.height), np.arange(self.width), indexing="ij")
        d = np.stack([(u + 0.5 - self.cx) / self.fx,
                      (v + 0.5 - self.cy) / self.fy,
                      np.ones_like(u, dtype=np.float64)], axis=-1)
        d = d @ self.rotation.T
        return d / np.linalg.norm(d, axis=-1, keepdims=True)


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray


@dataclass(frozen=True)
class SceneTransform:
    scale: float
    translation: np.ndarray

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * np.asarray(points, dtype=np.float64) + self.translation

    def apply_camera(self, cam: Camera) -> Camera:
        return cam.with_pose(cam.rotation, self.apply(cam.center))


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world rotation whose +z axis points from `eye` to `target`."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    up = np.asarray(up, dtype=np.float64)
    if abs(forward @ up) > 0.999:
        up = np.array([0.0, 1.0, 0.0])
    right = np.cross(forward, up)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    return np.stack([right, down, forward], axis=1)


def normalize_scene(cameras: list[Camera], roi_min, roi_max):
    """Similarity transform sending the ROI's bounding sphere to radius 0.95.

    Returns ``(transform, transformed_cameras)``.
    """
    lo = np.asarray(roi_min, dtype=np.float64)
    hi = np.asarray(roi_max, dtype=np.float64)
    extent = hi - lo
    if np.any(extent <= 0):
        raise InvalidInput(f"degenerate region of interest, extent {extent}")
    center = 0.5 * (lo + hi)
    radius = 0.5 * np.linalg.norm(extent)
    scale = ROI_RADIUS / radius
    xf = SceneTransform(float(scale), -scale * center)
    return xf, [xf.apply_camera(c) for c in cameras]


def generate_ray(camera: Camera, pixel) -> Ray:
    u, v = float(pixel[0]), float(pixel[1])
    if not (0 <= u < camera.width and 0 <= v < camera.height):
        raise InvalidInput(f"pixel ({u}, {v}) outside {camera.width}x{camera.height} image")
    d_cam = np.array([(u + 0.5 - camera.cx) / camera.fx, (v + 0.5 - camera.cy) / camera.fy, 1.0])
    d = camera.rotation @ d_cam
    return Ray(camera.center.copy(), d / np.linalg.norm(d))


def ray_sphere_bounds(ray: Ray, radius: float = 1.0):
    """Entry/exit distances of the ray through a sphere at the origin, or None."""
    o, d = ray.origin, ray.direction
    b = float(o @ d)
    c = float(o @ o) - radius * radius
    disc = b * b - c
    if disc < 0:
        return None
    root = np.sqrt(disc)
    t_far = -b + root
    if t_far < 0:
        return None
    return max(-b - root, 0.0), t_far


# --- dataset camera files -------------------------------------------------
#
# cameras.json holds {"version": 1, "cameras": [record, ...]} where each
# record is {"image": "images/000.png", "split": "train"|"test",
# "fx", "fy", "cx", "cy", "width", "height",
# "pose": 12 floats, camera-to-world 3x4 row-major}.

CAMERA_FILE_VERSION = 1


def camera_to_record(cam: Camera, **extra) -> dict:
    rec = dict(extra)
    rec.update(fx=cam.fx, fy=cam.fy, cx=cam.cx, cy=cam.cy, width=cam.width,
               height=cam.height, pose=[float(x) for x in cam.pose_3x4().ravel()])
    return rec


def camera_from_record(rec: dict) -> Camera:
    pose = np.asarray(rec["pose"], dtype=np.float64).reshape(3, 4)
    return Camera(float(rec["fx"]), float(rec["fy"]), float(rec["cx"]), float(rec["cy"]),
                  int(rec["width"]), int(rec["height"]), pose[:, :3], pose[:, 3])


def save_cameras(path, records: list[dict]) -> None:
    Path(path).write_text(json.dumps({"version": CAMERA_FILE_VERSION, "cameras": records},
                                     indent=1) + "\n")


def load_cameras(path) -> list[dict]:
    data = json.loads(Path(path).read_text())
    if data.get("version") != CAMERA_FILE_VERSION:
        raise InvalidInput(f"unsupported camera file version {data.get('version')}")
    return data["cameras"]
