"""Closed-form fields with the same interface as :class:`NeuralField`.

They stand in for a trained network in renderer, mesh and derivative tests.
"""
from __future__ import annotations

import math

import torch


class AnalyticField:
    """Wraps ``sdf_fn`` (points (N, 3) -> (N,)) with a constant color.

    ``feature_dim`` zero features are returned so it plugs into the renderer.
    """

    def __init__(self, sdf_fn, color=(0.5, 0.5, 0.5), s: float = 64.0, feature_dim: int = 1):
        self.sdf_fn = sdf_fn
        self.rgb = torch.as_tensor(color, dtype=torch.float64)
        self.log_s = torch.tensor(math.log(s), dtype=torch.float64)
        self.feature_dim = feature_dim
        self.eval_count = 0

    def sharpness(self) -> torch.Tensor:
        return self.log_s.exp()

    def sdf(self, x, active_levels=None, n_features=None):
        self.eval_count += x.shape[0]
        f = self.sdf_fn(x)
        n = x.shape[0] if n_features is None else n_features
        return f, x.new_zeros(n, self.feature_dim)

    def analytical_gradient(self, x, active_levels=None):
        with torch.enable_grad():
            xg = x.detach().requires_grad_(True)
            (g,) = torch.autograd.grad(self.sdf_fn(xg).sum(), xg)
        return g

    def color(self, x, normal, view_dir, features, image_index=None):
        return self.rgb.to(x.dtype).expand(x.shape[0], 3)


def sphere_sdf(radius: float = 0.5, center=(0.0, 0.0, 0.0)):
    c = torch.as_tensor(center, dtype=torch.float64)

    def fn(x):
        return (x - c.to(x.dtype)).norm(dim=-1) - radius
    return fn


def plane_sdf(normal=(0.0, 0.0, 1.0), offset: float = 0.0):
    n = torch.nn.functional.normalize(torch.as_tensor(normal, dtype=torch.float64), dim=0)

    def fn(x):
        return x @ n.to(x.dtype) - offset
    return fn


def constant_sdf(value: float = 1.0):
    def fn(x):
        return torch.full((x.shape[0],), value, dtype=x.dtype)
    return fn


def sphere_field(radius: float = 0.5, **kw) -> AnalyticField:
    return AnalyticField(sphere_sdf(radius), **kw)
