"""SDF volume rendering: ray sampling, opacity from SDF pairs, compositing."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .field import sdf_with_derivatives
from .geometry import Camera, generate_ray

ALPHA_MAX = 1.0 - 1e-6


@dataclass(frozen=True)
class RenderConfig:
    n_uniform: int = 64
    n_importance: int = 16
    rounds: int = 4
    background: tuple = (1.0, 1.0, 1.0)
    radius: float = 1.0
    stratified: bool = True
    chunk: int = 1024


@dataclass
class RaySamples:
    t: torch.Tensor  # (R, N) strictly increasing
    x: torch.Tensor  # (R, N, 3)

    @property
    def deltas(self) -> torch.Tensor:
        return self.t[:, 1:] - self.t[:, :-1]


@dataclass
class RenderOutput:
    rgb: torch.Tensor  # (R, 3)
    weights: torch.Tensor  # (R, N-1)
    transmittance: torch.Tensor  # (R, N), T_1..T_{N}, last entry is residual
    opacity: torch.Tensor  # (R,)
    depth: torch.Tensor  # (R,)
    normal: torch.Tensor  # (R, 3)
    hit: torch.Tensor  # (R,) bool, ray intersects the bounding sphere
    gradients: torch.Tensor | None = None  # (M, 3) at every sample of hit rays
    laplacians: torch.Tensor | None = None  # (M,)


def sdf_to_alpha(f_i, f_next, s):
    """Segment opacity max((Phi(f_i) - Phi(f_next)) / Phi(f_i), 0) with logistic Phi.

    Evaluated as 1 - exp(logsigmoid(s f_next) - logsigmoid(s f_i)) so a
    vanishing Phi(f_i) never divides by zero; capped at 1 - 1e-6.
    """
    f_i, f_next = torch.as_tensor(f_i), torch.as_tensor(f_next)
    s = torch.as_tensor(s, dtype=f_i.dtype)
    log_ratio = F.logsigmoid(s * f_next) - F.logsigmoid(s * f_i)
    alpha = -torch.expm1(log_ratio)
    return alpha.clamp(0.0, ALPHA_MAX)


def composite(alphas: torch.Tensor, colors: torch.Tensor, background) -> dict:
    """Front-to-back compositing of (R, K) opacities with (R, K, 3) colors."""
    ones = torch.ones_like(alphas[:, :1])
    trans = torch.cumprod(torch.cat([ones, 1.0 - alphas], dim=1), dim=1)  # (R, K+1)
    weights = trans[:, :-1] * alphas
    bg = torch.as_tensor(background, dtype=colors.dtype)
    rgb = (weights[..., None] * colors).sum(1) + trans[:, -1:] * bg
    return {"rgb": rgb, "weights": weights, "transmittance": trans}


def sphere_bounds(origins: torch.Tensor, dirs: torch.Tensor, radius: float):
    """Batched ray/sphere entry and exit, with a hit mask."""
    b = (origins * dirs).sum(-1)
    c = (origins * origins).sum(-1) - radius * radius
    disc = b * b - c
    root = disc.clamp_min(0).sqrt()
    far = -b + root
    near = (-b - root).clamp_min(0)
    hit = (disc > 0) & (far > 0) & (far - near > 1e-6)
    return near, far, hit


def _stratified(near, far, n, gen, stratified):
    R = near.shape[0]
    i = torch.arange(n, dtype=near.dtype)
    if stratified:
        u = torch.rand(R, n, generator=gen, dtype=near.dtype)
    else:
        u = torch.full((R, n), 0.5, dtype=near.dtype)
    return near[:, None] + (far - near)[:, None] * (i[None] + u) / n


def _sample_pdf(t, weights, n, gen, stratified):
    """Draw n distances from the piecewise-constant density over segments of t."""
    R = t.shape[0]
    w = weights + 1e-5
    pdf = w / w.sum(-1, keepdim=True)
    cdf = torch.cat([torch.zeros_like(pdf[:, :1]), torch.cumsum(pdf, -1)], -1)
    cdf[:, -1] = 1.0
    if stratified:
        u = (torch.arange(n, dtype=t.dtype) + torch.rand(R, n, generator=gen, dtype=t.dtype)) / n
    else:
        u = ((torch.arange(n, dtype=t.dtype) + 0.5) / n).expand(R, n).contiguous()
    idx = torch.searchsorted(cdf, u, right=True).clamp(1, cdf.shape[1] - 1)
    lo, hi = idx - 1, idx
    c_lo, c_hi = cdf.gather(1, lo), cdf.gather(1, hi)
    t_lo, t_hi = t.gather(1, lo), t.gather(1, hi)
    frac = ((u - c_lo) / (c_hi - c_lo).clamp_min(1e-12)).clamp(0, 1)
    return t_lo + frac * (t_hi - t_lo)


@torch.no_grad()
def sample_rays(origins, dirs, near, far, sdf_fn, cfg: RenderConfig, s: float, gen=None):
    """Stratified samples plus ``cfg.rounds`` rounds of importance resampling.

    ``sdf_fn`` maps (M, 3) points to (M,) sdf values; round ``r`` weights the
    segments with sharpness ``s * 2**r``.
    """
    if cfg.n_uniform < 2:
        raise ValueError("n_uniform must be >= 2")
    t = _stratified(near, far, cfg.n_uniform, gen, cfg.stratified)
    if cfg.n_importance == 0 or cfg.rounds == 0:
        return RaySamples(t, origins[:, None] + t[..., None] * dirs[:, None])
    f = sdf_fn((origins[:, None] + t[..., None] * dirs[:, None]).reshape(-1, 3)).reshape(t.shape)
    for r in range(cfg.rounds):
        alpha = sdf_to_alpha(f[:, :-1], f[:, 1:], s * 2 ** r)
        w = composite(alpha, torch.zeros(*alpha.shape, 3, dtype=t.dtype), (0, 0, 0))["weights"]
        t_new = _sample_pdf(t, w, cfg.n_importance, gen, cfg.stratified)
        x_new = origins[:, None] + t_new[..., None] * dirs[:, None]
        f_new = sdf_fn(x_new.reshape(-1, 3)).reshape(t_new.shape)
        t, order = torch.sort(torch.cat([t, t_new], -1), -1)
        f = torch.cat([f, f_new], -1).gather(1, order)
    # importance draws can coincide with existing samples; keep t strictly increasing
    t = _strictly_increasing(t)
    return RaySamples(t, origins[:, None] + t[..., None] * dirs[:, None])


def _strictly_increasing(t, min_gap=1e-7):
    d = (t[:, 1:] - t[:, :-1]).clamp_min(min_gap)
    return torch.cat([t[:, :1], t[:, :1] + torch.cumsum(d, -1)], -1)


def render_rays(field, origins, dirs, *, cfg: RenderConfig = RenderConfig(), eps: float,
                active_levels=None, analytic: bool = False, gen=None, image_index=None,
                s=None) -> RenderOutput:
    """Render a batch of rays against a field exposing ``sdf`` and ``color``.

    The normals fed to the color network are the same gradients returned for
    the eikonal and curvature losses.
    """
    R = origins.shape[0]
    dtype = origins.dtype
    if s is None:
        s = field.sharpness()
    s_val = float(torch.as_tensor(s).detach())
    near, far, hit = sphere_bounds(origins, dirs, cfg.radius)
    bg = torch.as_tensor(cfg.background, dtype=dtype)
    rgb = bg.expand(R, 3).clone()
    out = RenderOutput(rgb=rgb, weights=torch.zeros(R, 0, dtype=dtype),
                       transmittance=torch.ones(R, 1, dtype=dtype),
                       opacity=torch.zeros(R, dtype=dtype), depth=torch.zeros(R, dtype=dtype),
                       normal=torch.zeros(R, 3, dtype=dtype), hit=hit)
    if not hit.any():
        return out
    hi = hit.nonzero()[:, 0]
    o, d = origins[hi], dirs[hi]

    def sdf_only(p):
        return field.sdf(p, active_levels, n_features=0)[0].to(dtype)

    samples = sample_rays(o, d, near[hi], far[hi], sdf_only, cfg, s_val, gen)
    t, x = samples.t, samples.x
    Rh, N = t.shape
    f, feat, grad, lap = sdf_with_derivatives(field, x.reshape(-1, 3), eps, active_levels,
                                              analytic=analytic)
    f = f.reshape(Rh, N).to(dtype)
    alpha = sdf_to_alpha(f[:, :-1], f[:, 1:], s)
    k = N - 1
    xs = x[:, :-1].reshape(-1, 3)
    g = grad.reshape(Rh, N, 3)[:, :-1].reshape(-1, 3)
    n_unit = F.normalize(g, dim=-1, eps=1e-8)
    view = d[:, None].expand(Rh, k, 3).reshape(-1, 3)
    img = None
    if image_index is not None:
        img = torch.as_tensor(image_index, dtype=torch.long)
        img = img[hi] if img.dim() > 0 else img.expand(Rh)
        img = img[:, None].expand(Rh, k).reshape(-1)
    feats = feat.reshape(Rh, N, -1)[:, :-1].reshape(Rh * k, -1)
    colors = field.color(xs, n_unit, view, feats, img).reshape(Rh, k, 3).to(dtype)
    comp = composite(alpha, colors, bg)
    w = comp["weights"]
    acc = w.sum(1)
    t_mid = 0.5 * (t[:, 1:] + t[:, :-1])
    depth = (w * t_mid).sum(1) / acc.clamp_min(1e-8)
    normal = (w[..., None] * n_unit.reshape(Rh, k, 3)).sum(1)

    out.rgb = rgb.index_copy(0, hi, comp["rgb"])
    out.weights = torch.zeros(R, k, dtype=dtype).index_copy(0, hi, w)
    out.transmittance = torch.ones(R, k + 1, dtype=dtype).index_copy(0, hi, comp["transmittance"])
    out.opacity = out.opacity.index_copy(0, hi, acc)
    out.depth = out.depth.index_copy(0, hi, depth)
    out.normal = out.normal.index_copy(0, hi, normal)
    out.gradients = grad.to(dtype)
    out.laplacians = lap.to(dtype)
    return out


def render_pixel(camera: Camera, pixel, field, *, cfg: RenderConfig = RenderConfig(),
                 eps: float, active_levels=None, analytic=False, gen=None, image_index=None,
                 s=None, dtype=torch.float32) -> RenderOutput:
    ray = generate_ray(camera, pixel)
    o = torch.as_tensor(ray.origin, dtype=dtype)[None]
    d = torch.as_tensor(ray.direction, dtype=dtype)[None]
    return render_rays(field, o, d, cfg=cfg, eps=eps, active_levels=active_levels,
                       analytic=analytic, gen=gen, image_index=image_index, s=s)


def camera_rays(camera: Camera, dtype=torch.float32):
    """Origins and unit directions for every pixel, flattened row-major (H*W, 3)."""
    d = camera.pixel_directions().reshape(-1, 3)
    o = np.broadcast_to(camera.center, d.shape)
    return torch.as_tensor(np.ascontiguousarray(o), dtype=dtype), torch.as_tensor(d, dtype=dtype)


def render_image(camera: Camera, field, *, cfg: RenderConfig, eps: float, active_levels=None,
                 analytic: bool = False, image_index=None, dtype=torch.float32) -> dict:
    """Deterministic full-image render (no stratification jitter); numpy outputs."""
    cfg = RenderConfig(**{**cfg.__dict__, "stratified": False})
    o, d = camera_rays(camera, dtype)
    rgb, depth, normal, acc = [], [], [], []
    with torch.no_grad():
        for i in range(0, o.shape[0], cfg.chunk):
            out = render_rays(field, o[i:i + cfg.chunk], d[i:i + cfg.chunk], cfg=cfg, eps=eps,
                              active_levels=active_levels, analytic=analytic,
                              image_index=image_index)
            rgb.append(out.rgb)
            depth.append(out.depth)
            normal.append(out.normal)
            acc.append(out.opacity)
    H, W = camera.height, camera.width
    return {
        "rgb": torch.cat(rgb).reshape(H, W, 3).clamp(0, 1).numpy(),
        "depth": torch.cat(depth).reshape(H, W).numpy(),
        "normal": torch.cat(normal).reshape(H, W, 3).numpy(),
        "opacity": torch.cat(acc).reshape(H, W).numpy(),
    }
