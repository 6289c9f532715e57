"""Neural SDF + color networks and their spatial derivative operators."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .encoding import EncodingConfig, HashGrid

SOFTPLUS_BETA = 100.0
# Pre-activations below this are clamped: the output changes by < 1e-13 and
# float32 exp() no longer produces denormals, which are very slow on CPU.
SOFTPLUS_FLOOR = -30.0 / SOFTPLUS_BETA

# +x, -x, +y, -y, +z, -z
_AXIS_STEPS = torch.tensor([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]],
                           dtype=torch.float64)


class FieldError(RuntimeError):
    """Non-finite network output; carries a short diagnostic."""


@dataclass(frozen=True)
class FieldConfig:
    encoding: EncodingConfig = EncodingConfig()
    sdf_hidden: int = 64
    feature_dim: int = 15
    color_hidden: int = 64
    color_layers: int = 4
    n_images: int = 0
    embedding_dim: int = 8
    use_embedding: bool = False
    init_radius: float = 0.5
    s_init: float = 64.0


def fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    z = 1 - 2 * i / n
    r = np.sqrt(1 - z * z)
    phi = np.pi * (1 + 5 ** 0.5) * i
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def sh_encode(d: torch.Tensor) -> torch.Tensor:
    """Real spherical harmonics of unit directions, bands 0..3 (16 values)."""
    x, y, z = d.unbind(-1)
    xx, yy, zz = x * x, y * y, z * z
    return torch.stack([
        torch.full_like(x, 0.28209479177387814),
        -0.48860251190291987 * y,
        0.48860251190291987 * z,
        -0.48860251190291987 * x,
        1.0925484305920792 * x * y,
        -1.0925484305920792 * y * z,
        0.94617469575755997 * zz - 0.31539156525251999,
        -1.0925484305920792 * x * z,
        0.54627421529603959 * (xx - yy),
        0.59004358992664352 * y * (-3.0 * xx + yy),
        2.8906114426405538 * x * y * z,
        0.45704579946446572 * y * (1.0 - 5.0 * zz),
        0.3731763325901154 * z * (5.0 * zz - 3.0),
        0.45704579946446572 * x * (1.0 - 5.0 * zz),
        1.4453057213202769 * z * (xx - yy),
        0.59004358992664352 * x * (-xx + 3.0 * yy),
    ], dim=-1)


def activation(h: torch.Tensor) -> torch.Tensor:
    return F.softplus(h.clamp_min(SOFTPLUS_FLOOR), beta=SOFTPLUS_BETA)


def activation_grad(h: torch.Tensor) -> torch.Tensor:
    """Derivative of :func:`activation`."""
    return torch.sigmoid(SOFTPLUS_BETA * h.clamp_min(SOFTPLUS_FLOOR)) * (h > SOFTPLUS_FLOOR)


class SDFNetwork(nn.Module):
    """One hidden softplus layer on [hash features, position] -> (sdf, features)."""

    def __init__(self, in_features: int, hidden: int, feature_dim: int):
        super().__init__()
        self.in_features = in_features
        self.hidden = nn.Linear(in_features + 3, hidden)
        self.out = nn.Linear(hidden, 1 + feature_dim)

    def forward(self, enc: torch.Tensor, x: torch.Tensor, n_features: int | None = None):
        """(sdf, features); features only for the first ``n_features`` rows if given."""
        h = activation(self.hidden(torch.cat([enc, x], dim=-1)))
        if n_features is None:
            out = self.out(h)
            return out[:, 0], out[:, 1:]
        head = self.out(h[:n_features])
        tail = h[n_features:] @ self.out.weight[0] + self.out.bias[0]
        return torch.cat([head[:, 0], tail]), head[:, 1:]


class ColorNetwork(nn.Module):
    def __init__(self, feature_dim: int, hidden: int, layers: int, embedding_dim: int = 0):
        super().__init__()
        dims = [3 + 3 + 16 + feature_dim + embedding_dim] + [hidden] * layers
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))
        self.out = nn.Linear(hidden, 3)

    def forward(self, inputs: torch.Tensor) -> torch.Tensor:
        h = inputs
        for layer in self.layers:
            h = F.relu(layer(h))
        return torch.sigmoid(self.out(h))


class NeuralField(nn.Module):
    """Hash grid + SDF MLP + color MLP + optional per-image embeddings.

    ``log_s`` is the logistic sharpness used by the renderer.
    """

    def __init__(self, config: FieldConfig = FieldConfig(), seed: int = 0):
        super().__init__()
        self.config = config
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.grid = HashGrid(config.encoding, seed=seed)
            self.sdf_net = SDFNetwork(self.grid.dim, config.sdf_hidden, config.feature_dim)
            emb = config.embedding_dim if config.use_embedding else 0
            self.color_net = ColorNetwork(config.feature_dim, config.color_hidden,
                                          config.color_layers, emb)
        if config.use_embedding:
            self.embeddings = nn.Parameter(torch.zeros(config.n_images, config.embedding_dim))
        else:
            self.embeddings = None
        self.log_s = nn.Parameter(torch.tensor(math.log(config.s_init)))
        self.eval_count = 0
        init_sphere(self, config.init_radius)

    @property
    def levels(self) -> int:
        return self.config.encoding.levels

    def sharpness(self) -> torch.Tensor:
        return self.log_s.exp()

    def sdf(self, x: torch.Tensor, active_levels: int | None = None,
            n_features: int | None = None):
        """Returns ``(sdf (N,), geometric features (N, F))``.

        With ``n_features`` only the first rows get features, which skips the
        unused head work for finite-difference probes.
        """
        self.eval_count += x.shape[0]
        enc = self.grid.encode(x, active_levels)
        f, feat = self.sdf_net(enc, x.to(enc.dtype), n_features)
        if not torch.isfinite(f).all():
            bad = (~torch.isfinite(f)).nonzero()[:, 0]
            raise FieldError(f"non-finite sdf at {bad.numel()} of {x.shape[0]} points, "
                             f"first x={x[bad[0]].tolist()}")
        return f, feat

    def analytical_gradient(self, x: torch.Tensor, active_levels: int | None = None):
        """Exact df/dx chained through the MLP and the hash-grid Jacobian."""
        enc = self.grid.encode(x, active_levels)
        jac = self.grid.encode_grad(x, active_levels)  # (N, D, 3)
        lin = self.sdf_net.hidden
        h = lin(torch.cat([enc, x.to(enc.dtype)], dim=-1))
        v = activation_grad(h) * self.sdf_net.out.weight[0]  # (N, H)
        d = self.grid.dim
        w_enc, w_pos = lin.weight[:, :d], lin.weight[:, d:]
        return v @ w_pos + torch.einsum("nd,ndk->nk", v @ w_enc, jac)

    def embedding(self, image_index, n: int, dtype) -> torch.Tensor | None:
        if self.embeddings is None:
            return None
        if image_index is None:
            return torch.zeros(n, self.config.embedding_dim, dtype=dtype)
        idx = torch.as_tensor(image_index, dtype=torch.long).expand(n)
        valid = (idx >= 0) & (idx < self.embeddings.shape[0])
        emb = self.embeddings[idx.clamp(0, max(self.embeddings.shape[0] - 1, 0))]
        return emb * valid[:, None].to(emb.dtype)

    def color(self, x, normal, view_dir, features, image_index=None) -> torch.Tensor:
        parts = [x, normal, sh_encode(view_dir), features]
        emb = self.embedding(image_index, x.shape[0], features.dtype)
        if emb is not None:
            parts.append(emb)
        return self.color_net(torch.cat([p.to(features.dtype) for p in parts], dim=-1))


def sdf_eval(x: torch.Tensor, field, active_levels: int | None = None):
    return field.sdf(x, active_levels)


@torch.no_grad()
def init_sphere(field: NeuralField, radius: float, n_fit: int = 4096) -> None:
    """Geometric initialization: f(x) ~ |x| - radius before the grid learns anything.

    Hidden units get quasi-uniform unit directions on the position inputs,
    so their mean rectified response is |x|/4; the sdf output row is then a
    least-squares fit of those responses to |x| - radius.
    """
    if not 0 < radius < 1:
        raise ValueError("radius must lie in (0, 1)")
    net = field.sdf_net
    H, d = net.hidden.out_features, field.grid.dim
    gen = torch.Generator().manual_seed(1234)
    w = torch.zeros_like(net.hidden.weight)
    w[:, d:] = torch.from_numpy(fibonacci_sphere(H)).to(w.dtype)
    w[:, :d] = torch.randn(H, d, generator=gen, dtype=w.dtype) * (0.1 / math.sqrt(max(d, 1)))
    net.hidden.weight.copy_(w)
    net.hidden.bias.zero_()

    x = (torch.rand(n_fit, 3, generator=gen, dtype=torch.float64) * 2 - 1)
    h = activation(x @ w[:, d:].double().T)
    A = torch.cat([h, torch.ones(n_fit, 1, dtype=torch.float64)], dim=1)
    target = x.norm(dim=1) - radius
    ridge = 1e-6 * torch.eye(H + 1, dtype=torch.float64)
    coef = torch.linalg.solve(A.T @ A + ridge, A.T @ target)
    net.out.weight[0].copy_(coef[:H])
    net.out.bias[0] = coef[H]
    net.out.weight[1:].copy_(torch.randn(net.out.weight.shape[0] - 1, H, generator=gen) /
                             math.sqrt(H))
    net.out.bias[1:].zero_()


def offset_points(x: torch.Tensor, eps: float) -> torch.Tensor:
    """The six points x +- eps*e_k, stacked as (6*N, 3) in +x,-x,+y,-y,+z,-z order."""
    steps = _AXIS_STEPS.to(x.dtype) * eps
    return (x[None, :, :] + steps[:, None, :]).reshape(-1, 3)


def numerical_gradient(x: torch.Tensor, sdf_fn, eps: float):
    """Central-difference gradient from exactly six extra sdf samples.

    ``sdf_fn`` maps (M, 3) points to (M,) values.  Returns ``(grad (N, 3),
    samples (N, 6))`` so the Laplacian can reuse the samples.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    n = x.shape[0]
    samples = sdf_fn(offset_points(x, eps)).reshape(6, n).T
    grad = (samples[:, 0::2] - samples[:, 1::2]) / (2 * eps)
    return grad, samples


def numerical_laplacian(center: torch.Tensor, samples: torch.Tensor, eps: float) -> torch.Tensor:
    """Discrete Laplacian from the center value and the six axis samples."""
    return (samples.sum(dim=1) - 6 * center) / (eps * eps)


def sdf_with_derivatives(field, x: torch.Tensor, eps: float, active_levels=None,
                         analytic: bool = False):
    """sdf, features, normal and Laplacian at x in one batched field call.

    The centre and the six offsets are evaluated together (7 evaluations per
    point).  With ``analytic`` the normal comes from the analytical gradient
    while the Laplacian still uses the discrete stencil, since the trilinear
    second derivatives vanish.
    """
    n = x.shape[0]
    pts = torch.cat([x, offset_points(x, eps)], dim=0)
    f_all, feat = field.sdf(pts, active_levels, n_features=n)
    f = f_all[:n]
    samples = f_all[n:].reshape(6, n).T
    if analytic:
        grad = field.analytical_gradient(x, active_levels)
    else:
        grad = (samples[:, 0::2] - samples[:, 1::2]) / (2 * eps)
    lap = numerical_laplacian(f, samples, eps)
    return f, feat, grad, lap


def analytical_gradient(x: torch.Tensor, field, active_levels=None) -> torch.Tensor:
    return field.analytical_gradient(x, active_levels)


def color_eval(field, x, normal, view_dir, features, image_index=None) -> torch.Tensor:
    return field.color(x, normal, view_dir, features, image_index)
