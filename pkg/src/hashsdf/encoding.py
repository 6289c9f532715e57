"""Multi-resolution hash-grid encoding over the cube [-1, 1]^3.

Level ``l`` has resolution ``V_l`` cells per axis, so the cell size is
``2 / V_l`` and the lattice has ``V_l + 1`` corners per axis.  Coarse levels
whose lattice fits in the table are indexed densely (x fastest), finer
levels go through the XOR-of-primes spatial hash.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from . import _kernels

PRIMES = (1, 2654435761, 805459861)

# corner offsets in bit order (x = bit 0, y = bit 1, z = bit 2)
_OFFSETS = torch.tensor([[(i >> 0) & 1, (i >> 1) & 1, (i >> 2) & 1] for i in range(8)],
                        dtype=torch.long)


@dataclass(frozen=True)
class EncodingConfig:
    levels: int = 16
    min_res: int = 32
    max_res: int = 2048
    channels: int = 8
    table_size: int = 2 ** 22

    def __post_init__(self):
        if self.levels < 1 or self.channels < 1:
            raise ValueError("levels and channels must be >= 1")
        if self.min_res > self.max_res or self.min_res < 1:
            raise ValueError("need 1 <= min_res <= max_res")
        if self.table_size <= 0 or self.table_size & (self.table_size - 1):
            raise ValueError("table_size must be a power of two")

    @property
    def growth(self) -> float:
        if self.levels == 1:
            return 1.0
        return math.exp((math.log(self.max_res) - math.log(self.min_res)) / (self.levels - 1))

    @property
    def dim(self) -> int:
        return self.levels * self.channels


def level_resolutions(config: EncodingConfig) -> list[int]:
    b = config.growth
    # the epsilon absorbs rounding in b**l so the last level lands on max_res
    return [int(math.floor(config.min_res * b ** l + 1e-6)) for l in range(config.levels)]


def table_sizes(config: EncodingConfig) -> list[int]:
    return [min(config.table_size, (v + 1) ** 3) for v in level_resolutions(config)]


def cell_size(resolution: int) -> float:
    return 2.0 / resolution


def hash_index(corner, level: int, config: EncodingConfig) -> int:
    """Table index of an integer lattice corner at one level."""
    res = level_resolutions(config)[level]
    x, y, z = (int(c) for c in corner)
    if (res + 1) ** 3 <= config.table_size:
        return x + (res + 1) * (y + (res + 1) * z)
    return (x * PRIMES[0] ^ y * PRIMES[1] ^ z * PRIMES[2]) % config.table_size


class HashGrid(nn.Module):
    """Learnable feature tables for every level, stored as one flat parameter."""

    def __init__(self, config: EncodingConfig, seed: int = 0, init_scale: float = 1e-4):
        super().__init__()
        self.config = config
        self.resolutions = level_resolutions(config)
        self.sizes = table_sizes(config)
        offsets = [0]
        for s in self.sizes[:-1]:
            offsets.append(offsets[-1] + s)
        gen = torch.Generator().manual_seed(seed)
        init = (torch.rand(sum(self.sizes), config.channels, generator=gen) * 2 - 1) * init_scale
        self.tables = nn.Parameter(init)
        self.register_buffer("offsets", torch.tensor(offsets, dtype=torch.long), persistent=False)
        self.register_buffer("res", torch.tensor(self.resolutions, dtype=torch.long),
                             persistent=False)
        self.register_buffer("dense", torch.tensor(
            [(v + 1) ** 3 <= config.table_size for v in self.resolutions]), persistent=False)
        self._res_np = np.asarray(self.resolutions, dtype=np.int64)
        self._offsets_np = np.asarray(offsets, dtype=np.int64)
        self._dense_np = np.asarray([(v + 1) ** 3 <= config.table_size
                                     for v in self.resolutions])
        self.clamped = 0  # running count of out-of-cube queries

    @property
    def dim(self) -> int:
        return self.config.dim

    def table(self, level: int) -> torch.Tensor:
        start = int(self.offsets[level])
        return self.tables[start:start + self.sizes[level]]

    def corner_index(self, corners: torch.Tensor, levels: torch.Tensor) -> torch.Tensor:
        """Flat-table row for integer corners (..., A, 8, 3) at levels (A,)."""
        res = self.res[levels].view(-1, 1)
        x, y, z = corners.unbind(-1)
        dense = x + (res + 1) * (y + (res + 1) * z)
        hashed = (x * PRIMES[0]) ^ (y * PRIMES[1]) ^ (z * PRIMES[2])
        hashed = hashed & (self.config.table_size - 1)
        idx = torch.where(self.dense[levels].view(-1, 1), dense, hashed)
        return idx + self.offsets[levels].view(-1, 1)

    def forward(self, x: torch.Tensor, active_levels: int | None = None) -> torch.Tensor:
        return self.encode(x, active_levels)

    def _active(self, active_levels):
        L = self.config.levels
        active = L if active_levels is None else int(active_levels)
        if not 0 <= active <= L:
            raise ValueError(f"active_levels must be in [0, {L}], got {active}")
        return active

    def _count_outside(self, x):
        outside = (x.abs() > 1).any(-1)
        self.clamped += int(outside.sum())
        return outside

    def encode(self, x: torch.Tensor, active_levels: int | None = None,
               return_flags: bool = False):
        """Concatenated per-level features, shape (N, L*c); inactive levels are 0.

        Points outside the cube are clamped onto it and flagged.  Autograd
        flows to the tables only; spatial derivatives come from
        :meth:`encode_grad` or finite differences.
        """
        active = self._active(active_levels)
        flags = self._count_outside(x)
        out = _Encode.apply(x.detach(), self.tables, self, active)
        return (out, flags) if return_flags else out

    def encode_grad(self, x: torch.Tensor, active_levels: int | None = None,
                    return_flags: bool = False):
        """Analytic Jacobian d(encoding)/dx, shape (N, L*c, 3).

        Differentiating the trilinear weights gives per-axis factors of
        +-V_l/2 on the corner features.  Points on a cell face use the cell
        picked by the floor convention (a one-sided derivative); with
        ``return_flags`` those points are reported.  Differentiable w.r.t.
        the tables.
        """
        active = self._active(active_levels)
        self._count_outside(x)
        jac = _Jacobian.apply(x.detach(), self.tables, self, active)
        return (jac, self.on_cell_face(x, active)) if return_flags else jac

    def on_cell_face(self, x: torch.Tensor, active_levels: int | None = None) -> torch.Tensor:
        """True where x lies exactly on a cell face of some active level."""
        active = self._active(active_levels)
        scale = 0.5 * self.res[:active].to(x.dtype)
        xl = (x.detach().clamp(-1.0, 1.0)[:, None, :] + 1.0) * scale[None, :, None]
        return (xl == torch.floor(xl)).any(-1).any(-1)

    # Pure-torch versions of the two lookups, kept as an independent check
    # on the compiled kernels.

    def _cells(self, x: torch.Tensor, active: int):
        x = x.clamp(-1.0, 1.0)
        levels = torch.arange(active, device=x.device)
        scale = 0.5 * self.res[:active].to(x.dtype)
        xl = (x[:, None, :] + 1.0) * scale[None, :, None]  # (N, A, 3)
        base = torch.floor(xl).long()
        base = torch.minimum(base.clamp(min=0), (self.res[:active] - 1).view(1, -1, 1))
        beta = xl - base.to(x.dtype)
        corners = base[:, :, None, :] + _OFFSETS.to(x.device)[None, None]
        return beta, self.corner_index(corners, levels), scale

    def encode_reference(self, x: torch.Tensor, active_levels: int | None = None):
        active = self._active(active_levels)
        L, c = self.config.levels, self.config.channels
        n = x.shape[0]
        out = self.tables.new_zeros(n, L * c)
        if active == 0 or n == 0:
            return out
        beta, idx, _ = self._cells(x.to(self.tables.dtype), active)
        enc = (_trilinear_weights(beta)[..., None] * self.tables[idx]).sum(2)
        return torch.cat([enc.reshape(n, active * c), out[:, active * c:]], dim=1)

    def encode_grad_reference(self, x: torch.Tensor, active_levels: int | None = None):
        active = self._active(active_levels)
        L, c = self.config.levels, self.config.channels
        n = x.shape[0]
        jac = self.tables.new_zeros(n, L * c, 3)
        if active == 0 or n == 0:
            return jac
        beta, idx, scale = self._cells(x.to(self.tables.dtype), active)
        dw = _trilinear_weight_grads(beta) * scale[None, :, None, None]
        g = torch.einsum("nack,nacf->nafk", dw, self.tables[idx]).reshape(n, active * c, 3)
        return torch.cat([g, jac[:, active * c:]], dim=1)

    def _kernel_args(self, active):
        return (self.tables.detach().contiguous().numpy(), self._res_np[:active],
                self._offsets_np[:active], self._dense_np[:active], self.config.table_size - 1)


class _Encode(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, tables, grid, active):
        n, L, c = x.shape[0], grid.config.levels, grid.config.channels
        dtype = tables.detach().numpy().dtype
        out = np.empty((n, L * c), dtype=dtype)
        out[:, active * c:] = 0
        rows, weights = _kernels.empty_buffers(n, active, dtype)
        if active and n:
            tab, res, off, dense, tmask = grid._kernel_args(active)
            xn = np.ascontiguousarray(x.numpy(), dtype=dtype)
            _kernels.encode_forward(xn, tab, res, off, dense, tmask, active, out, rows, weights)
        ctx.save_for_backward(tables)
        ctx.buffers = (rows, weights, active, c)
        return torch.from_numpy(out)

    @staticmethod
    def backward(ctx, grad_out):
        (tables,) = ctx.saved_tensors
        rows, weights, active, c = ctx.buffers
        grad = np.zeros(tuple(tables.shape), dtype=weights.dtype)
        if active:
            g = np.ascontiguousarray(grad_out.detach().numpy()[:, :active * c], dtype=grad.dtype)
            _kernels.encode_backward(g, rows, weights, grad)
        return None, torch.from_numpy(grad), None, None


class _Jacobian(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, tables, grid, active):
        n, L, c = x.shape[0], grid.config.levels, grid.config.channels
        dtype = tables.detach().numpy().dtype
        jac = np.empty((n, L * c, 3), dtype=dtype)
        jac[:, active * c:] = 0
        rows, dweights = _kernels.empty_buffers(n, active, dtype, with_jac=True)
        if active and n:
            tab, res, off, dense, tmask = grid._kernel_args(active)
            xn = np.ascontiguousarray(x.numpy(), dtype=dtype)
            _kernels.jacobian_forward(xn, tab, res, off, dense, tmask, active, jac, rows,
                                      dweights)
        ctx.save_for_backward(tables)
        ctx.buffers = (rows, dweights, active, c)
        return torch.from_numpy(jac)

    @staticmethod
    def backward(ctx, grad_jac):
        (tables,) = ctx.saved_tensors
        rows, dweights, active, c = ctx.buffers
        grad = np.zeros(tuple(tables.shape), dtype=dweights.dtype)
        if active:
            g = np.ascontiguousarray(grad_jac.detach().numpy()[:, :active * c],
                                     dtype=grad.dtype)
            _kernels.jacobian_backward(g, rows, dweights, grad)
        return None, torch.from_numpy(grad), None, None


def _trilinear_weights(beta: torch.Tensor) -> torch.Tensor:
    bits = _OFFSETS.to(beta.device).to(beta.dtype)  # (8, 3)
    f = bits * beta[..., None, :] + (1 - bits) * (1 - beta[..., None, :])  # (..., 8, 3)
    return f.prod(-1)


def _trilinear_weight_grads(beta: torch.Tensor) -> torch.Tensor:
    """d(weight)/d(beta_k) for each of the 8 corners, shape (..., 8, 3)."""
    bits = _OFFSETS.to(beta.device).to(beta.dtype)
    f = bits * beta[..., None, :] + (1 - bits) * (1 - beta[..., None, :])
    sign = 2 * bits - 1
    fx, fy, fz = f.unbind(-1)
    return torch.stack([sign[:, 0] * fy * fz, sign[:, 1] * fx * fz, sign[:, 2] * fx * fy], -1)


def fourier_encode(x: torch.Tensor, n_freq: int, active: int | None = None):
    """Sin/cos frequency encoding and its analytic Jacobian.

    Returns ``(features (N, 6*n_freq), jacobian (N, 6*n_freq, 3))``.  For
    frequency ``l`` the layout is ``sin(2^l pi x_{0..2}), cos(2^l pi x_{0..2})``.
    Frequencies at or above ``active`` are zeroed, which gives the
    coarse-to-fine variant.
    """
    if n_freq < 0:
        raise ValueError("n_freq must be >= 0")
    n = x.shape[0]
    if n_freq == 0:
        return x.new_zeros(n, 0), x.new_zeros(n, 0, 3)
    freqs = (2.0 ** torch.arange(n_freq, dtype=x.dtype)) * math.pi  # (F,)
    arg = x[:, None, :] * freqs[None, :, None]  # (N, F, 3)
    s, co = torch.sin(arg), torch.cos(arg)
    feat = torch.cat([s, co], dim=-1)  # (N, F, 6)
    eye = torch.eye(3, dtype=x.dtype)
    ds = (freqs[None, :, None] * co)[..., None] * eye  # (N, F, 3, 3)
    dc = (-freqs[None, :, None] * s)[..., None] * eye
    jac = torch.cat([ds, dc], dim=2)  # (N, F, 6, 3)
    if active is not None and active < n_freq:
        mask = (torch.arange(n_freq) < active).to(x.dtype)
        feat = feat * mask[None, :, None]
        jac = jac * mask[None, :, None, None]
    return feat.reshape(n, 6 * n_freq), jac.reshape(n, 6 * n_freq, 3)
