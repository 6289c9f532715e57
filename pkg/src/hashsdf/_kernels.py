"""Compiled hash-grid lookups (forward, Jacobian, and their table adjoints).

All loops are sequential so accumulation order, and hence every gradient,
is reproducible bit for bit.
"""
import math

import numpy as np
from numba import njit

P1 = 2654435761
P2 = 805459861


@njit(cache=True, inline="always")
def _cell(px, py, pz, V, dense, off, tmask):
    """Fractional coordinates and the 8 corner rows of the cell holding p.

    Corner k has offset bits (k & 1, k >> 1 & 1, k >> 2 & 1) on (x, y, z).
    """
    fx = (px + 1.0) * 0.5 * V
    fy = (py + 1.0) * 0.5 * V
    fz = (pz + 1.0) * 0.5 * V
    ix = min(max(int(math.floor(fx)), 0), V - 1)
    iy = min(max(int(math.floor(fy)), 0), V - 1)
    iz = min(max(int(math.floor(fz)), 0), V - 1)
    if dense:
        s = V + 1
        x0 = off + ix
        x1 = x0 + 1
        y0 = iy * s
        y1 = y0 + s
        z0 = iz * s * s
        z1 = z0 + s * s
        rows = (x0 + y0 + z0, x1 + y0 + z0, x0 + y1 + z0, x1 + y1 + z0,
                x0 + y0 + z1, x1 + y0 + z1, x0 + y1 + z1, x1 + y1 + z1)
    else:
        x0 = ix
        x1 = ix + 1
        y0 = iy * P1
        y1 = (iy + 1) * P1
        z0 = iz * P2
        z1 = (iz + 1) * P2
        rows = (off + ((x0 ^ y0 ^ z0) & tmask), off + ((x1 ^ y0 ^ z0) & tmask),
                off + ((x0 ^ y1 ^ z0) & tmask), off + ((x1 ^ y1 ^ z0) & tmask),
                off + ((x0 ^ y0 ^ z1) & tmask), off + ((x1 ^ y0 ^ z1) & tmask),
                off + ((x0 ^ y1 ^ z1) & tmask), off + ((x1 ^ y1 ^ z1) & tmask))
    return fx - ix, fy - iy, fz - iz, rows


@njit(cache=True)
def encode_forward(x, tables, res, offsets, dense, tmask, active, out, rows, weights):
    """Writes levels [0, active) of ``out``; the caller zeroes the rest."""
    N = x.shape[0]
    C = tables.shape[1]
    for n in range(N):
        px = min(max(x[n, 0], -1.0), 1.0)
        py = min(max(x[n, 1], -1.0), 1.0)
        pz = min(max(x[n, 2], -1.0), 1.0)
        for a in range(active):
            bx, by, bz, r = _cell(px, py, pz, res[a], dense[a], offsets[a], tmask)
            ax = 1.0 - bx
            ay = 1.0 - by
            az = 1.0 - bz
            w = (ax * ay * az, bx * ay * az, ax * by * az, bx * by * az,
                 ax * ay * bz, bx * ay * bz, ax * by * bz, bx * by * bz)
            for k in range(8):
                rows[n, a, k] = r[k]
                weights[n, a, k] = w[k]
            for f in range(C):
                acc = w[0] * tables[r[0], f]
                for k in range(1, 8):
                    acc += w[k] * tables[r[k], f]
                out[n, a * C + f] = acc


@njit(cache=True)
def encode_backward(grad_out, rows, weights, grad_tables):
    N, A, _ = rows.shape
    C = grad_tables.shape[1]
    for n in range(N):
        for a in range(A):
            for k in range(8):
                r = rows[n, a, k]
                w = weights[n, a, k]
                for f in range(C):
                    grad_tables[r, f] += w * grad_out[n, a * C + f]


@njit(cache=True)
def jacobian_forward(x, tables, res, offsets, dense, tmask, active, jac, rows, dweights):
    """Writes levels [0, active) of ``jac``; the caller zeroes the rest."""
    N = x.shape[0]
    C = tables.shape[1]
    for n in range(N):
        px = min(max(x[n, 0], -1.0), 1.0)
        py = min(max(x[n, 1], -1.0), 1.0)
        pz = min(max(x[n, 2], -1.0), 1.0)
        for a in range(active):
            s = 0.5 * res[a]
            bx, by, bz, r = _cell(px, py, pz, res[a], dense[a], offsets[a], tmask)
            for k in range(8):
                ox, oy, oz = k & 1, (k >> 1) & 1, (k >> 2) & 1
                wx = bx if ox else 1.0 - bx
                wy = by if oy else 1.0 - by
                wz = bz if oz else 1.0 - bz
                rows[n, a, k] = r[k]
                dweights[n, a, k, 0] = (1.0 if ox else -1.0) * wy * wz * s
                dweights[n, a, k, 1] = (1.0 if oy else -1.0) * wx * wz * s
                dweights[n, a, k, 2] = (1.0 if oz else -1.0) * wx * wy * s
            for f in range(C):
                j = a * C + f
                g0 = 0.0
                g1 = 0.0
                g2 = 0.0
                for k in range(8):
                    t = tables[r[k], f]
                    g0 += dweights[n, a, k, 0] * t
                    g1 += dweights[n, a, k, 1] * t
                    g2 += dweights[n, a, k, 2] * t
                jac[n, j, 0] = g0
                jac[n, j, 1] = g1
                jac[n, j, 2] = g2


@njit(cache=True)
def jacobian_backward(grad_jac, rows, dweights, grad_tables):
    N, A, _ = rows.shape
    C = grad_tables.shape[1]
    for n in range(N):
        for a in range(A):
            for k in range(8):
                r = rows[n, a, k]
                d0 = dweights[n, a, k, 0]
                d1 = dweights[n, a, k, 1]
                d2 = dweights[n, a, k, 2]
                for f in range(C):
                    j = a * C + f
                    grad_tables[r, f] += (d0 * grad_jac[n, j, 0] + d1 * grad_jac[n, j, 1]
                                          + d2 * grad_jac[n, j, 2])


def empty_buffers(n, active, dtype, with_jac=False):
    rows = np.empty((n, active, 8), dtype=np.int64)
    if with_jac:
        return rows, np.empty((n, active, 8, 3), dtype=dtype)
    return rows, np.empty((n, active, 8), dtype=dtype)
