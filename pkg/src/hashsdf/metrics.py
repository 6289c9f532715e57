"""Surface and image metrics: symmetric Chamfer, F1 and PSNR."""
from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .geometry import InvalidInput

PSNR_IDENTICAL = float("inf")


def _points(p, name: str) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
    if len(p) == 0:
        raise InvalidInput(f"{name} point set is empty")
    return p


def nearest_distances(src, dst) -> np.ndarray:
    """Distance from every point in ``src`` to its nearest neighbour in ``dst``.

    The tree only selects the neighbour; the distance itself is recomputed
    with plain numpy so results match a brute-force search bit for bit.
    """
    src, dst = _points(src, "source"), _points(dst, "target")
    _, idx = cKDTree(dst).query(src, k=1)
    return np.sqrt(((src - dst[idx]) ** 2).sum(axis=1))


def nearest_distances_brute(src, dst, block: int = 1024) -> np.ndarray:
    src, dst = _points(src, "source"), _points(dst, "target")
    out = np.empty(len(src))
    for s in range(0, len(src), block):
        d2 = ((src[s:s + block, None, :] - dst[None, :, :]) ** 2).sum(axis=2)
        out[s:s + block] = np.sqrt(d2.min(axis=1))
    return out


def chamfer(a, b, brute: bool = False) -> float:
    """0.5 * (mean NN distance a->b + mean NN distance b->a), scene units."""
    nn = nearest_distances_brute if brute else nearest_distances
    return 0.5 * (float(nn(a, b).mean()) + float(nn(b, a).mean()))


def f1_score(pred, gt, tau: float):
    """(precision, recall, f1) at distance threshold ``tau``."""
    if not tau > 0:
        raise InvalidInput("tau must be positive")
    precision = float((nearest_distances(pred, gt) <= tau).mean())
    recall = float((nearest_distances(gt, pred) <= tau).mean())
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return precision, recall, f1


def psnr(img_a, img_b, mask=None) -> float:
    """10 log10(1 / MSE) over masked pixels; +inf for identical inputs."""
    a, b = np.asarray(img_a, dtype=np.float64), np.asarray(img_b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidInput(f"shape mismatch {a.shape} vs {b.shape}")
    diff2 = (a - b) ** 2
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        if m.shape != a.shape[:m.ndim]:
            raise InvalidInput(f"mask shape {m.shape} does not match image {a.shape}")
        diff2 = diff2[m]
        if diff2.size == 0:
            raise InvalidInput("mask selects no pixels")
    mse = float(diff2.mean())
    if mse == 0:
        return PSNR_IDENTICAL
    return 10.0 * np.log10(1.0 / mse)
