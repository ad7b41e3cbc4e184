"""SSIM and masked SSIM on (h, w, c) images."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidArgumentError


@dataclass(frozen=True)
class SsimConfig:
    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 2.0  # 2 for [-1, 1] images, 255 for 8-bit

    @property
    def c1(self) -> float:
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.dynamic_range) ** 2


def gaussian_window(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def _gray(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x.mean(axis=2) if x.ndim == 3 else x


def ssim_map(x, y, cfg: SsimConfig = SsimConfig()) -> np.ndarray:
    """Local SSIM over every fully contained window.

    Images smaller than the window use the largest odd window that fits.
    """
    gx, gy = _gray(x), _gray(y)
    if gx.shape != gy.shape:
        raise InvalidArgumentError(f"shape mismatch: {np.shape(x)} vs {np.shape(y)}")
    size = min(cfg.window, *gx.shape)
    size -= (size + 1) % 2
    w = gaussian_window(size, cfg.sigma)

    def filt(a):
        return np.einsum("ijkl,kl->ij", sliding_window_view(a, (size, size)), w)

    mx, my = filt(gx), filt(gy)
    sxx = filt(gx * gx) - mx * mx
    syy = filt(gy * gy) - my * my
    sxy = filt(gx * gy) - mx * my
    c1, c2 = cfg.c1, cfg.c2
    return ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))


def ssim(x, y, cfg: SsimConfig = SsimConfig()) -> float:
    return float(ssim_map(x, y, cfg).mean())


def mask_ssim(x, y, mask, cfg: SsimConfig = SsimConfig()) -> float:
    """SSIM after zeroing the background of both images with ``mask`` (h, w)."""
    mask = np.asarray(getattr(mask, "values", mask))
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if mask.shape != x.shape[:2] or x.shape != y.shape:
        raise InvalidArgumentError(f"mask {mask.shape} must match images {x.shape[:2]}, images {x.shape}/{y.shape}")
    m = (mask != 0).astype(np.float64)
    if x.ndim == 3:
        m = m[..., None]
    return ssim(x * m, y * m, cfg)
