"""PSNR, MS-SSIM and bits-per-pixel."""

from __future__ import annotations

import math

import numpy as np
from scipy.ndimage import correlate1d

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
WINDOW = 11
WINDOW_SIGMA = 1.5
K1, K2 = 0.01, 0.03


def _pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"image shapes differ: {x.shape} vs {y.shape}")
    return x, y


def psnr(x, y, peak: float = 1.0) -> float:
    """``10 log10(peak^2 / MSE)``; identical inputs give ``math.inf``."""
    x, y = _pair(x, y)
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size: int = WINDOW, sigma: float = WINDOW_SIGMA) -> np.ndarray:
    coords = np.arange(size, dtype=np.float64) - size // 2
    g = np.exp(-(coords**2) / (2 * sigma**2))
    return g / g.sum()


def _filter(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    """Separable 'valid' filtering over the last two axes."""
    k = len(win)
    out = correlate1d(img, win, axis=-2, mode="constant")[..., k // 2 : img.shape[-2] - k // 2, :]
    return correlate1d(out, win, axis=-1, mode="constant")[..., k // 2 : img.shape[-1] - k // 2]


def _ssim_cs(x: np.ndarray, y: np.ndarray, data_range: float, win: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    c1, c2 = (K1 * data_range) ** 2, (K2 * data_range) ** 2
    mu_x, mu_y = _filter(x, win), _filter(y, win)
    sxx = _filter(x * x, win) - mu_x * mu_x
    syy = _filter(y * y, win) - mu_y * mu_y
    sxy = _filter(x * y, win) - mu_x * mu_y
    cs_map = (2 * sxy + c2) / (sxx + syy + c2)
    ssim_map = (2 * mu_x * mu_y + c1) / (mu_x * mu_x + mu_y * mu_y + c1) * cs_map
    return ssim_map.mean(axis=(-2, -1)), cs_map.mean(axis=(-2, -1))


def _downsample(img: np.ndarray) -> np.ndarray:
    """2x2 average pooling; odd sides are zero-padded by one on both ends (padding counted in the mean)."""
    ph, pw = img.shape[-2] % 2, img.shape[-1] % 2
    if ph or pw:
        img = np.pad(img, [(0, 0)] * (img.ndim - 2) + [(ph, ph), (pw, pw)])
    h, w = img.shape[-2] // 2 * 2, img.shape[-1] // 2 * 2
    img = img[..., :h, :w]
    return img.reshape(img.shape[:-2] + (h // 2, 2, w // 2, 2)).mean(axis=(-3, -1))


def ms_ssim_levels(height: int, width: int) -> int:
    """Number of scales usable at this size: the coarsest scale must still hold one window."""
    side = min(height, width)
    levels = len(MS_SSIM_WEIGHTS)
    while levels > 1 and side < WINDOW * 2 ** (levels - 1):
        levels -= 1
    if side < WINDOW:
        raise ValueError(f"image side {side} is smaller than the {WINDOW}x{WINDOW} window")
    return levels


def ms_ssim(x, y, data_range: float = 1.0, levels: int | None = None) -> float:
    """Multi-scale SSIM over (C, H, W) or (N, C, H, W) images, averaged over images and channels.

    The canonical five scales need a shorter side of at least 176 pixels.
    Smaller images use fewer scales with the leading weights renormalized to
    sum to one; the full five-scale case keeps the published weights as-is
    (they sum to 1.0001). Forcing ``levels=5`` on a small image raises
    ``ValueError``.
    Negative contrast-structure terms are clamped to zero before the
    weighted product.
    """
    x, y = _pair(x, y)
    if x.ndim not in (3, 4):
        raise ValueError(f"expected (C,H,W) or (N,C,H,W), got {x.shape}")
    auto = ms_ssim_levels(*x.shape[-2:])
    if levels is None:
        levels = auto
    elif levels > auto:
        raise ValueError(f"{levels} scales need a shorter side of at least {WINDOW * 2 ** (levels - 1)} pixels, got {min(x.shape[-2:])}")
    weights = np.asarray(MS_SSIM_WEIGHTS[:levels])
    if levels < len(MS_SSIM_WEIGHTS):
        weights = weights / weights.sum()
    win = gaussian_window()
    terms = []
    for i in range(levels):
        ssim_val, cs = _ssim_cs(x, y, data_range, win)
        if i < levels - 1:
            terms.append(np.maximum(cs, 0.0))
            x, y = _downsample(x), _downsample(y)
    terms.append(np.maximum(ssim_val, 0.0))
    stacked = np.stack(terms)
    value = np.prod(stacked ** weights.reshape((-1,) + (1,) * (stacked.ndim - 1)), axis=0)
    return float(np.mean(value))


def bpp(stream, width: int, height: int) -> float:
    """Payload bits per pixel; container header and metadata bytes are excluded.

    ``stream`` is a :class:`~satcodec.bitstream.Bitstream`, a list of them
    (tiles), or a payload byte count.
    """
    if isinstance(stream, int):
        nbytes = stream
    elif isinstance(stream, (list, tuple)):
        nbytes = sum(s.payload_bytes for s in stream)
    else:
        nbytes = stream.payload_bytes
    return 8.0 * nbytes / (width * height)
