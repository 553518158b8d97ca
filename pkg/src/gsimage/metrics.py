"""PSNR and MS-SSIM on float images in [0, 1]."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .losses import SSIM_K1, SSIM_K2, gaussian_window

PSNR_CAP_DB = 100.0
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
MS_SSIM_WINDOW = 11


@dataclass
class MetricReport:
    psnr_db: float
    ms_ssim: float
    bpp: float | None = None


def _pixels(img) -> np.ndarray:
    return np.asarray(getattr(img, "pixels", img), dtype=np.float64)


def _check_shapes(x, y):
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")


def psnr(x, y) -> float:
    """PSNR in dB with peak 1.0 after clamping both inputs to [0, 1]; capped at 100 dB."""
    x, y = _pixels(x), _pixels(y)
    _check_shapes(x, y)
    mse = float(np.mean((np.clip(x, 0, 1) - np.clip(y, 0, 1)) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(1.0 / mse))


def _valid_blur(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    # correlate then crop to the 'valid' region
    r = len(win) // 2
    out = img
    for axis in (0, 1):
        if img.shape[axis] >= len(win):
            out = correlate1d(out, win, axis=axis, mode="constant")
            sl = [slice(None)] * out.ndim
            sl[axis] = slice(r, out.shape[axis] - r)
            out = out[tuple(sl)]
    return out


def _ssim_cs(x: np.ndarray, y: np.ndarray, win: np.ndarray, c1: float, c2: float):
    """Per-channel mean SSIM and contrast-structure terms."""
    mx, my = _valid_blur(x, win), _valid_blur(y, win)
    vx = _valid_blur(x * x, win) - mx * mx
    vy = _valid_blur(y * y, win) - my * my
    cxy = _valid_blur(x * y, win) - mx * my
    cs_map = (2 * cxy + c2) / (vx + vy + c2)
    ssim_map = (2 * mx * my + c1) / (mx * mx + my * my + c1) * cs_map
    return ssim_map.mean(axis=(0, 1)), cs_map.mean(axis=(0, 1))


def _avg_pool2(img: np.ndarray) -> np.ndarray:
    # 2x2 mean pooling; odd sides get one zero row/column on each edge (counted in the mean)
    ph, pw = img.shape[0] % 2, img.shape[1] % 2
    if ph or pw:
        img = np.pad(img, ((ph, ph), (pw, pw), (0, 0)))
    h, w = img.shape[0] // 2 * 2, img.shape[1] // 2 * 2
    img = img[:h, :w]
    return 0.25 * (img[0::2, 0::2] + img[1::2, 0::2] + img[0::2, 1::2] + img[1::2, 1::2])


def ms_ssim_levels(height: int, width: int) -> int:
    """Scales whose smallest level still fits the 11-px window, at most 5."""
    levels = 1
    side = min(height, width)
    while levels < len(MS_SSIM_WEIGHTS) and side // 2 ** levels >= MS_SSIM_WINDOW:
        levels += 1
    return levels


def ms_ssim(x, y, data_range: float = 1.0) -> float:
    """Multi-scale SSIM averaged over channels.

    Five scales need min(H, W) >= 176; smaller images use fewer scales with the
    leading weights renormalized to sum to one.
    """
    x, y = _pixels(x), _pixels(y)
    _check_shapes(x, y)
    if np.array_equal(x, y):
        return 1.0
    if x.ndim == 2:
        x, y = x[:, :, None], y[:, :, None]
    levels = ms_ssim_levels(x.shape[0], x.shape[1])
    weights = np.asarray(MS_SSIM_WEIGHTS[:levels])
    if levels < len(MS_SSIM_WEIGHTS):
        weights = weights / weights.sum()
    win = gaussian_window(MS_SSIM_WINDOW)
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    terms = []
    for level in range(levels):
        ssim_c, cs_c = _ssim_cs(x, y, win, c1, c2)
        if level < levels - 1:
            terms.append(np.maximum(cs_c, 0.0))
            x, y = _avg_pool2(x), _avg_pool2(y)
        else:
            terms.append(np.maximum(ssim_c, 0.0))
    stacked = np.stack(terms)  # (levels, channels)
    per_channel = np.prod(stacked ** weights[:, None], axis=0)
    return float(np.clip(per_channel.mean(), 0.0, 1.0))


def evaluate(reference, reconstruction, bpp: float | None = None) -> MetricReport:
    rec = np.clip(_pixels(reconstruction), 0.0, 1.0)
    ref = _pixels(reference)
    return MetricReport(psnr(ref, rec), ms_ssim(ref, rec), bpp)
