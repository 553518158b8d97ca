"""Reconstruction losses with exact gradients w.r.t. the rendered image."""
from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

LOSS_KINDS = ("l2", "l1", "ssim", "l1+ssim", "l2+ssim")
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
# weight of the pixel term in combined losses; (1 - w) goes to 1 - SSIM
COMBINED_PIXEL_WEIGHT = 0.8


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - size // 2
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _blur(img: np.ndarray, window: np.ndarray) -> np.ndarray:
    # zero padding keeps the operator self-adjoint for a symmetric window
    out = correlate1d(img, window, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, window, axis=1, mode="constant", cval=0.0)


def ssim_and_grad(x: np.ndarray, y: np.ndarray, data_range: float = 1.0):
    """Mean SSIM of ``x`` against ``y`` (zero-padded 'same' windows) and d(mean SSIM)/dx."""
    win = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mx = _blur(x, win)
    my = _blur(y, win)
    exx = _blur(x * x, win)
    eyy = _blur(y * y, win)
    exy = _blur(x * y, win)
    vx = exx - mx * mx
    vy = eyy - my * my
    cxy = exy - mx * my
    a1 = 2 * mx * my + c1
    a2 = 2 * cxy + c2
    b1 = mx * mx + my * my + c1
    b2 = vx + vy + c2
    s = (a1 * a2) / (b1 * b2)
    count = s.size
    ds_dmx = s * (2 * my / a1 - 2 * my / a2 - 2 * mx / b1 + 2 * mx / b2)
    ds_dexx = -s / b2
    ds_dexy = 2 * s / a2
    grad = _blur(ds_dmx, win) + 2 * x * _blur(ds_dexx, win) + y * _blur(ds_dexy, win)
    return float(s.mean()), grad / count


def loss_and_grad(rendered, target, kind: str = "l2"):
    """Scalar loss and its gradient w.r.t. every rendered value."""
    x = np.asarray(getattr(rendered, "pixels", rendered), dtype=np.float64)
    y = np.asarray(getattr(target, "pixels", target), dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: rendered {x.shape} vs target {y.shape}")
    kind = kind.lower()
    if kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss {kind!r}; expected one of {LOSS_KINDS}")
    n = x.size
    diff = x - y
    if kind == "l2":
        return float(np.mean(diff * diff)), 2.0 * diff / n
    if kind == "l1":
        return float(np.mean(np.abs(diff))), np.sign(diff) / n
    s, ds = ssim_and_grad(x, y)
    if kind == "ssim":
        return 1.0 - s, -ds
    w = COMBINED_PIXEL_WEIGHT
    if kind == "l1+ssim":
        pix, dpix = float(np.mean(np.abs(diff))), np.sign(diff) / n
    else:
        pix, dpix = float(np.mean(diff * diff)), 2.0 * diff / n
    return w * pix + (1 - w) * (1.0 - s), w * dpix - (1 - w) * ds
