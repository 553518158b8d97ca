"""Accumulated-summation splatting.

Each pixel is the plain sum of ``color * exp(-sigma)`` over the Gaussians whose
footprint covers it, with ``sigma = 0.5 * d^T inv(cov) d`` and ``d`` the offset
from the Gaussian center to the pixel center ``(j + 0.5, i + 0.5)``.

The truncated renderer bins Gaussians into square tiles and processes tiles in
parallel; within a pixel, contributions are added in ascending Gaussian index.
``dense_mode`` is an independent numpy path with no truncation, kept as an oracle.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from .core import GaussianCloud, ImageBuffer, invert_covariances

# skip probing the (too old) system TBB; OpenMP or the builtin workqueue suffice
numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]


@dataclass(frozen=True)
class RenderConfig:
    tile_size: int = 16
    support_cutoff_sigmas: float = 3.0
    dense_mode: bool = False

    def __post_init__(self):
        if self.tile_size < 1:
            raise ValueError("tile_size must be >= 1")
        if not self.support_cutoff_sigmas > 0:
            raise ValueError("support_cutoff_sigmas must be positive")


@dataclass(frozen=True)
class SplatFootprint:
    """Axis-aligned support box in continuous pixel coordinates, clipped to the frame.

    Pixel (i, j) is covered when its center (j + 0.5, i + 0.5) lies in the box.
    """

    gaussian_index: int
    x0: float
    y0: float
    x1: float
    y1: float

    def pixel_range(self) -> tuple[int, int, int, int]:
        """Inclusive (col0, row0, col1, row1); empty when col0 > col1 or row0 > row1."""
        return (
            math.ceil(self.x0 - 0.5),
            math.ceil(self.y0 - 0.5),
            math.floor(self.x1 - 0.5),
            math.floor(self.y1 - 0.5),
        )

    @property
    def is_empty(self) -> bool:
        c0, r0, c1, r1 = self.pixel_range()
        return c0 > c1 or r0 > r1


def eval_sigma(cov_inv, d) -> float:
    """0.5 * d^T cov_inv d; ``cov_inv`` is a Covariance2x2 or a packed (a, b, c)."""
    if hasattr(cov_inv, "a"):
        a, b, c = cov_inv.a, cov_inv.b, cov_inv.c
    else:
        a, b, c = cov_inv
    dx, dy = d
    return 0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy)


def footprint_boxes(centers: np.ndarray, cov: np.ndarray, k: float, width: int, height: int) -> np.ndarray:
    """Continuous boxes (x0, y0, x1, y1) per Gaussian, clipped to [0, W] x [0, H]."""
    hx = k * np.sqrt(cov[:, 0])
    hy = k * np.sqrt(cov[:, 2])
    boxes = np.empty((len(centers), 4), dtype=np.float64)
    boxes[:, 0] = np.clip(centers[:, 0] - hx, 0.0, width)
    boxes[:, 1] = np.clip(centers[:, 1] - hy, 0.0, height)
    boxes[:, 2] = np.clip(centers[:, 0] + hx, 0.0, width)
    boxes[:, 3] = np.clip(centers[:, 1] + hy, 0.0, height)
    return boxes


def pixel_ranges(boxes: np.ndarray, width: int, height: int) -> np.ndarray:
    """Inclusive integer pixel ranges (col0, row0, col1, row1) covered by each box."""
    r = np.empty((len(boxes), 4), dtype=np.int64)
    r[:, 0] = np.ceil(boxes[:, 0] - 0.5)
    r[:, 1] = np.ceil(boxes[:, 1] - 0.5)
    r[:, 2] = np.floor(boxes[:, 2] - 0.5)
    r[:, 3] = np.floor(boxes[:, 3] - 0.5)
    np.clip(r[:, 0], 0, width - 1, out=r[:, 0])
    np.clip(r[:, 1], 0, height - 1, out=r[:, 1])
    np.clip(r[:, 2], -1, width - 1, out=r[:, 2])
    np.clip(r[:, 3], -1, height - 1, out=r[:, 3])
    return r


def compute_footprint(g, cfg: RenderConfig, width: int, height: int, kind=None, index: int = 0) -> SplatFootprint:
    """Footprint of a single Gaussian (``g`` may be a Gaussian2D or a (center, cov) pair)."""
    from .core import Gaussian2D, covariances_from_raw, positions_to_pixels

    if isinstance(g, Gaussian2D):
        if kind is None:
            raise ValueError("kind is required for a raw Gaussian2D")
        center = positions_to_pixels(np.asarray(g.mu_raw, dtype=np.float64).reshape(1, 2), width, height)
        cov = covariances_from_raw(np.asarray(g.cov_raw), kind)
    else:
        center, cov = g
        center = np.asarray(center, dtype=np.float64).reshape(1, 2)
        cov = np.asarray([cov.a, cov.b, cov.c] if hasattr(cov, "a") else cov, dtype=np.float64).reshape(1, 3)
    if cfg.dense_mode:
        return SplatFootprint(index, 0.0, 0.0, float(width), float(height))
    x0, y0, x1, y1 = footprint_boxes(center, cov, cfg.support_cutoff_sigmas, width, height)[0]
    return SplatFootprint(index, float(x0), float(y0), float(x1), float(y1))


@dataclass
class PreparedSplats:
    """Per-frame render inputs shared by the forward and backward kernels."""

    centers: np.ndarray  # (N, 2) pixel space
    cov: np.ndarray  # (N, 3) packed covariance
    cov_inv: np.ndarray  # (N, 3) packed inverse
    colors: np.ndarray  # (N, 3)
    ranges: np.ndarray  # (N, 4) inclusive pixel ranges
    tile_start: np.ndarray  # (T + 1,) offsets into tile_items
    tile_items: np.ndarray  # gaussian indices, ascending within a tile
    width: int
    height: int
    tile_size: int


@numba.njit(cache=True)
def _bin_tiles(ranges, tile_size, tiles_x, tiles_y):
    ntiles = tiles_x * tiles_y
    counts = np.zeros(ntiles + 1, dtype=np.int64)
    n = ranges.shape[0]
    for g in range(n):
        c0, r0, c1, r1 = ranges[g, 0], ranges[g, 1], ranges[g, 2], ranges[g, 3]
        if c0 > c1 or r0 > r1:
            continue
        for ty in range(r0 // tile_size, r1 // tile_size + 1):
            for tx in range(c0 // tile_size, c1 // tile_size + 1):
                counts[ty * tiles_x + tx + 1] += 1
    for t in range(ntiles):
        counts[t + 1] += counts[t]
    items = np.empty(counts[ntiles], dtype=np.int64)
    fill = counts[:ntiles].copy()
    for g in range(n):
        c0, r0, c1, r1 = ranges[g, 0], ranges[g, 1], ranges[g, 2], ranges[g, 3]
        if c0 > c1 or r0 > r1:
            continue
        for ty in range(r0 // tile_size, r1 // tile_size + 1):
            for tx in range(c0 // tile_size, c1 // tile_size + 1):
                t = ty * tiles_x + tx
                items[fill[t]] = g
                fill[t] += 1
    return counts, items


def prepare_splats(
    centers: np.ndarray, cov: np.ndarray, colors: np.ndarray, width: int, height: int, cfg: RenderConfig
) -> PreparedSplats:
    centers = np.ascontiguousarray(centers, dtype=np.float64)
    cov = np.ascontiguousarray(cov, dtype=np.float64)
    colors = np.ascontiguousarray(colors, dtype=np.float64)
    cov_inv = invert_covariances(cov)
    if cfg.dense_mode:
        ranges = np.tile(np.array([0, 0, width - 1, height - 1], dtype=np.int64), (len(centers), 1))
    else:
        boxes = footprint_boxes(centers, cov, cfg.support_cutoff_sigmas, width, height)
        ranges = pixel_ranges(boxes, width, height)
    ts = cfg.tile_size
    tiles_x = -(-width // ts)
    tiles_y = -(-height // ts)
    start, items = _bin_tiles(ranges, ts, tiles_x, tiles_y)
    return PreparedSplats(centers, cov, cov_inv, colors, ranges, start, items, width, height, ts)


@numba.njit(parallel=True, cache=True)
def _forward_tiles(centers, cov_inv, colors, ranges, tile_start, tile_items, width, height, tile_size):
    out = np.zeros((height, width, 3), dtype=np.float64)
    tiles_x = (width + tile_size - 1) // tile_size
    ntiles = tile_start.shape[0] - 1
    for t in numba.prange(ntiles):
        ty0 = (t // tiles_x) * tile_size
        tx0 = (t % tiles_x) * tile_size
        ty1 = min(ty0 + tile_size, height) - 1
        tx1 = min(tx0 + tile_size, width) - 1
        for k in range(tile_start[t], tile_start[t + 1]):
            g = tile_items[k]
            r0 = max(ranges[g, 1], ty0)
            r1 = min(ranges[g, 3], ty1)
            c0 = max(ranges[g, 0], tx0)
            c1 = min(ranges[g, 2], tx1)
            cx = centers[g, 0]
            cy = centers[g, 1]
            ia = cov_inv[g, 0]
            ib = cov_inv[g, 1]
            ic = cov_inv[g, 2]
            cr = colors[g, 0]
            cg = colors[g, 1]
            cb = colors[g, 2]
            for py in range(r0, r1 + 1):
                dy = py + 0.5 - cy
                for px in range(c0, c1 + 1):
                    dx = px + 0.5 - cx
                    s = 0.5 * (ia * dx * dx + 2.0 * ib * dx * dy + ic * dy * dy)
                    w = math.exp(-s)
                    out[py, px, 0] += cr * w
                    out[py, px, 1] += cg * w
                    out[py, px, 2] += cb * w
    return out


@numba.njit(parallel=True, cache=True)
def _backward_tiles(centers, cov_inv, colors, ranges, tile_start, tile_items, upstream, width, tile_size, height):
    """Per (tile, gaussian) pair partial gradients.

    Columns: d_center (2), d_cov_inv packed (3; the off-diagonal entry counted
    once), d_color (3).
    """
    npairs = tile_items.shape[0]
    part = np.zeros((npairs, 8), dtype=np.float64)
    tiles_x = (width + tile_size - 1) // tile_size
    ntiles = tile_start.shape[0] - 1
    for t in numba.prange(ntiles):
        ty0 = (t // tiles_x) * tile_size
        tx0 = (t % tiles_x) * tile_size
        ty1 = min(ty0 + tile_size, height) - 1
        tx1 = min(tx0 + tile_size, width) - 1
        for k in range(tile_start[t], tile_start[t + 1]):
            g = tile_items[k]
            r0 = max(ranges[g, 1], ty0)
            r1 = min(ranges[g, 3], ty1)
            c0 = max(ranges[g, 0], tx0)
            c1 = min(ranges[g, 2], tx1)
            cx = centers[g, 0]
            cy = centers[g, 1]
            ia = cov_inv[g, 0]
            ib = cov_inv[g, 1]
            ic = cov_inv[g, 2]
            cr = colors[g, 0]
            cg = colors[g, 1]
            cb = colors[g, 2]
            dcx = 0.0
            dcy = 0.0
            da = 0.0
            db = 0.0
            dc = 0.0
            dr = 0.0
            dg = 0.0
            dbl = 0.0
            for py in range(r0, r1 + 1):
                dy = py + 0.5 - cy
                for px in range(c0, c1 + 1):
                    ur = upstream[py, px, 0]
                    ug = upstream[py, px, 1]
                    ub = upstream[py, px, 2]
                    if ur == 0.0 and ug == 0.0 and ub == 0.0:
                        continue
                    dx = px + 0.5 - cx
                    s = 0.5 * (ia * dx * dx + 2.0 * ib * dx * dy + ic * dy * dy)
                    w = math.exp(-s)
                    dr += ur * w
                    dg += ug * w
                    dbl += ub * w
                    dsig = -w * (ur * cr + ug * cg + ub * cb)
                    # dsigma/dcenter = -inv(cov) d
                    dcx -= dsig * (ia * dx + ib * dy)
                    dcy -= dsig * (ib * dx + ic * dy)
                    da += dsig * 0.5 * dx * dx
                    db += dsig * dx * dy
                    dc += dsig * 0.5 * dy * dy
            part[k, 0] = dcx
            part[k, 1] = dcy
            part[k, 2] = da
            part[k, 3] = db
            part[k, 4] = dc
            part[k, 5] = dr
            part[k, 6] = dg
            part[k, 7] = dbl
    return part


@numba.njit(cache=True)
def _reduce_pairs(part, tile_items, n):
    acc = np.zeros((n, 8), dtype=np.float64)
    for k in range(tile_items.shape[0]):
        g = tile_items[k]
        for j in range(8):
            acc[g, j] += part[k, j]
    return acc


def render_prepared(prep: PreparedSplats) -> np.ndarray:
    return _forward_tiles(
        prep.centers, prep.cov_inv, prep.colors, prep.ranges, prep.tile_start, prep.tile_items,
        prep.width, prep.height, prep.tile_size,
    )


def backward_prepared(prep: PreparedSplats, upstream: np.ndarray):
    """Gradients w.r.t. pixel-space centers, covariance (matrix form) and colors.

    Returns ``(d_centers (N,2), d_cov (N,3), d_colors (N,3))`` where ``d_cov``
    holds (g1, g2, g3) of the symmetric matrix G = dL/dSigma.
    """
    upstream = np.ascontiguousarray(upstream, dtype=np.float64)
    part = _backward_tiles(
        prep.centers, prep.cov_inv, prep.colors, prep.ranges, prep.tile_start, prep.tile_items,
        upstream, prep.width, prep.tile_size, prep.height,
    )
    acc = _reduce_pairs(part, prep.tile_items, len(prep.centers))
    # packed d/d(p, q, r) of inv(cov) -> matrix form Gi, then G = -inv Gi inv
    p, q, r = prep.cov_inv[:, 0], prep.cov_inv[:, 1], prep.cov_inv[:, 2]
    gi_a, gi_b, gi_c = acc[:, 2], 0.5 * acc[:, 3], acc[:, 4]
    # M = inv @ Gi
    m00 = p * gi_a + q * gi_b
    m01 = p * gi_b + q * gi_c
    m10 = q * gi_a + r * gi_b
    m11 = q * gi_b + r * gi_c
    d_cov = np.empty((len(p), 3), dtype=np.float64)
    d_cov[:, 0] = -(m00 * p + m01 * q)
    d_cov[:, 1] = -(m00 * q + m01 * r)
    d_cov[:, 2] = -(m10 * q + m11 * r)
    return acc[:, 0:2].copy(), d_cov, acc[:, 5:8].copy()


def render_dense(centers: np.ndarray, cov: np.ndarray, colors: np.ndarray, width: int, height: int) -> np.ndarray:
    """O(N * P) reference: every Gaussian contributes to every pixel."""
    cov_inv = invert_covariances(np.asarray(cov, dtype=np.float64))
    ys, xs = np.meshgrid(np.arange(height) + 0.5, np.arange(width) + 0.5, indexing="ij")
    out = np.zeros((height, width, 3), dtype=np.float64)
    for n in range(len(centers)):
        dx = xs - centers[n, 0]
        dy = ys - centers[n, 1]
        a, b, c = cov_inv[n]
        w = np.exp(-0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy))
        out += w[:, :, None] * colors[n][None, None, :]
    return out


def render_splats(centers, cov, colors, width: int, height: int, cfg: RenderConfig | None = None) -> np.ndarray:
    cfg = cfg or RenderConfig()
    if cfg.dense_mode:
        return render_dense(np.asarray(centers, dtype=np.float64), cov, np.asarray(colors, dtype=np.float64), width, height)
    return render_prepared(prepare_splats(centers, cov, colors, width, height, cfg))


def render(cloud: GaussianCloud, cfg: RenderConfig | None = None) -> ImageBuffer:
    """Render a cloud; output is not clamped."""
    return ImageBuffer(render_splats(cloud.centers(), cloud.covariances(), cloud.color_w, cloud.width, cloud.height, cfg))
