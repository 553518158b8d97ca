"""Analytic backward pass of the accumulated-summation renderer.

Conventions: ``d = pixel_center - gaussian_center``; ``G = dL/dSigma`` is the
symmetric matrix [[g1, g2], [g2, g3]] with each off-diagonal entry treated as
an independent variable (so dL/dSigma_01 = dL/dSigma_10 = g2).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    Covariance2x2,
    FactorizationKind,
    GaussianCloud,
    diagonal_gate,
    effective_diagonal,
)
from .raster import PreparedSplats, RenderConfig, backward_prepared, prepare_splats


@dataclass
class GradientBuffer:
    d_mu_raw: np.ndarray  # (N, 2)
    d_cov_raw: np.ndarray  # (N, 3)
    d_color_w: np.ndarray  # (N, 3)

    @classmethod
    def zeros(cls, n: int) -> "GradientBuffer":
        return cls(np.zeros((n, 2)), np.zeros((n, 3)), np.zeros((n, 3)))

    def is_finite(self) -> bool:
        return bool(
            np.isfinite(self.d_mu_raw).all() and np.isfinite(self.d_cov_raw).all() and np.isfinite(self.d_color_w).all()
        )


@dataclass(frozen=True)
class PixelContribution:
    d_color: np.ndarray  # (3,)
    d_cov: np.ndarray  # (2, 2) symmetric
    d_center: np.ndarray  # (2,) pixel space


def backward_pixel(color, cov: Covariance2x2, cov_inv: Covariance2x2, d, upstream) -> PixelContribution:
    """Contribution of one (Gaussian, pixel) pair, written directly from the chain rule."""
    color = np.asarray(color, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    inv = cov_inv.matrix()
    sigma = 0.5 * d @ inv @ d
    w = np.exp(-sigma)
    d_color = upstream * w
    d_sigma = -w * float(upstream @ color)
    inv_d = inv @ d
    dsigma_dcov = -0.5 * np.outer(inv_d, inv_d)
    return PixelContribution(d_color, d_sigma * dsigma_dcov, d_sigma * -inv_d)


def chol_backward(G, l_eff) -> np.ndarray:
    """dL/d(l1, l2, l3) for Sigma = L L^T with L = [[l1, 0], [l2, l3]] (effective values)."""
    G = np.asarray(G, dtype=np.float64)
    g1, g2, g3 = G[..., 0, 0], G[..., 0, 1], G[..., 1, 1]
    l_eff = np.asarray(l_eff, dtype=np.float64)
    l1, l2, l3 = l_eff[..., 0], l_eff[..., 1], l_eff[..., 2]
    return np.stack([2 * g1 * l1 + 2 * g2 * l2, 2 * g2 * l1 + 2 * g3 * l2, 2 * g3 * l3], axis=-1)


def _rotation(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def rs_backward(G, theta: float, s_eff) -> np.ndarray:
    """dL/d(theta, s1, s2) for Sigma = R S S^T R^T (single Gaussian, matrix algebra)."""
    G = np.asarray(G, dtype=np.float64)
    s1, s2 = s_eff
    R = _rotation(theta)
    c, s = np.cos(theta), np.sin(theta)
    dR = np.array([[-s, -c], [c, -s]])
    SS = np.diag([s1 * s1, s2 * s2])
    d_sigma_d_theta = dR @ SS @ R.T + R @ SS @ dR.T
    d_theta = np.sum(G * d_sigma_d_theta)
    d_s1 = np.sum(G * (R @ np.diag([2 * s1, 0.0]) @ R.T))
    d_s2 = np.sum(G * (R @ np.diag([0.0, 2 * s2]) @ R.T))
    return np.array([d_theta, d_s1, d_s2])


def _rs_backward_batch(g: np.ndarray, theta: np.ndarray, s1: np.ndarray, s2: np.ndarray) -> np.ndarray:
    """Vectorized :func:`rs_backward` with G packed as (g1, g2, g3)."""
    g1, g2, g3 = g[:, 0], g[:, 1], g[:, 2]
    c, s = np.cos(theta), np.sin(theta)
    v1, v2 = s1 * s1, s2 * s2
    # Sigma = [[c²v1 + s²v2, cs(v1 - v2)], [., s²v1 + c²v2]]
    diff = v1 - v2
    d_a = -2 * c * s * diff
    d_b = (c * c - s * s) * diff
    d_c = 2 * c * s * diff
    d_theta = g1 * d_a + 2 * g2 * d_b + g3 * d_c
    d_s1 = 2 * s1 * (g1 * c * c + 2 * g2 * c * s + g3 * s * s)
    d_s2 = 2 * s2 * (g1 * s * s - 2 * g2 * c * s + g3 * c * c)
    return np.stack([d_theta, d_s1, d_s2], axis=1)


def cov_raw_backward(d_cov: np.ndarray, cov_raw: np.ndarray, kind) -> np.ndarray:
    """Chain packed G = dL/dSigma through the factorization to raw covariance params."""
    kind = FactorizationKind.parse(kind)
    if kind is FactorizationKind.CHOLESKY:
        l_eff = np.stack([effective_diagonal(cov_raw[:, 0]), cov_raw[:, 1], effective_diagonal(cov_raw[:, 2])], axis=1)
        G = np.empty((len(d_cov), 2, 2))
        G[:, 0, 0] = d_cov[:, 0]
        G[:, 0, 1] = G[:, 1, 0] = d_cov[:, 1]
        G[:, 1, 1] = d_cov[:, 2]
        out = chol_backward(G, l_eff)
        out[:, 0] *= diagonal_gate(cov_raw[:, 0])
        out[:, 2] *= diagonal_gate(cov_raw[:, 2])
        return out
    s1 = effective_diagonal(cov_raw[:, 1])
    s2 = effective_diagonal(cov_raw[:, 2])
    out = _rs_backward_batch(d_cov, cov_raw[:, 0], s1, s2)
    out[:, 1] *= diagonal_gate(cov_raw[:, 1])
    out[:, 2] *= diagonal_gate(cov_raw[:, 2])
    return out


def position_backward(d_centers: np.ndarray, mu_raw: np.ndarray, width: int, height: int) -> np.ndarray:
    t = np.tanh(mu_raw)
    scale = np.array([0.5 * width, 0.5 * height])
    return d_centers * (1.0 - t * t) * scale


def prepare_cloud(cloud: GaussianCloud, cfg: RenderConfig) -> PreparedSplats:
    return prepare_splats(cloud.centers(), cloud.covariances(), cloud.color_w, cloud.width, cloud.height, cfg)


def backward_render(
    cloud: GaussianCloud, upstream, cfg: RenderConfig | None = None, prepared: PreparedSplats | None = None
) -> GradientBuffer:
    """dL/d(raw params) given dL/d(rendered pixels).

    Uses the same footprints as the forward pass; in ``dense_mode`` every
    Gaussian covers the whole frame.
    """
    cfg = cfg or RenderConfig()
    upstream = np.asarray(getattr(upstream, "pixels", upstream), dtype=np.float64)
    if upstream.shape != (cloud.height, cloud.width, 3):
        raise ValueError(f"upstream shape {upstream.shape} does not match the cloud frame")
    prep = prepared if prepared is not None else prepare_cloud(cloud, cfg)
    d_centers, d_cov, d_colors = backward_prepared(prep, upstream)
    return GradientBuffer(
        position_backward(d_centers, cloud.mu_raw, cloud.width, cloud.height),
        cov_raw_backward(d_cov, cloud.cov_raw, cloud.kind),
        d_colors,
    )
