"""2D Gaussian parameterization: raw storage, covariance factorizations, screen mapping.

Parameters are kept unconstrained ("raw") and activated when materialized:
positions go through tanh into (-1, 1), and the diagonal of the covariance
factor gets a +0.5 offset (clamped at ``EPS_DIAG``).
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

EPS_DIAG = 1e-3
DIAG_OFFSET = 0.5
# clamped diagonals bound det below by EPS_DIAG**4 = 1e-12, so the threshold sits under that
DEGENERATE_DET = 1e-15
PARAMS_PER_GAUSSIAN = 8


class FactorizationKind(enum.IntEnum):
    CHOLESKY = 0
    ROTATION_SCALING = 1

    @classmethod
    def parse(cls, value: "str | int | FactorizationKind") -> "FactorizationKind":
        if isinstance(value, cls):
            return value
        if isinstance(value, (int, np.integer)):
            return cls(int(value))
        key = str(value).strip().lower()
        if key in ("cholesky", "chol"):
            return cls.CHOLESKY
        if key in ("rs", "rotation-scaling", "rotation_scaling"):
            return cls.ROTATION_SCALING
        raise ValueError(f"unknown factorization {value!r}")

    @property
    def label(self) -> str:
        return "cholesky" if self is FactorizationKind.CHOLESKY else "rs"


class DegenerateCovarianceError(ArithmeticError):
    """Raised when a covariance has (numerically) zero determinant."""


@dataclass(frozen=True)
class Gaussian2D:
    """One splat. ``cov_raw`` is (l1, l2, l3) or (theta, s1, s2) depending on the kind."""

    mu_raw: tuple[float, float]
    cov_raw: tuple[float, float, float]
    color_w: tuple[float, float, float]

    def as_array(self) -> np.ndarray:
        return np.array([*self.mu_raw, *self.cov_raw, *self.color_w], dtype=np.float64)


@dataclass(frozen=True)
class Covariance2x2:
    """Symmetric 2x2 matrix [[a, b], [b, c]]."""

    a: float
    b: float
    c: float

    @property
    def det(self) -> float:
        return self.a * self.c - self.b * self.b

    def matrix(self) -> np.ndarray:
        return np.array([[self.a, self.b], [self.b, self.c]], dtype=np.float64)


@dataclass
class GaussianCloud:
    """N Gaussians stored as raw parameter arrays (float64).

    Row ``n`` of ``mu_raw``/``cov_raw``/``color_w`` is Gaussian ``n``.
    """

    mu_raw: np.ndarray  # (N, 2)
    cov_raw: np.ndarray  # (N, 3)
    color_w: np.ndarray  # (N, 3)
    kind: FactorizationKind
    width: int
    height: int

    def __post_init__(self):
        self.mu_raw = np.ascontiguousarray(self.mu_raw, dtype=np.float64).reshape(-1, 2)
        self.cov_raw = np.ascontiguousarray(self.cov_raw, dtype=np.float64).reshape(-1, 3)
        self.color_w = np.ascontiguousarray(self.color_w, dtype=np.float64).reshape(-1, 3)
        self.kind = FactorizationKind.parse(self.kind)
        n = len(self.mu_raw)
        if n < 1 or len(self.cov_raw) != n or len(self.color_w) != n:
            raise ValueError("cloud needs N >= 1 Gaussians with matching parameter rows")
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be positive")

    def __len__(self) -> int:
        return len(self.mu_raw)

    def __getitem__(self, n: int) -> Gaussian2D:
        return Gaussian2D(tuple(self.mu_raw[n]), tuple(self.cov_raw[n]), tuple(self.color_w[n]))

    @classmethod
    def from_gaussians(cls, gaussians, kind, width: int, height: int) -> "GaussianCloud":
        gaussians = list(gaussians)
        return cls(
            np.array([g.mu_raw for g in gaussians], dtype=np.float64),
            np.array([g.cov_raw for g in gaussians], dtype=np.float64),
            np.array([g.color_w for g in gaussians], dtype=np.float64),
            kind,
            width,
            height,
        )

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(
            self.mu_raw.copy(), self.cov_raw.copy(), self.color_w.copy(), self.kind, self.width, self.height
        )

    def permuted(self, order) -> "GaussianCloud":
        order = np.asarray(order)
        return GaussianCloud(
            self.mu_raw[order], self.cov_raw[order], self.color_w[order], self.kind, self.width, self.height
        )

    def is_finite(self) -> bool:
        return bool(
            np.isfinite(self.mu_raw).all() and np.isfinite(self.cov_raw).all() and np.isfinite(self.color_w).all()
        )

    def centers(self) -> np.ndarray:
        """Pixel-space centers, shape (N, 2) as (x, y)."""
        return positions_to_pixels(self.mu_raw, self.width, self.height)

    def covariances(self) -> np.ndarray:
        """Materialized covariances as (N, 3) rows of (a, b, c)."""
        return covariances_from_raw(self.cov_raw, self.kind)


@dataclass
class ImageBuffer:
    """H x W x 3 float image."""

    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"expected H x W x 3 pixels, got shape {self.pixels.shape}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def clamped(self) -> np.ndarray:
        return np.clip(self.pixels, 0.0, 1.0)


def effective_diagonal(raw):
    """+0.5 offset followed by the lower clamp; works on scalars and arrays."""
    return np.maximum(np.asarray(raw, dtype=np.float64) + DIAG_OFFSET, EPS_DIAG)


def diagonal_gate(raw):
    """Derivative of :func:`effective_diagonal` (1 inside the clamp, 0 outside)."""
    return (np.asarray(raw, dtype=np.float64) + DIAG_OFFSET > EPS_DIAG).astype(np.float64)


def covariances_from_raw(cov_raw: np.ndarray, kind) -> np.ndarray:
    cov_raw = np.asarray(cov_raw, dtype=np.float64).reshape(-1, 3)
    kind = FactorizationKind.parse(kind)
    out = np.empty_like(cov_raw)
    if kind is FactorizationKind.CHOLESKY:
        l1 = effective_diagonal(cov_raw[:, 0])
        l2 = cov_raw[:, 1]
        l3 = effective_diagonal(cov_raw[:, 2])
        out[:, 0] = l1 * l1
        out[:, 1] = l1 * l2
        out[:, 2] = l2 * l2 + l3 * l3
    else:
        theta = cov_raw[:, 0]
        s1 = effective_diagonal(cov_raw[:, 1])
        s2 = effective_diagonal(cov_raw[:, 2])
        c, s = np.cos(theta), np.sin(theta)
        v1, v2 = s1 * s1, s2 * s2
        out[:, 0] = c * c * v1 + s * s * v2
        out[:, 1] = c * s * (v1 - v2)
        out[:, 2] = s * s * v1 + c * c * v2
    return out


def materialize_covariance(g: Gaussian2D, kind) -> Covariance2x2:
    a, b, c = covariances_from_raw(np.asarray(g.cov_raw), kind)[0]
    return Covariance2x2(float(a), float(b), float(c))


def invert_covariance(cov: Covariance2x2) -> Covariance2x2:
    det = cov.det
    if det <= DEGENERATE_DET:
        raise DegenerateCovarianceError(f"covariance determinant {det!r} is not positive")
    return Covariance2x2(cov.c / det, -cov.b / det, cov.a / det)


def invert_covariances(cov: np.ndarray) -> np.ndarray:
    """Vectorized closed-form inverse of (N, 3) packed covariances."""
    a, b, c = cov[:, 0], cov[:, 1], cov[:, 2]
    det = a * c - b * b
    if np.any(det <= DEGENERATE_DET):
        raise DegenerateCovarianceError("covariance with non-positive determinant")
    return np.stack([c / det, -b / det, a / det], axis=1)


def position_to_pixel(mu_raw, width: int, height: int) -> tuple[float, float]:
    x, y = positions_to_pixels(np.asarray(mu_raw, dtype=np.float64).reshape(1, 2), width, height)[0]
    return float(x), float(y)


def positions_to_pixels(mu_raw: np.ndarray, width: int, height: int) -> np.ndarray:
    return normalized_to_pixels(np.tanh(mu_raw), width, height)


def normalized_to_pixels(p: np.ndarray, width: int, height: int) -> np.ndarray:
    """Map coordinates in (-1, 1) to pixel space (y axis points down)."""
    p = np.asarray(p, dtype=np.float64)
    out = np.empty(p.shape, dtype=np.float64)
    out[..., 0] = (p[..., 0] + 1.0) * 0.5 * width
    out[..., 1] = (p[..., 1] + 1.0) * 0.5 * height
    return out


def init_cloud(n: int, width: int, height: int, kind=FactorizationKind.CHOLESKY, seed: int = 0) -> GaussianCloud:
    """Random cloud: uniform positions over the frame, covariance/color raw values in [0, 1)."""
    if n < 1:
        raise ValueError("need at least one Gaussian")
    rng = np.random.default_rng(seed)
    u = rng.random((n, 2))
    # keep atanh finite: u == 0 maps to -1 exactly
    p = np.clip(u * 2.0 - 1.0, -1.0 + 1e-7, 1.0 - 1e-7)
    mu_raw = np.arctanh(p)
    cov_raw = rng.random((n, 3))
    color_w = rng.random((n, 3))
    return GaussianCloud(mu_raw, cov_raw, color_w, kind, width, height)
