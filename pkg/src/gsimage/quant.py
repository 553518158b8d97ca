"""Attribute quantization and quantization-aware fine-tuning.

* positions: post-tanh coordinates stored as IEEE half floats
* covariance raw params: b-bit asymmetric quantization with learned, shared
  per-component scale/offset
* colors: residual vector quantization (M stages x B codewords), k-means
  initialized, EMA-updated during fine-tuning
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .core import FactorizationKind, GaussianCloud, ImageBuffer, covariances_from_raw, normalized_to_pixels
from .grad import cov_raw_backward, position_backward
from .losses import loss_and_grad
from .metrics import psnr
from .optim import make_optimizer
from .raster import RenderConfig, backward_prepared, prepare_splats, render_prepared, render_splats

log = logging.getLogger(__name__)

# largest binary16 value below 1.0; keeps decoded centers strictly inside the frame
FP16_BELOW_ONE = float(np.nextafter(np.float16(1.0), np.float16(0.0)))


class InsufficientPointsError(ValueError):
    pass


# --------------------------------------------------------------------------- asymmetric quantization


@dataclass
class AsymQuant:
    gamma: np.ndarray  # (3,)
    beta: np.ndarray  # (3,)
    bits: int = 6

    def __post_init__(self):
        self.gamma = np.asarray(self.gamma, dtype=np.float64).reshape(-1)
        self.beta = np.asarray(self.beta, dtype=np.float64).reshape(-1)
        if np.any(self.gamma <= 0):
            raise ValueError("gamma must be positive")

    @property
    def qmax(self) -> int:
        return 2**self.bits - 1

    @classmethod
    def from_range(cls, values: np.ndarray, bits: int = 6) -> "AsymQuant":
        """Offset at the per-component minimum, scale spanning [min, max]."""
        values = np.asarray(values, dtype=np.float64).reshape(-1, 3)
        lo, hi = values.min(axis=0), values.max(axis=0)
        gamma = np.maximum((hi - lo) / (2**bits - 1), 1e-6)
        return cls(gamma, lo, bits)


def quantize_asym(values, q: AsymQuant):
    """Codes ``round(clamp((l - beta) / gamma, 0, 2^b - 1))`` and their dequantized values."""
    values = np.asarray(values, dtype=np.float64)
    u = (values - q.beta) / q.gamma
    codes = np.rint(np.clip(u, 0, q.qmax)).astype(np.int64)
    return codes, codes * q.gamma + q.beta


def dequantize_asym(codes, gamma, beta) -> np.ndarray:
    return np.asarray(codes, dtype=np.float64) * np.asarray(gamma, dtype=np.float64) + np.asarray(beta, dtype=np.float64)


# --------------------------------------------------------------------------- residual VQ


@dataclass
class RvqCodebook:
    codebooks: np.ndarray  # (M, B, 3)
    cluster_size: np.ndarray  # (M, B)
    cluster_sum: np.ndarray  # (M, B, 3)
    decay: float = 0.99
    eps: float = 1e-5

    def __post_init__(self):
        self.codebooks = np.array(self.codebooks, dtype=np.float64)
        if self.codebooks.ndim != 3 or self.codebooks.shape[2] != 3:
            raise ValueError("codebooks must have shape (M, B, 3)")
        if self.stages < 1 or self.size < 2:
            raise ValueError("need M >= 1 stages of B >= 2 codewords")

    @property
    def stages(self) -> int:
        return self.codebooks.shape[0]

    @property
    def size(self) -> int:
        return self.codebooks.shape[1]

    @classmethod
    def from_codebooks(cls, codebooks, decay: float = 0.99) -> "RvqCodebook":
        codebooks = np.array(codebooks, dtype=np.float64)
        m, b = codebooks.shape[:2]
        return cls(codebooks, np.ones((m, b)), codebooks.copy(), decay)


def _nearest(residual: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    d = residual[:, None, :] - codebook[None, :, :]
    return np.argmin(np.einsum("nbk,nbk->nb", d, d), axis=1)


def rvq_encode_batch(colors: np.ndarray, codebooks):
    """Greedy per-stage nearest-codeword search.

    Returns ``(indices (N, M), reconstruction (N, 3), stage_inputs (M, N, 3))``
    where ``stage_inputs[m]`` is the residual that stage ``m`` quantized.
    """
    cb = getattr(codebooks, "codebooks", codebooks)
    colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    residual = colors.copy()
    recon = np.zeros_like(colors)
    idx = np.empty((len(colors), cb.shape[0]), dtype=np.int64)
    inputs = np.empty((cb.shape[0],) + colors.shape)
    for m in range(cb.shape[0]):
        inputs[m] = residual
        i = _nearest(residual, cb[m])
        idx[:, m] = i
        recon += cb[m][i]
        residual = colors - recon
    return idx, recon, inputs


def rvq_encode(color, book):
    idx, recon, _ = rvq_encode_batch(np.asarray(color, dtype=np.float64).reshape(1, 3), book)
    return idx[0], recon[0]


def rvq_decode(indices: np.ndarray, codebooks) -> np.ndarray:
    cb = getattr(codebooks, "codebooks", codebooks)
    indices = np.asarray(indices).reshape(-1, cb.shape[0])
    out = np.zeros((len(indices), 3), dtype=np.float64)
    for m in range(cb.shape[0]):
        out += cb[m][indices[:, m]]
    return out


def commitment_loss(colors, codebooks) -> float:
    """Mean over N*B of the squared gap between each stage's input residual and its codeword.

    The residual side is a constant (stop-gradient); only codewords would receive gradient.
    """
    cb = np.asarray(getattr(codebooks, "codebooks", codebooks), dtype=np.float64)
    colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    idx, _, inputs = rvq_encode_batch(colors, cb)
    total = 0.0
    for m in range(cb.shape[0]):
        diff = inputs[m] - cb[m][idx[:, m]]
        total += float(np.sum(diff * diff))
    return total / (len(colors) * cb.shape[1])


def kmeans_init(points: np.ndarray, n_clusters: int, iters: int = 5, seed: int = 0, history: list | None = None):
    """k-means++ seeding followed by ``iters`` Lloyd iterations.

    Returns ``(centroids (B, 3), counts (B,))``. Clusters that go empty are
    re-seeded at the point farthest from its centroid. When ``history`` is a
    list, the distortion of each iteration's assignment is appended to it.
    """
    points = np.asarray(points, dtype=np.float64).reshape(len(points), -1)
    n = len(points)
    if n < n_clusters:
        raise InsufficientPointsError(f"k-means needs at least {n_clusters} points, got {n}")
    rng = np.random.default_rng(seed)
    centroids = np.empty((n_clusters, points.shape[1]))
    centroids[0] = points[rng.integers(n)]
    d2 = np.sum((points - centroids[0]) ** 2, axis=1)
    for k in range(1, n_clusters):
        total = d2.sum()
        if total > 0:
            j = int(rng.choice(n, p=d2 / total))
        else:
            j = int(rng.integers(n))
        centroids[k] = points[j]
        d2 = np.minimum(d2, np.sum((points - centroids[k]) ** 2, axis=1))

    assign = np.zeros(n, dtype=np.int64)
    for _ in range(iters):
        dist = np.sum((points[:, None, :] - centroids[None]) ** 2, axis=2)
        assign = np.argmin(dist, axis=1)
        nearest = dist[np.arange(n), assign]
        if history is not None:
            history.append(float(nearest.mean()))
        counts = np.bincount(assign, minlength=n_clusters)
        for k in range(n_clusters):
            if counts[k] > 0:
                centroids[k] = points[assign == k].mean(axis=0)
        for k in np.flatnonzero(counts == 0):
            far = int(np.argmax(nearest))
            centroids[k] = points[far]
            nearest[far] = 0.0
    dist = np.sum((points[:, None, :] - centroids[None]) ** 2, axis=2)
    assign = np.argmin(dist, axis=1)
    return centroids, np.bincount(assign, minlength=n_clusters).astype(np.float64)


def init_rvq(colors: np.ndarray, stages: int = 2, size: int = 8, iters: int = 5, seed: int = 0, decay: float = 0.99):
    """Stage-wise k-means on successive residuals."""
    colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    books = np.empty((stages, size, 3))
    sizes = np.empty((stages, size))
    residual = colors.copy()
    for m in range(stages):
        centroids, counts = kmeans_init(residual, size, iters, seed + m)
        books[m] = centroids
        sizes[m] = counts
        residual = residual - centroids[_nearest(residual, centroids)]
    return RvqCodebook(books, sizes, books * sizes[:, :, None], decay)


def ema_update(book: RvqCodebook, stage: int, residuals: np.ndarray, indices: np.ndarray) -> RvqCodebook:
    """Exponential-moving-average codebook update for one stage, in place.

    Entries with no assignment in this batch keep their codeword.
    """
    d = book.decay
    b = book.size
    counts = np.bincount(indices, minlength=b).astype(np.float64)
    sums = np.zeros((b, 3))
    np.add.at(sums, indices, residuals)
    book.cluster_size[stage] = d * book.cluster_size[stage] + (1 - d) * counts
    book.cluster_sum[stage] = d * book.cluster_sum[stage] + (1 - d) * sums
    hit = counts > 0
    book.codebooks[stage][hit] = book.cluster_sum[stage][hit] / np.maximum(book.cluster_size[stage][hit], book.eps)[:, None]
    return book


# --------------------------------------------------------------------------- quantized cloud


@dataclass
class QuantizedCloud:
    positions: np.ndarray  # (N, 2) float16, post-tanh in (-1, 1)
    cov_codes: np.ndarray  # (N, 3) ints in [0, 2^b)
    color_indices: np.ndarray  # (N, M) ints in [0, B)
    gamma: np.ndarray  # (3,) float32
    beta: np.ndarray  # (3,) float32
    codebooks: np.ndarray  # (M, B, 3) float32
    width: int
    height: int
    kind: FactorizationKind = FactorizationKind.CHOLESKY
    bits: int = 6
    seed: int = 0

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float16).reshape(-1, 2)
        self.cov_codes = np.asarray(self.cov_codes, dtype=np.int64).reshape(-1, 3)
        self.codebooks = np.asarray(self.codebooks, dtype=np.float32)
        self.color_indices = np.asarray(self.color_indices, dtype=np.int64).reshape(-1, self.codebooks.shape[0])
        self.gamma = np.asarray(self.gamma, dtype=np.float32).reshape(3)
        self.beta = np.asarray(self.beta, dtype=np.float32).reshape(3)
        self.kind = FactorizationKind.parse(self.kind)

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def stages(self) -> int:
        return self.codebooks.shape[0]

    @property
    def codebook_size(self) -> int:
        return self.codebooks.shape[1]

    def validate(self) -> None:
        n = len(self.positions)
        if n < 1:
            raise ValueError("quantized cloud is empty")
        if self.cov_codes.shape != (n, 3) or self.color_indices.shape != (n, self.stages):
            raise ValueError("inconsistent quantized cloud shapes")
        if self.cov_codes.min() < 0 or self.cov_codes.max() >= 2**self.bits:
            raise ValueError("covariance code outside its bit-width")
        if self.color_indices.min() < 0 or self.color_indices.max() >= self.codebook_size:
            raise ValueError("color index outside the codebook")
        if not np.all(np.abs(self.positions.astype(np.float64)) < 1.0):
            raise ValueError("positions must lie strictly inside (-1, 1)")
        if not (np.isfinite(self.gamma).all() and np.isfinite(self.beta).all() and np.isfinite(self.codebooks).all()):
            raise ValueError("non-finite quantization metadata")
        if not np.all(self.gamma > 0):
            raise ValueError("gamma must be positive")

    def centers(self) -> np.ndarray:
        return normalized_to_pixels(self.positions.astype(np.float64), self.width, self.height)

    def cov_raw(self) -> np.ndarray:
        return dequantize_asym(self.cov_codes, self.gamma, self.beta)

    def covariances(self) -> np.ndarray:
        return covariances_from_raw(self.cov_raw(), self.kind)

    def colors(self) -> np.ndarray:
        return rvq_decode(self.color_indices, self.codebooks.astype(np.float64))

    def render(self, cfg: RenderConfig | None = None) -> ImageBuffer:
        return ImageBuffer(render_splats(self.centers(), self.covariances(), self.colors(), self.width, self.height, cfg))

    def to_cloud(self) -> GaussianCloud:
        """Float cloud with the dequantized values (positions mapped back through atanh)."""
        return GaussianCloud(
            np.arctanh(self.positions.astype(np.float64)), self.cov_raw(), self.colors(), self.kind, self.width, self.height
        )

    def permuted(self, order) -> "QuantizedCloud":
        order = np.asarray(order)
        return QuantizedCloud(
            self.positions[order], self.cov_codes[order], self.color_indices[order], self.gamma, self.beta,
            self.codebooks, self.width, self.height, self.kind, self.bits, self.seed,
        )

    def equals(self, other: "QuantizedCloud") -> bool:
        """Exact equality, comparing float fields by bit pattern."""
        return (
            self.width == other.width
            and self.height == other.height
            and self.kind == other.kind
            and self.bits == other.bits
            and self.seed == other.seed
            and np.array_equal(self.positions.view(np.uint16), other.positions.view(np.uint16))
            and np.array_equal(self.cov_codes, other.cov_codes)
            and np.array_equal(self.color_indices, other.color_indices)
            and np.array_equal(self.gamma.view(np.uint32), other.gamma.view(np.uint32))
            and np.array_equal(self.beta.view(np.uint32), other.beta.view(np.uint32))
            and self.codebooks.shape == other.codebooks.shape
            and np.array_equal(self.codebooks.view(np.uint32), other.codebooks.view(np.uint32))
        )


def to_fp16_positions(mu_raw: np.ndarray) -> np.ndarray:
    p = np.clip(np.tanh(mu_raw), -FP16_BELOW_ONE, FP16_BELOW_ONE)
    return p.astype(np.float16)


# --------------------------------------------------------------------------- fine-tuning


@dataclass
class QatConfig:
    steps: int = 10000
    lr: float = 1e-4
    lam: float = 1.0
    bits: int = 6
    stages: int = 2
    codebook_size: int = 8
    kmeans_iters: int = 5
    decay: float = 0.99
    seed: int = 0
    loss_kind: str = "l2"
    optimizer: str = "adan"
    tile_size: int = 16
    support_cutoff_sigmas: float = 3.0
    log_every: int = 100

    @property
    def render_config(self) -> RenderConfig:
        return RenderConfig(tile_size=self.tile_size, support_cutoff_sigmas=self.support_cutoff_sigmas)


@dataclass
class QatLog:
    pre_psnr: float = float("nan")
    post_psnr: float = float("nan")
    records: list = field(default_factory=list)  # (step, rec_loss, commitment, psnr, wall_time)


def _quantized_forward(mu_raw, cov_raw, color_w, quant: AsymQuant, book: RvqCodebook, kind, width, height):
    pos = to_fp16_positions(mu_raw)
    centers = normalized_to_pixels(pos.astype(np.float64), width, height)
    u = (cov_raw - quant.beta) / quant.gamma
    codes = np.rint(np.clip(u, 0, quant.qmax))
    deq = codes * quant.gamma + quant.beta
    idx, recon, inputs = rvq_encode_batch(color_w, book)
    return pos, centers, u, codes, deq, idx, recon, inputs


def qat_finetune(cloud: GaussianCloud, target, cfg: QatConfig | None = None, progress=None):
    """Quantization-aware fine-tuning of a fitted cloud against its target image.

    Forward passes use fp16 positions, dequantized covariance parameters and
    RVQ colors; gradients pass straight through both roundings. Scale/offset
    of the covariance quantizer are trained with the rest; codebooks follow
    their assignments by EMA. Returns ``(QuantizedCloud, QatLog)``.
    """
    cfg = cfg or QatConfig()
    target = np.asarray(getattr(target, "pixels", target), dtype=np.float64)
    width, height, kind = cloud.width, cloud.height, cloud.kind
    rcfg = cfg.render_config
    work = cloud.copy()
    quant = AsymQuant.from_range(work.cov_raw, cfg.bits)
    book = init_rvq(work.color_w, cfg.stages, cfg.codebook_size, cfg.kmeans_iters, cfg.seed, cfg.decay)
    qlog = QatLog(pre_psnr=psnr(render_splats(work.centers(), work.covariances(), work.color_w, width, height, rcfg), target))

    params = {"mu_raw": work.mu_raw, "cov_raw": work.cov_raw, "color_w": work.color_w,
              "gamma": quant.gamma, "beta": quant.beta}
    state, step_fn = make_optimizer(cfg.optimizer)
    t0 = time.perf_counter()
    for step in range(cfg.steps):
        pos, centers, u, codes, deq, idx, recon, inputs = _quantized_forward(
            work.mu_raw, work.cov_raw, work.color_w, quant, book, kind, width, height
        )
        prep = prepare_splats(centers, covariances_from_raw(deq, kind), recon, width, height, rcfg)
        img = render_prepared(prep)
        rec_loss, upstream = loss_and_grad(img, target, cfg.loss_kind)
        if step % cfg.log_every == 0:
            commit = commitment_loss(work.color_w, book)
            qlog.records.append((step, rec_loss, commit, psnr(img, target), time.perf_counter() - t0))
            log.debug("qat step %d rec %.6g commit %.6g", step, rec_loss, commit)
            if progress is not None:
                progress(qlog.records[-1])
        d_centers, d_cov, d_colors = backward_prepared(prep, upstream)
        d_deq = cov_raw_backward(d_cov, deq, kind)
        inside = (u >= 0) & (u <= quant.qmax)
        grads = {
            "mu_raw": position_backward(d_centers, work.mu_raw, width, height),
            "cov_raw": np.where(inside, d_deq, 0.0),
            "color_w": d_colors,
            "gamma": np.sum(d_deq * np.where(inside, codes - u, codes), axis=0),
            "beta": np.sum(np.where(inside, 0.0, d_deq), axis=0),
        }
        step_fn(params, grads, state, cfg.lr)
        np.maximum(quant.gamma, 1e-8, out=quant.gamma)
        for m in range(book.stages):
            ema_update(book, m, inputs[m], idx[:, m])
        if not (work.is_finite() and np.isfinite(quant.gamma).all() and np.isfinite(quant.beta).all()):
            from .train import NumericalError

            raise NumericalError(f"non-finite parameters during fine-tuning at step {step}")

    qc = freeze(work, quant, book, cfg.seed)
    qlog.post_psnr = psnr(qc.render(rcfg), target)
    return qc, qlog


def freeze(cloud: GaussianCloud, quant: AsymQuant, book: RvqCodebook, seed: int = 0) -> QuantizedCloud:
    """Snapshot the stored representation; metadata is rounded to float32 before coding covariances."""
    gamma32 = quant.gamma.astype(np.float32)
    beta32 = quant.beta.astype(np.float32)
    q32 = AsymQuant(gamma32.astype(np.float64), beta32.astype(np.float64), quant.bits)
    codes, _ = quantize_asym(cloud.cov_raw, q32)
    books32 = book.codebooks.astype(np.float32)
    idx, _, _ = rvq_encode_batch(cloud.color_w, books32.astype(np.float64))
    qc = QuantizedCloud(
        to_fp16_positions(cloud.mu_raw), codes, idx, gamma32, beta32, books32,
        cloud.width, cloud.height, cloud.kind, quant.bits, seed,
    )
    qc.validate()
    return qc


def quantize_cloud(cloud: GaussianCloud, cfg: QatConfig | None = None) -> QuantizedCloud:
    """Post-training quantization without fine-tuning."""
    cfg = cfg or QatConfig()
    quant = AsymQuant.from_range(cloud.cov_raw, cfg.bits)
    book = init_rvq(cloud.color_w, cfg.stages, cfg.codebook_size, cfg.kmeans_iters, cfg.seed, cfg.decay)
    return freeze(cloud, quant, book, cfg.seed)
