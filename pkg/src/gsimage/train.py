"""Fitting a GaussianCloud to one image: render -> loss -> backward -> optimizer step.

The number of Gaussians never changes during a fit.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .core import FactorizationKind, GaussianCloud, ImageBuffer, init_cloud
from .grad import backward_render, prepare_cloud
from .losses import LOSS_KINDS, loss_and_grad
from .metrics import psnr
from .optim import make_optimizer
from .raster import RenderConfig, render_prepared

log = logging.getLogger(__name__)


class NumericalError(FloatingPointError):
    """A parameter or gradient became NaN/Inf."""


@dataclass
class TrainConfig:
    steps: int = 50000
    lr0: float = 1e-3
    lr_half_every: int = 20000
    loss_kind: str = "l2"
    seed: int = 0
    num_gaussians: int = 30000
    kind: str = "cholesky"
    optimizer: str = "adan"
    betas: tuple = (0.98, 0.92, 0.99)
    eps: float = 1e-8
    tile_size: int = 16
    support_cutoff_sigmas: float = 3.0
    log_every: int = 100

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not self.lr0 > 0:
            raise ValueError("lr0 must be positive")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}")
        self.kind = FactorizationKind.parse(self.kind).label
        self.betas = tuple(self.betas)

    @property
    def render_config(self) -> RenderConfig:
        return RenderConfig(tile_size=self.tile_size, support_cutoff_sigmas=self.support_cutoff_sigmas)


@dataclass
class LogRecord:
    step: int
    loss: float
    psnr: float
    wall_time: float


@dataclass
class TrainLog:
    losses: list = field(default_factory=list)  # one value per step
    records: list = field(default_factory=list)  # one LogRecord per log_every steps

    def psnr_at(self, step: int) -> float:
        for rec in self.records:
            if rec.step == step:
                return rec.psnr
        raise KeyError(step)

    @property
    def final_psnr(self) -> float:
        return self.records[-1].psnr

    def to_csv(self) -> str:
        lines = ["step,loss,psnr,wall_time"]
        lines += [f"{r.step},{r.loss:.9g},{r.psnr:.6f},{r.wall_time:.3f}" for r in self.records]
        return "\n".join(lines) + "\n"


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Step-decay schedule: lr0 halved every ``lr_half_every`` steps."""
    return cfg.lr0 * 0.5 ** (step // cfg.lr_half_every)


def cloud_params(cloud: GaussianCloud) -> dict:
    return {"mu_raw": cloud.mu_raw, "cov_raw": cloud.cov_raw, "color_w": cloud.color_w}


def fit(target, cfg: TrainConfig, init: GaussianCloud | None = None, progress=None):
    """Fit ``cfg.num_gaussians`` Gaussians to ``target``; returns ``(cloud, TrainLog)``."""
    target = np.asarray(getattr(target, "pixels", target), dtype=np.float64)
    height, width = target.shape[:2]
    if init is None:
        cloud = init_cloud(cfg.num_gaussians, width, height, cfg.kind, cfg.seed)
    else:
        cloud = init.copy()
        if not cloud.is_finite():
            raise NumericalError("initial Gaussian parameters are not finite")
    rcfg = cfg.render_config
    opt_kwargs = {"betas": cfg.betas, "eps": cfg.eps} if cfg.optimizer == "adan" else {"eps": cfg.eps}
    state, step_fn = make_optimizer(cfg.optimizer, **opt_kwargs)
    params = cloud_params(cloud)
    train_log = TrainLog()
    t0 = time.perf_counter()

    for step in range(cfg.steps + 1):
        prep = prepare_cloud(cloud, rcfg)
        img = render_prepared(prep)
        loss, upstream = loss_and_grad(img, target, cfg.loss_kind)
        if step % cfg.log_every == 0 or step == cfg.steps:
            rec = LogRecord(step, loss, psnr(img, target), time.perf_counter() - t0)
            train_log.records.append(rec)
            log.debug("step %d loss %.6g psnr %.3f", step, rec.loss, rec.psnr)
            if progress is not None:
                progress(rec)
        if step == cfg.steps:
            break
        train_log.losses.append(loss)
        grads = backward_render(cloud, upstream, rcfg, prepared=prep)
        step_fn(params, {"mu_raw": grads.d_mu_raw, "cov_raw": grads.d_cov_raw, "color_w": grads.d_color_w},
                state, lr_at(step, cfg))
        if not cloud.is_finite():
            raise NumericalError(f"non-finite Gaussian parameters after step {step}")
    return cloud, train_log


def render_cloud(cloud: GaussianCloud, cfg: TrainConfig | None = None) -> ImageBuffer:
    rcfg = cfg.render_config if cfg is not None else RenderConfig()
    return ImageBuffer(render_prepared(prepare_cloud(cloud, rcfg)))
