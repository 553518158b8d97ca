"""Float32 cloud checkpoints (``.gsc``).

Layout (little-endian): magic ``GSC1``, uint32 width, uint32 height,
uint32 N, uint8 kind, then float32 arrays mu_raw (N x 2), cov_raw (N x 3),
color_w (N x 3), row-major. No timestamps, so equal clouds give equal bytes.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .core import FactorizationKind, GaussianCloud

MAGIC = b"GSC1"
_HEADER = struct.Struct("<4sIIIB")


def dumps_cloud(cloud: GaussianCloud) -> bytes:
    head = _HEADER.pack(MAGIC, cloud.width, cloud.height, len(cloud), int(cloud.kind))
    body = b"".join(
        np.ascontiguousarray(a, dtype="<f4").tobytes() for a in (cloud.mu_raw, cloud.cov_raw, cloud.color_w)
    )
    return head + body


def loads_cloud(data: bytes) -> GaussianCloud:
    if len(data) < _HEADER.size:
        raise ValueError("checkpoint too short")
    magic, width, height, n, kind = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ValueError("not a cloud checkpoint")
    expected = _HEADER.size + n * 8 * 4
    if len(data) != expected:
        raise ValueError(f"checkpoint size {len(data)} != expected {expected}")
    flat = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).astype(np.float64)
    mu = flat[: 2 * n].reshape(n, 2)
    cov = flat[2 * n : 5 * n].reshape(n, 3)
    col = flat[5 * n :].reshape(n, 3)
    return GaussianCloud(mu, cov, col, FactorizationKind(kind), width, height)


def save_cloud(cloud: GaussianCloud, path) -> None:
    Path(path).write_bytes(dumps_cloud(cloud))


def load_cloud(path) -> GaussianCloud:
    return loads_cloud(Path(path).read_bytes())
