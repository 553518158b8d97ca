"""PNG/PPM reading and writing as float RGB in [0, 1]."""
from __future__ import annotations

import hashlib
from pathlib import Path

import cv2
import numpy as np


class ImageReadError(OSError):
    pass


def read_image(path) -> np.ndarray:
    """Load an 8- or 16-bit PNG/PPM as an H x W x 3 float64 array (value / 255 or / 65535)."""
    path = Path(path)
    if not path.is_file():
        raise ImageReadError(f"no such image: {path}")
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise ImageReadError(f"cannot decode image: {path}")
    if raw.dtype == np.uint8:
        scale = 255.0
    elif raw.dtype == np.uint16:
        scale = 65535.0
    else:
        raise ImageReadError(f"unsupported sample type {raw.dtype} in {path}")
    if raw.ndim == 2:
        raw = np.repeat(raw[:, :, None], 3, axis=2)
    elif raw.shape[2] == 4:
        raw = raw[:, :, :3]
    elif raw.shape[2] != 3:
        raise ImageReadError(f"unsupported channel count {raw.shape[2]} in {path}")
    return raw[:, :, ::-1].astype(np.float64) / scale


def to_uint8(pixels) -> np.ndarray:
    pixels = np.asarray(getattr(pixels, "pixels", pixels), dtype=np.float64)
    return np.rint(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, pixels) -> None:
    if not cv2.imwrite(str(path), np.ascontiguousarray(to_uint8(pixels)[:, :, ::-1])):
        raise OSError(f"failed to write {path}")


def blob_hash(data: bytes) -> str:
    """git's object id for a blob with these contents."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def file_hash(path) -> str:
    return blob_hash(Path(path).read_bytes())
