from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from gsimage.core import FactorizationKind, GaussianCloud
from gsimage.imio import read_image
from gsimage.quant import QuantizedCloud

DATA = Path(__file__).parent / "data"

settings.register_profile(
    "default", deadline=None, suppress_health_check=[HealthCheck.too_slow], print_blob=True
)
settings.load_profile("default")


@pytest.fixture(scope="session")
def data_dir() -> Path:
    return DATA


@pytest.fixture(scope="session")
def astronaut128():
    return read_image(DATA / "astronaut_128.png")


def random_cloud(rng, n, width, height, kind=FactorizationKind.CHOLESKY, color_scale=1.0):
    return GaussianCloud(
        rng.normal(0.0, 0.8, (n, 2)),
        rng.uniform(-0.3, 1.0, (n, 3)),
        rng.uniform(-color_scale, color_scale, (n, 3)),
        kind,
        width,
        height,
    )


def random_qc(rng, n, width=64, height=48, bits=6, stages=2, size=8, kind=0, distinct=False):
    """Random valid QuantizedCloud; ``distinct`` forces pairwise-distinct records."""
    pos = np.clip(rng.uniform(-1, 1, (n, 2)), -0.999, 0.999).astype(np.float16)
    if distinct:
        # distinct x bit patterns guarantee distinct records; |x| < 1 below 0x3C00
        patterns = np.concatenate([np.arange(0, 0x3C00), np.arange(0x8000, 0xBC00)]).astype(np.uint16)
        pos[:, 0] = rng.choice(patterns, size=n, replace=False).view(np.float16)
    return QuantizedCloud(
        pos,
        rng.integers(0, 1 << bits, (n, 3)),
        rng.integers(0, size, (n, stages)),
        (rng.random(3) + 0.01).astype(np.float32),
        rng.standard_normal(3).astype(np.float32),
        rng.standard_normal((stages, size, 3)).astype(np.float32),
        width,
        height,
        kind,
        bits,
        int(rng.integers(0, 2**32)),
    )


# one status line per acceptance criterion, printed after the run
CRITERIA: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(CRITERIA):
        terminalreporter.write_line(CRITERIA[num])
