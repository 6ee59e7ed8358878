from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from toonsynth.compositor import Pools
from toonsynth.config import RunConfig
from toonsynth.dataset_io import load_guide_boxes
from toonsynth.demo import demo_assets, demo_backgrounds

settings.register_profile(
    "default",
    deadline=None,
    max_examples=60,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("default")


@pytest.fixture(scope="session")
def pools() -> Pools:
    rng = np.random.default_rng(1234)
    return Pools(demo_assets(rng, 16), demo_backgrounds(rng, 5))


@pytest.fixture(scope="session")
def guides():
    return load_guide_boxes(None, 720)


@pytest.fixture
def run_config() -> RunConfig:
    return RunConfig(master_seed=7)


def brute_force_sq_distance(mask: np.ndarray, border_is_exterior: bool = False) -> np.ndarray:
    """O(n^2) scan: squared distance from every pixel to the nearest false pixel."""
    mask = np.asarray(mask, dtype=bool)
    if border_is_exterior:
        mask = np.pad(mask, 1, constant_values=False)
    fy, fx = np.nonzero(~mask)
    out = np.zeros(mask.shape, dtype=np.int64)
    for y, x in zip(*np.nonzero(mask)):
        out[y, x] = int(((fy - y) ** 2 + (fx - x) ** 2).min())
    if border_is_exterior:
        out = out[1:-1, 1:-1]
    return out


# one "PASS/FAIL criterion N: detail" line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
