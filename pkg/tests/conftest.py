import numpy as np
import pytest

from pointdiffuse.config import Config
from pointdiffuse.data import generate_scene, preset
from pointdiffuse.pipeline import PointDiffuse

SMALL = dict(levels=2, channels=(8, 16), k=6, time_dim=8, semantic_dim=8, epochs=2, pretrain_epochs=2)


@pytest.fixture
def small_cfg():
    return Config(**SMALL)


@pytest.fixture
def scene():
    return generate_scene(preset("separable", 3, 64, seed=3))


@pytest.fixture
def small_pipe(small_cfg):
    return PointDiffuse.build(small_cfg, 3)


def generic_cloud(n, seed=0):
    from pointdiffuse.geometry import PointCloud

    return PointCloud(np.random.default_rng(seed).normal(size=(n, 3)))


# Acceptance results, filled by test_acceptance.py and printed once at the end of the run.
ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        name, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:2d} {name}: {detail}")
