import numpy as np
import pytest
import torch

from dqseg.cloud import DEFAULT_TAXONOMY, LabeledPointCloud

torch.set_num_threads(1)


@pytest.fixture
def taxonomy():
    return DEFAULT_TAXONOMY


def make_cloud(positions, semantic=None, instance=None, intensity=None, n_things=3, n_stuff=3):
    positions = np.asarray(positions, dtype=np.float32).reshape(-1, 3)
    n = len(positions)
    semantic = np.full(n, n_things) if semantic is None else semantic
    instance = np.zeros(n) if instance is None else instance
    intensity = np.full(n, 0.5) if intensity is None else intensity
    return LabeledPointCloud(positions, intensity, semantic, instance, n_things, n_stuff)


@pytest.fixture
def small_cloud():
    rng = np.random.default_rng(3)
    pos = rng.uniform([-3, -3, -0.5], [3, 3, 2], size=(20, 3))
    semantic = np.array([0] * 5 + [1] * 4 + [3] * 6 + [4] * 5)
    instance = np.array([1] * 5 + [2] * 4 + [0] * 11)
    return make_cloud(pos, semantic, instance, rng.random(20))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
