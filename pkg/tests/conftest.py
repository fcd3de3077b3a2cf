import warnings

import numpy as np
import pytest

from patchmvs.geometry import CameraModel

# numba reports an outdated TBB on import; the workqueue/omp layers are used instead
warnings.filterwarnings("ignore", message=".*TBB.*")


def rotation(rng: np.random.Generator, max_angle: float = np.pi) -> np.ndarray:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    ang = rng.uniform(-max_angle, max_angle)
    Kx = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(ang) * Kx + (1 - np.cos(ang)) * Kx @ Kx


def random_camera(rng: np.random.Generator, width=64, height=48, max_angle=0.3, baseline=0.5) -> CameraModel:
    f = rng.uniform(40, 120)
    K = np.array([[f, rng.uniform(-1, 1), width / 2 + rng.uniform(-3, 3)], [0, f * rng.uniform(0.9, 1.1), height / 2], [0, 0, 1]])
    return CameraModel(K, rotation(rng, max_angle), rng.normal(size=3) * baseline, width, height, 1.0, 10.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, echoed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
