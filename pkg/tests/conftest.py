import numpy as np
import pytest
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from fidmap.se3 import Pose


def random_pose(rng: np.random.Generator, scale: float = 5.0) -> Pose:
    q = rng.normal(size=4)
    return Pose.from_quat(rng.uniform(-scale, scale, 3), q / np.linalg.norm(q))


def matrix_of(pose: Pose) -> np.ndarray:
    """Homogeneous matrix built with scipy, independent of fidmap.se3."""
    m = np.eye(4)
    m[:3, :3] = Rotation.from_quat(pose.quat).as_matrix()
    m[:3, 3] = pose.p
    return m


finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)
poses = st.builds(
    lambda p, q: Pose.from_quat(p, q),
    st.lists(finite, min_size=3, max_size=3),
    st.lists(st.floats(-1, 1, allow_nan=False), min_size=4, max_size=4).filter(
        lambda q: np.linalg.norm(q) > 1e-3
    ),
)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_configure(config):
    config.acceptance_lines = []


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Collects one pass/fail line per acceptance criterion for the terminal summary."""
    lines = request.config.acceptance_lines

    def log(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        lines.append(line)

    return log


def pytest_terminal_summary(terminalreporter, config):
    if config.acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(config.acceptance_lines):
            terminalreporter.write_line(line)
