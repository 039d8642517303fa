import numpy as np
import pytest

from lmmvqa.preprocess import FrameSequence

ACCEPTANCE_LINES: list[str] = []


def make_video(n_frames=8, size=(16, 16), fps=4.0, seed=0, source_id="clip"):
    rng = np.random.default_rng(seed)
    frames = rng.integers(0, 256, size=(n_frames, *size, 3), dtype=np.uint8)
    return FrameSequence(frames, fps, source_id=source_id)


@pytest.fixture
def video_factory():
    return make_video


@pytest.fixture
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
