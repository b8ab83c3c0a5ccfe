import numpy as np
import pytest

from active_teaching.structures import Box, ImagePrediction, RoiPrediction, Source


def make_roi(box=(0, 0, 10, 10), conf=0.9, probs=(1.0, 0.0), feature=(1.0, 0.0)):
    return RoiPrediction(Box(*map(float, box)), conf, np.asarray(probs, float), np.asarray(feature, float))


def onehot(k, n):
    p = np.zeros(n)
    p[k] = 1.0
    return p


def image(image_id, source, rois):
    return ImagePrediction(image_id, Source(source), tuple(rois))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA = []


@pytest.fixture
def criterion():
    """Record one acceptance line; the summary is printed at the end of the run."""

    def record(name, ok, detail=""):
        _CRITERIA.append(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)
