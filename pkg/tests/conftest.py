import numpy as np
import pytest

from dgw import datagen
from dgw.workspace import DgwModel, ModelDims

SMALL = ModelDims(num_classes=3, side=8, feat_dim=16, num_tokens=4, num_slots=2, slot_dim=8, iters=2, hidden=6)


@pytest.fixture
def small_dims():
    return SMALL


@pytest.fixture
def small_model():
    return DgwModel(SMALL, seed=3)


@pytest.fixture
def small_batch():
    rng = np.random.default_rng(0)
    x = rng.uniform(0, 1, (2, SMALL.in_dim))
    y = np.array([0, 2])
    return x, y


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory):
    """K=3, 8x8 images, 120 train / 60 test at rho = 5%."""
    root = tmp_path_factory.mktemp("tiny_ds")
    train, test = datagen.generate(3, 8, 120, 60, 0.05, seed=1)
    datagen.save(train, root / "train.dgwd")
    datagen.save(test, root / "test.dgwd")
    return root


# ---------------------------------------------------------------- acceptance report

_CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion():
    """``report(n, ok, detail)`` records one acceptance line, then asserts ``ok``."""
    def report(n: int, ok: bool, detail: str) -> None:
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        _CRITERIA[n] = line
        print(line)
        assert ok, line
    return report


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
