import numpy as np
import pytest

from koala.config import RunConfig, minimal_config
from koala.model import build_model


def small_config(**overrides):
    """Desk vocabulary and templates with narrow, shallow networks for fast unit tests."""
    base = {"model.n_queries": 4, "model.width": 8, "model.input_width": 8, "model.lm_width": 12,
            "model.heads": 2, "model.lm_heads": 2, "model.lm_layers": 1, "model.qformer_layers": 1,
            "model.key_frames": 4, "model.segment_frames": 4, "model.max_frames": 4,
            "model.patches": 2, "data.video_length": 32, "data.n_train": 16, "data.n_val": 4,
            "data.n_test": 8, "data.n_twin_pairs": 4}
    base.update(overrides)
    return RunConfig().with_overrides(**base)


@pytest.fixture
def cfg():
    return small_config()


@pytest.fixture
def model(cfg):
    return build_model(cfg, seed=0)


@pytest.fixture
def tiny():
    return minimal_config()


def randomize_learnable(store, seed=0, scale=0.3):
    rng = np.random.default_rng(seed)
    for _, t in store.learnable_items():
        t.data[...] = rng.normal(0.0, scale, size=t.data.shape)


# acceptance verdicts, printed once at the end of the run
ACCEPTANCE = {}


def record_acceptance(number, passed, detail):
    ACCEPTANCE[number] = (passed, detail)
    print(f"ACCEPTANCE {number}: {'PASS' if passed else 'FAIL'} - {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
