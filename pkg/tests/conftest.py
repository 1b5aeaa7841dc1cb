import numpy as np
import pytest

from melmask2 import nn, train

# lines collected by test_acceptance.py, echoed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_pair():
    return train.synth_toy_dataset(1, 1.0, seed=7).pairs[0]


@pytest.fixture(scope="session")
def small_models():
    """Untrained but seeded models; weights are never mutated by tests."""
    return nn.build_stage1(3), nn.build_stage2(4)


@pytest.fixture(scope="session")
def toy_eval_set():
    return train.synth_toy_dataset(8, 2.0, seed=0)


@pytest.fixture(scope="session")
def lg_stage1(toy_eval_set):
    """Stage 1 after 200 cropped Lg steps; returns ``(model, curve)``."""
    cfg = train.TrainConfig(seed=0, batch_frames=32)
    return train.train_stage1(nn.build_stage1(0), toy_eval_set, "Lg", cfg)


@pytest.fixture(scope="session")
def trained_two_stage(lg_stage1, toy_eval_set):
    """Stage 2 trained for 200 steps behind a frozen copy of the Lg stage 1.

    Returns ``(stage1, stage2, stage2_curve, stage1_digest_before)``.
    """
    s1 = lg_stage1[0].copy()
    before = s1.digest()
    cfg = train.TrainConfig(seed=0, batch_frames=32)
    s2, curve = train.train_stage2(nn.build_stage2(1), s1, toy_eval_set, cfg)
    return s1, s2, curve, before
