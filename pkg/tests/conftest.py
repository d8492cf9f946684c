import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile(
    "canids", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("canids")


@pytest.fixture(scope="session")
def small_corpus():
    """Four 2,000-frame captures from the default profile, as one table."""
    from canids import traffic
    from canids.codec import FrameTable

    return FrameTable.from_frames(traffic.corpus_frames(2000, seed=3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_split(small_corpus):
    from canids.pipeline import split_table

    return split_table(small_corpus, 0.7, 0)


@pytest.fixture(scope="session")
def small_fit(small_split):
    """A quickly trained detector: full stage 1, a few stage-2 epochs."""
    from dataclasses import replace

    from canids.detector import STAGE1_TRAIN, STAGE2_TRAIN
    from canids.pipeline import PipelineConfig, fit_detector

    config = PipelineConfig(
        stage1=replace(STAGE1_TRAIN, batch_size=32),
        stage2=replace(STAGE2_TRAIN, max_epochs=4),
        stage2_max_train=1500,
    )
    return fit_detector(small_split[0], config)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS):
            terminalreporter.write_line(line)
