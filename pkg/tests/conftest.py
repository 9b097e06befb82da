import numpy as np
import pytest

from protosed import synthetic

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
def small_corpus(tmp_path_factory):
    """Two 90-second synthetic recordings: one for training, one held out."""
    root = tmp_path_factory.mktemp("small_corpus")
    info = synthetic.make_corpus(root / "audio", seed=7, duration=90.0, n_train_events=20,
                                 n_target_events=12, n_distractors=4)
    info["root"] = root
    return info
