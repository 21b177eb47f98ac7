import numpy as np
import pytest

from sarl import trainer
from sarl.config import TrainConfig


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def tiny_config():
    """A fast float64 training config used by the loop and probe tests."""
    return TrainConfig(epochs=2, batch_size=16, input_size=64, stage_channels=(4, 8, 8, 16),
                       proj_dim=8, n_prototypes=4, ppda_grid=2, ram_grid=2, dtype="float64",
                       norm_mean=(0.5, 0.5, 0.5), norm_std=(0.25, 0.25, 0.25))


@pytest.fixture
def tiny_state(tiny_config):
    return trainer.init_state(tiny_config)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
