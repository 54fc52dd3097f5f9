import numpy as np
import pytest
import torch

from protovae.data import make_toy_grid
from protovae.trainer import TrainConfig, TrainState

torch.set_num_threads(1)


def tiny_config(**overrides) -> TrainConfig:
    """d = 3 on 8x8 images in 64-bit: small enough for element-wise gradient checks."""
    base = {
        "dims.data_shape": [8, 8, 1],
        "dims.latent_dim": 3,
        "dims.metric_dim": 2,
        "dims.conv_channels": [2, 3],
        "dims.hidden_dim": 6,
        "disc_width": 6,
        "disc_depth": 2,
        "batch_size": 4,
        "steps": 10,
        "precision": "float64",
        "lr": 1e-3,
        "disc_lr": 1e-3,
    }
    base.update(overrides)
    return TrainConfig.from_flat(base)


@pytest.fixture
def tiny_state():
    return TrainState.create(tiny_config())


@pytest.fixture(scope="session")
def tiny_dataset():
    """8x8 single-channel sprites on a 4x4 position grid."""
    return make_toy_grid(side=8, pos_x=4, pos_y=4, scale_range=(0.25, 0.25), pos_range=(0.25, 0.75))


@pytest.fixture(scope="session")
def toy4():
    """Four factors with at least three values each (metric oracles)."""
    return make_toy_grid(side=32, shapes=3, scales=3, pos_x=4, pos_y=4)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# one line per acceptance criterion, printed after the session
ACCEPTANCE_LINES: dict[str, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES, key=lambda k: int(k)):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
