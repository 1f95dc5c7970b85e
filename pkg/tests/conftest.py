import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from vaeattn.data import gen_defect_dataset  # noqa: E402
from vaeattn.model import TrainConfig, VaeConfig, build_model, train_vae  # noqa: E402

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model():
    """1 conv, 2 channels, 8x8 input, D=2, float64."""
    return build_model(VaeConfig.tiny(), seed=3, dtype=torch.float64)


@pytest.fixture
def tiny_input(rng):
    return torch.from_numpy(rng.uniform(0.05, 0.95, (1, 1, 8, 8)))


@pytest.fixture(scope="session")
def defects():
    return gen_defect_dataset(40, 8, resolution=32, seed=5)


@pytest.fixture(scope="session")
def trained(defects):
    """A quickly trained checkpoint on 32x32 textures."""
    train, _ = defects
    cfg = VaeConfig.small((32, 32, 1), latent_dim=4, channels=(8, 16, 16))
    return train_vae(train.images(), cfg, TrainConfig(n_steps=40, batch_size=16,
                                                      learning_rate=1e-3, beta=1e-3), seed=0)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[number])
