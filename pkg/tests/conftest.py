import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture(autouse=True)
def _seed_torch():
    # every test starts from the same torch RNG state
    torch.manual_seed(0)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
