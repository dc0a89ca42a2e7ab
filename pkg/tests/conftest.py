import numpy as np
import pytest
import torch

from gestalt_motion.filterbank import build_filter_bank


@pytest.fixture(scope="session", autouse=True)
def _pin_torch_threads():
    # keeps conv results reproducible across runs on the same machine
    torch.set_num_threads(max(1, min(4, torch.get_num_threads())))


@pytest.fixture(scope="session")
def bank():
    return build_filter_bank()


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
