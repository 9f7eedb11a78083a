import numpy as np
import pytest
import torch

from rrsis.verify.suite import TOY


@pytest.fixture(autouse=True)
def _float32_default():
    # reseed so a test's random draws do not depend on which tests ran before it
    torch.manual_seed(0)
    torch.set_default_dtype(torch.float32)
    yield
    torch.set_default_dtype(torch.float32)


@pytest.fixture
def toy():
    return TOY


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def zero_biases(module):
    with torch.no_grad():
        for name, p in module.named_parameters():
            if name.endswith("bias"):
                p.zero_()
    return module
