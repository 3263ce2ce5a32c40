import random

import numpy as np
import pytest


@pytest.fixture
def rng():
    return random.Random(0xC0FFEE)


@pytest.fixture
def nprng():
    return np.random.default_rng(0xC0FFEE)


@pytest.fixture
def sample_elements(rng):
    from zksplit.field import P
    fixed = [0, 1, 2, P - 1, P - 2, P // 2, P // 2 + 1]
    return fixed + [rng.randrange(P) for _ in range(25)]
