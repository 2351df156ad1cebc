import os
import sys

import numpy as np
import pytest

RUN_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), 'run')
if RUN_DIR not in sys.path:
    sys.path.insert(0, RUN_DIR)

from vn_autodiff import precision  # noqa: E402
from vn_config import load_preset  # noqa: E402
from vn_data import synthetic_images, write_raw_tensor  # noqa: E402


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False, help='run the long acceptance checks')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip = pytest.mark.skip(reason='slow; pass --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip)


# =============================================================================
# Fixtures
# =============================================================================

@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def double():
    """Run the test body with float64 as the default tensor dtype."""
    with precision('double'):
        yield


@pytest.fixture
def toy_preset():
    return load_preset('toy', {'train': {'steps': 20, 'checkpoint_every': 10}})


@pytest.fixture
def toy_images():
    """64 smooth 4x4x1 discrete images."""
    return synthetic_images(64, (4, 4, 1), np.random.default_rng(7))


@pytest.fixture
def toy_dataset_file(tmp_path, toy_images):
    path = tmp_path / 'toy.vft'
    write_raw_tensor(str(path), toy_images.pixels.astype(np.float32))
    return str(path)
