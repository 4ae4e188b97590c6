from pathlib import Path

import numpy as np
import pytest

from config import RunConfig
from models.tensor import RngState, default_dtype
from services.dataset_service import DatasetService


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False, help='run slow training checks')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip_slow = pytest.mark.skip(reason='needs --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return RngState(1234, stream=7)


@pytest.fixture
def float64():
    """Build tensors and models in double precision for the duration of a test"""
    with default_dtype(np.float64):
        yield


@pytest.fixture
def run_config(tmp_path) -> RunConfig:
    return RunConfig({'data_dir': str(tmp_path / 'data'), 'runs_dir': str(tmp_path / 'runs')}, profile='testing')


@pytest.fixture
def dataset_dir(run_config) -> Path:
    DatasetService(run_config.data_dir).generate(run_config.seed, run_config.split_sizes,
                                                 run_config.grid + (run_config.feature_channels,),
                                                 run_config.noise_sigma)
    return Path(run_config.data_dir)
