import numpy as np
import pytest

from ssmm.data import SyntheticConfig, generate_synthetic
from ssmm.models import ModelConfig
from ssmm.train import prepare_cohort

SHAPE = (12, 12, 12)
SMALL_SPLITS = (32, 8, 12, 6, 6)


def tiny_config(tabular_in):
    return ModelConfig(
        volume_shape=SHAPE,
        widths=(2, 4),
        strides=(1, 2),
        stem_stride=2,
        image_dim=8,
        tabular_in=tabular_in,
        tabular_hidden=(8,),
        tabular_dim=8,
        projection_dim=8,
        d_model=8,
        n_heads=2,
        n_layers=1,
        ffn_hidden=16,
    )


@pytest.fixture(scope="session")
def small_cohort():
    return generate_synthetic(SyntheticConfig(n_subjects=64, volume_shape=SHAPE, seed=11))


@pytest.fixture(scope="session")
def small_data(small_cohort):
    return prepare_cohort(small_cohort, SMALL_SPLITS, seed=0)


@pytest.fixture
def tiny_cfg(small_data):
    return tiny_config(small_data.tabular.shape[1])


@pytest.fixture
def rng():
    return np.random.default_rng(0)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
