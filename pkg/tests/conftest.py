import numpy as np
import pytest

from aicare.model import ModelConfig, init_params
from aicare.records import Cohort
from aicare.synthetic import generate_synthetic, pd_default_spec, separable_spec


@pytest.fixture(scope="session")
def tiny_model():
    """A small untrained model plus its config (4 features, hidden 5)."""
    config = ModelConfig(num_features=4, baseline_dim=4, hidden_size=5, seed=7)
    return init_params(config), config


@pytest.fixture(scope="session")
def small_cohort() -> Cohort:
    """36 patients from the default generator, enough for most pipelines."""
    cohort, _ = generate_synthetic(pd_default_spec(36), seed=11)
    return cohort


@pytest.fixture(scope="session")
def separable_cohort() -> Cohort:
    cohort, _ = generate_synthetic(separable_spec(40), seed=5)
    return cohort


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
