import numpy as np
import pytest

from oculogate.data import default_cohort_spec, generate_cohort
from oculogate.pipeline import run_training_pipeline
from oculogate.train import TrainConfig


@pytest.fixture(scope="session")
def small_cohort():
    return generate_cohort(default_cohort_spec(n_patients=300, seed=404))


@pytest.fixture(scope="session")
def small_pipeline(small_cohort):
    """Quickly trained model for tests that need realistic outputs."""
    return run_training_pipeline(small_cohort,
                                 TrainConfig(max_epochs=8, seed=31))


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b) / denom))
