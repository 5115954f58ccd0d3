import numpy as np
import pytest

from dfu import data, models


@pytest.fixture(scope="session")
def blob_binary():
    """Separable two-class blobs shared by the slower integration tests."""
    ds = data.synth_blobs(400, 8, 2, seed=11)
    return ds


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


def make_logistic(d, lam, n_classes=2):
    return models.LossModel(
        "regularized_logistic", n_features=d, n_classes=n_classes, lambda_reg=lam
    )
