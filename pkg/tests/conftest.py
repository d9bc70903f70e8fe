"""Shared desk-scale fixtures: one dataset and one trained classifier."""

import numpy as np
import pytest

from pwcf.model import MLP, gaussian_blobs, train


@pytest.fixture(scope="session")
def desk_dataset():
    return gaussian_blobs(seed=7)


@pytest.fixture(scope="session")
def desk_model(desk_dataset):
    model, report = train(MLP([2, 16, 16, 3], "tanh", seed=0), desk_dataset, epochs=200, lr=0.3, seed=0)
    assert report.val_accuracy >= 0.95
    return model


@pytest.fixture(scope="session")
def desk_samples(desk_model, desk_dataset):
    """Correctly-classified validation samples, in data order."""
    correct = desk_model.predict(desk_dataset.val_x) == desk_dataset.val_y
    idx = np.nonzero(correct)[0]
    return [(int(i), desk_dataset.val_x[i], int(desk_dataset.val_y[i])) for i in idx]
