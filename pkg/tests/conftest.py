import numpy as np
import pytest

from voxelforest.features import FEATURE_LAYOUT
from voxelforest.forest import ForestParams, train_forest


def blobs(rng, n, centers):
    """Unit-variance Gaussian blobs around ``centers``; labels in BRATS order."""
    y = rng.integers(0, len(centers), n)
    X = centers[y] + rng.normal(size=(n, centers.shape[1]))
    return X, np.array([0, 1, 2, 4])[y]


def separated_centers(rng, dim=55, min_dist=10.0):
    while True:
        c = rng.normal(scale=10.0, size=(4, dim))
        d = np.linalg.norm(c[:, None] - c[None], axis=-1)
        if d[np.triu_indices(4, 1)].min() >= min_dist:
            return c


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def stump_model(rng):
    X = rng.normal(size=(40, 55))
    y = np.where(X[:, 3] > 0, 4, 0)
    return train_forest(X, y, ForestParams(n_trees=1, max_depth=1, features_per_split=55, seed=3),
                        layout=FEATURE_LAYOUT)


def pytest_terminal_summary(terminalreporter):
    try:
        import test_acceptance
    except ImportError:
        return
    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in test_acceptance.RESULTS:
            terminalreporter.write_line(line)
