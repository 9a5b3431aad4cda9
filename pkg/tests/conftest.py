import sys
from pathlib import Path

import numpy as np
import pytest
from scipy.special import expit

sys.path.insert(0, str(Path(__file__).parent))

from syndi import Column, dataset_from_arrays


def make_sim1_internal(n=200, seed=1, intercept=-1.0):
    """Internal-style dataset: correlated (x1, x2, b1), binary b2, logistic y."""
    rng = np.random.default_rng(seed)
    L = np.linalg.cholesky(np.array([[1, 0.3, 0.3], [0.3, 1, 0.3], [0.3, 0.3, 1]]))
    z = rng.standard_normal((n, 3)) @ L.T
    x1, x2, b1 = z[:, 0], z[:, 1], z[:, 2]
    b2 = (rng.random(n) < expit(0.1 * x1 + 0.2 * x2 + 0.3 * b1)).astype(float)
    y = (rng.random(n) < expit(intercept - x1 - x2 - b1 - b2)).astype(float)
    cols = [Column("y", "y"), Column("x1", "x"), Column("x2", "x"),
            Column("b1", "b"), Column("b2", "b")]
    return dataset_from_arrays(cols, np.column_stack([y, x1, x2, b1, b2]))


@pytest.fixture
def sim1_internal():
    return make_sim1_internal()


@pytest.fixture
def rng():
    return np.random.default_rng(20220500)
