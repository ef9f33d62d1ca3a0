import numpy as np
import pytest

from sake.model import SakeModel


def grad_close(analytic, numeric, rel=1e-4, abs_=1e-7):
    """Per entry: relative error below ``rel`` or absolute error below ``abs_``."""
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    err = np.abs(analytic - numeric)
    return bool(np.all((err < abs_) | (err <= rel * np.abs(numeric))))


@pytest.fixture
def rng():
    return np.random.default_rng(2666)


@pytest.fixture(scope="module")
def small_model():
    return SakeModel(2, hidden=16, depth=2, dim=3, seed=11)
