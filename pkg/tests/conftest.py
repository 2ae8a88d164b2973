import numpy as np
import pytest

from model import make_counterexample_model, make_linear_model, make_power_model


@pytest.fixture
def ou():
    model, _ = make_linear_model(np.eye(1))
    return model


@pytest.fixture
def power2():
    model, _ = make_power_model(1.0, 2.0, 2)
    return model


@pytest.fixture
def counterexample():
    model, _ = make_counterexample_model(1.0, 3.0, 1)
    return model
