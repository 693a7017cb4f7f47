import numpy as np
import pytest

from spatialib import autodiff as ad
from spatialib.autodiff import Graph
from spatialib.models import LayerSpec
from spatialib.network import Classifier


def central_difference(func, array: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of one array."""
    array = np.array(array, dtype=np.float64)
    grad = np.zeros_like(array)
    for index in np.ndindex(array.shape):
        original = array[index]
        array[index] = original + h
        upper = func(array.copy())
        array[index] = original - h
        lower = func(array.copy())
        array[index] = original
        grad[index] = (upper - lower) / (2.0 * h)
    return grad


@pytest.fixture
def numeric_grad():
    """Fixture returning the central-difference helper."""
    return central_difference


@pytest.fixture
def gradcheck():
    """Fixture comparing backward() with central differences of ``sum(fn(*inputs) * w)``."""

    def check(fn, *arrays, rtol=1e-5, atol=1e-8, seed=7):
        arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
        probe = fn(*[ad.constant(a) for a in arrays])
        weights = np.random.default_rng(seed).standard_normal(probe.shape)

        graph = Graph()
        variables = [graph.variable(a) for a in arrays]
        loss = ad.reduce_sum(fn(*variables) * weights)
        grads = ad.backward(loss, variables)

        for position, variable in enumerate(variables):

            def scalar(value, position=position):
                inputs = [ad.constant(a) for a in arrays]
                inputs[position] = ad.constant(value)
                return float(np.sum(fn(*inputs).value * weights))

            expected = central_difference(scalar, arrays[position])
            np.testing.assert_allclose(grads[variable].value, expected, rtol=rtol, atol=atol)

    return check


@pytest.fixture
def mlp():
    """Fixture for a flatten -> dense -> ReLU -> dense classifier on 1 x 2 x 2 images."""
    rng = np.random.default_rng(3)
    layers = [
        LayerSpec(name="flatten", kind="flatten"),
        LayerSpec(name="hidden", kind="dense", in_size=4, out_size=5),
        LayerSpec(name="act", kind="relu"),
        LayerSpec(name="head", kind="dense", in_size=5, out_size=3),
    ]
    params = {
        "hidden.weight": rng.standard_normal((5, 4)),
        "hidden.bias": rng.standard_normal(5) * 0.1,
        "head.weight": rng.standard_normal((3, 5)),
        "head.bias": np.zeros(3),
    }
    return Classifier(layers, params, (1, 2, 2), 3)
