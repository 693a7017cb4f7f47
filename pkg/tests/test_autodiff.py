import logging

import numpy as np
import pytest

from spatialib import autodiff as ad
from spatialib.autodiff import Graph, backward, decode_tensor, encode_tensor, guided_relu, vjp
from spatialib.models import ContractError, DomainError, ParseError, ShapeError


@pytest.fixture
def rng():
    """Fixture for a seeded random generator."""
    return np.random.default_rng(0)


# Forward values
def test_softmax_of_equal_logits():
    """Test that softmax([0, 0]) is [0.5, 0.5]."""
    np.testing.assert_allclose(ad.softmax(np.zeros(2)).value, [0.5, 0.5])


def test_relu_forward():
    """Test that relu zeroes negative entries only."""
    np.testing.assert_array_equal(ad.relu(np.array([-1.0, 2.0])).value, [0.0, 2.0])


def test_matmul_identity(rng):
    """Test that the identity matrix leaves any 3 x 3 matrix unchanged."""
    a = rng.standard_normal((3, 3))
    np.testing.assert_array_equal(ad.matmul(np.eye(3), a).value, a)


def test_tensor_is_read_only():
    """Test that tensors are immutable float64 arrays."""
    t = ad.tensor([1, 2, 3])
    assert t.dtype == np.float64
    with pytest.raises(ValueError):
        t[0] = 5.0


def test_caller_arrays_stay_writeable():
    """Test that wrapping or seeding with a caller's array copies it instead of locking it."""
    data = np.arange(4.0)
    value = ad.DiffValue(data)
    data[0] = 10.0
    assert value.value[0] == 0.0
    cotangent = np.ones(3)
    graph = Graph()
    x = graph.variable([1.0, 2.0, 3.0])
    grads = vjp(x * x, [x], cotangent)
    cotangent[0] = 5.0
    np.testing.assert_array_equal(grads[x].value, [2.0, 4.0, 6.0])


def test_tensor_rejects_nan():
    """Test that non-finite data is refused."""
    with pytest.raises(ContractError):
        ad.tensor([1.0, np.nan])


# Backward basics
def test_square_gradient():
    """Test that d(x^2)/dx at 3 is 6."""
    graph = Graph()
    x = graph.variable([3.0])
    grads = backward(ad.reduce_sum(x * x), [x])
    np.testing.assert_allclose(grads[x].value, [6.0])


def test_sigmoid_gradient_at_zero():
    """Test that sum(sigmoid(x)) has gradient 0.25 per element at zero."""
    graph = Graph()
    x = graph.variable(np.zeros(4))
    grads = backward(ad.sigmoid(x).sum(), [x])
    np.testing.assert_allclose(grads[x].value, np.full(4, 0.25))


def test_non_scalar_output_is_rejected():
    """Test that backward refuses a non-scalar output."""
    graph = Graph()
    x = graph.variable(np.ones(3))
    with pytest.raises(ContractError):
        backward(x * 2.0, [x])


def test_constant_in_wrt_is_rejected():
    """Test that wrt entries must require gradients."""
    graph = Graph()
    x = graph.variable(np.ones(2))
    with pytest.raises(ContractError):
        backward(x.sum(), [ad.constant(np.ones(2))])


def test_unreachable_input_gets_zero_gradient(caplog):
    """Test that an unreachable input receives zeros and a warning, not an error."""
    graph = Graph()
    x = graph.variable(np.ones(2))
    y = graph.variable(np.ones(3))
    with caplog.at_level(logging.WARNING, logger="spatialib"):
        grads = backward((x * x).sum(), [x, y])
    np.testing.assert_array_equal(grads[y].value, np.zeros(3))
    assert grads.unreachable == [y]
    assert "unreachable" in caplog.text


def test_gradient_for_intermediate_value():
    """Test that gradients can be requested for values inside the graph."""
    graph = Graph()
    x = graph.variable([1.0, 2.0])
    h = x * 2.0
    grads = backward((h * h).sum(), [h, x])
    np.testing.assert_allclose(grads[h].value, [4.0, 8.0])
    np.testing.assert_allclose(grads[x].value, [8.0, 16.0])


def test_shared_input_accumulates():
    """Test that a value used twice accumulates both contributions."""
    graph = Graph()
    x = graph.variable([2.0])
    grads = backward((x * x + x * 3.0).sum(), [x])
    np.testing.assert_allclose(grads[x].value, [7.0])


def test_shape_error_names_primitive():
    """Test that a shape mismatch names the primitive and its dims."""
    with pytest.raises(ShapeError) as error:
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))
    assert error.value.primitive == "matmul"
    assert (2, 3) in error.value.dims


def test_nonpositive_temperature_is_domain_error():
    """Test that tau <= 0 raises a domain error."""
    with pytest.raises(DomainError):
        ad.softmax(np.zeros(3), tau=0.0)


def test_item_requires_single_element():
    """Test that item() refuses non-scalar values."""
    with pytest.raises(ContractError):
        ad.constant(np.ones(2)).item()


# Finite-difference checks per primitive
CASES = {
    "add_broadcast": (lambda a, b: ad.add(a, b), [(3, 4), (4,)]),
    "sub_broadcast": (lambda a, b: ad.sub(a, b), [(2, 3), (2, 1)]),
    "mul_broadcast": (lambda a, b: ad.mul(a, b), [(3, 4), (1, 4)]),
    "exp": (lambda a: ad.exp(a), [(3, 3)]),
    "sigmoid": (lambda a: ad.sigmoid(a), [(5,)]),
    "relu": (lambda a: ad.relu(a), [(4, 4)]),
    "abs": (lambda a: ad.absolute(a), [(6,)]),
    "sum_axis": (lambda a: ad.reduce_sum(a, axis=1, keepdims=True), [(3, 4)]),
    "mean": (lambda a: ad.reduce_mean(a, axis=0), [(3, 4)]),
    "max_axis": (lambda a: ad.reduce_max(a, axis=(-2, -1), keepdims=True), [(2, 3, 3)]),
    "min_axis": (lambda a: ad.reduce_min(a, axis=0), [(4, 3)]),
    "broadcast_to": (lambda a: ad.broadcast_to(a, (3, 2, 4)), [(2, 1)]),
    "reshape": (lambda a: ad.reshape(a, (2, 6)), [(3, 4)]),
    "transpose": (lambda a: ad.transpose(a, (2, 0, 1)), [(2, 3, 4)]),
    "slice": (lambda a: ad.take_slice(a, axis=1, start=1, stop=3), [(2, 4)]),
    "concatenate": (lambda a, b: ad.concatenate([a, b], axis=1), [(2, 3), (2, 2)]),
    "matmul": (lambda a, b: ad.matmul(a, b), [(2, 3), (3, 4)]),
    "matmul_batched": (lambda a, b: ad.matmul(a, b), [(2, 3, 4), (4, 2)]),
    "softmax": (lambda a: ad.softmax(a, tau=0.7, axis=-1), [(3, 4)]),
    "log_softmax": (lambda a: ad.log_softmax(a, tau=2.0, axis=-1), [(3, 4)]),
    "conv2d": (lambda x, w: ad.conv2d(x, w, stride=1, padding=1), [(2, 2, 5, 5), (3, 2, 3, 3)]),
    "conv2d_strided": (lambda x, w: ad.conv2d(x, w, stride=2, padding=0), [(1, 1, 6, 6), (2, 1, 2, 2)]),
    "im2col": (lambda x: ad.im2col(x, 3, 1, 1), [(1, 2, 4, 4)]),
    "col2im": (lambda c: ad.col2im(c, (1, 1, 4, 4), 2, 2, 0), [(1, 4, 4)]),
    "avg_pool2d": (lambda a: ad.avg_pool2d(a, 2), [(1, 2, 4, 4)]),
    "max_pool2d": (lambda a: ad.max_pool2d(a, 2), [(1, 2, 4, 4)]),
    "upsample2d": (lambda a: ad.upsample2d(a, 2), [(1, 1, 3, 3)]),
    "blur3x3": (lambda a: ad.blur3x3(a), [(2, 5, 5)]),
}


@pytest.mark.parametrize("case", sorted(CASES))
@pytest.mark.parametrize("trial", range(4))
def test_primitive_matches_finite_differences(case, trial, gradcheck):
    """Test that every primitive's gradient matches central differences at random points."""
    fn, shapes = CASES[case]
    rng = np.random.default_rng(100 * trial + len(case))
    gradcheck(fn, *[rng.standard_normal(s) for s in shapes], seed=trial)


@pytest.mark.parametrize("trial", range(4))
def test_positive_domain_primitives(trial, gradcheck):
    """Test log, div and fractional powers on inputs bounded away from zero."""
    rng = np.random.default_rng(trial)
    positive = lambda shape: 0.5 + rng.uniform(size=shape)
    gradcheck(lambda a: ad.log(a), positive((3, 3)))
    gradcheck(lambda a, b: ad.div(a, b), rng.standard_normal((2, 3)), positive((3,)))
    gradcheck(lambda a: ad.power(a, 0.5), positive((4,)))
    gradcheck(lambda a: ad.power(a, 3.0), rng.standard_normal((4,)))


def test_three_layer_network_gradient(gradcheck):
    """Test a dense -> ReLU -> dense -> ReLU -> dense chain against finite differences."""
    rng = np.random.default_rng(11)

    def net(x, w1, w2, w3):
        h = ad.relu(ad.matmul(x, w1))
        h = ad.relu(ad.matmul(h, w2))
        return ad.log_softmax(ad.matmul(h, w3))

    gradcheck(
        net,
        rng.standard_normal((4, 5)),
        rng.standard_normal((5, 6)),
        rng.standard_normal((6, 6)),
        rng.standard_normal((6, 3)),
    )


# Second order
def test_retained_gradient_is_differentiable():
    """Test that d/dx of d(x^3)/dx equals 6x when the graph is retained."""
    graph = Graph()
    x = graph.variable([3.0])
    first = backward(ad.power(x, 3.0).sum(), [x], retain_graph=True)[x]
    np.testing.assert_allclose(first.value, [27.0])
    assert first.requires_grad
    second = backward(first.sum(), [x])[x]
    np.testing.assert_allclose(second.value, [18.0])


def test_detached_gradient_is_constant():
    """Test that without retain_graph the gradient carries no node."""
    graph = Graph()
    x = graph.variable([3.0])
    first = backward((x * x).sum(), [x])[x]
    assert not first.requires_grad


def test_softmax_double_backprop(numeric_grad):
    """Test d/dz sum((J^T v)^2) for softmax against finite differences of the first-order pass."""
    rng = np.random.default_rng(5)
    z0, v = rng.standard_normal(4), rng.standard_normal(4)

    def first_order(z):
        graph = Graph()
        zv = graph.variable(z)
        return float(np.sum(vjp(ad.softmax(zv, tau=0.8), [zv], v)[zv].value ** 2))

    graph = Graph()
    z = graph.variable(z0)
    r = vjp(ad.softmax(z, tau=0.8), [z], v, retain_graph=True)[z]
    analytic = backward((r * r).sum(), [z])[z].value
    np.testing.assert_allclose(analytic, numeric_grad(first_order, z0), rtol=1e-4, atol=1e-9)


# Vector-Jacobian products
def test_vjp_matches_explicit_jacobian(mlp):
    """Test vjp with a random cotangent against a Jacobian built from unit cotangents."""
    rng = np.random.default_rng(2)
    images = rng.standard_normal((1, 1, 2, 2))
    graph = Graph()
    x = graph.variable(images)
    out = mlp.forward(x).logits
    columns = []
    for k in range(3):
        unit = np.zeros((1, 3))
        unit[0, k] = 1.0
        columns.append(vjp(out, [x], unit)[x].value.ravel())
    jacobian = np.stack(columns)
    v = rng.standard_normal((1, 3))
    np.testing.assert_allclose(vjp(out, [x], v)[x].value.ravel(), v[0] @ jacobian, atol=1e-10)


def test_vjp_is_linear_in_cotangent(mlp):
    """Test vjp(a u + b v) = a vjp(u) + b vjp(v)."""
    rng = np.random.default_rng(4)
    graph = Graph()
    x = graph.variable(rng.standard_normal((2, 1, 2, 2)))
    out = mlp.forward(x).posterior
    u, v = rng.standard_normal((2, 3)), rng.standard_normal((2, 3))
    combined = vjp(out, [x], 2.0 * u - 0.5 * v)[x].value
    separate = 2.0 * vjp(out, [x], u)[x].value - 0.5 * vjp(out, [x], v)[x].value
    np.testing.assert_allclose(combined, separate, atol=1e-12)


def test_vjp_cotangent_shape_is_checked():
    """Test that a cotangent of the wrong shape is rejected."""
    graph = Graph()
    x = graph.variable(np.ones(3))
    with pytest.raises(ContractError):
        vjp(x * 2.0, [x], np.ones(4))


# Guided ReLU
def test_guided_relu_drops_negative_gradients():
    """Test that the guided rule zeroes negative incoming gradients only inside the context."""
    graph = Graph()
    x = graph.variable([1.0, 2.0])
    out = (ad.relu(x) * np.array([-1.0, 1.0])).sum()
    with guided_relu():
        guided = backward(out, [x])[x].value
    plain = backward(out, [x])[x].value
    np.testing.assert_array_equal(guided, [0.0, 1.0])
    np.testing.assert_array_equal(plain, [-1.0, 1.0])


# SIBT codec
def test_tensor_codec_round_trip():
    """Test that decode(encode(t)) restores values and reports the next offset."""
    array = np.arange(6, dtype=np.float64).reshape(2, 3)
    blob = encode_tensor(array)
    decoded, offset = decode_tensor(blob)
    np.testing.assert_array_equal(decoded, array)
    assert offset == len(blob)
    assert blob[:4] == b"SIBT"


def test_tensor_codec_truncated():
    """Test that a truncated payload raises a parse error with a byte offset."""
    blob = encode_tensor(np.ones((2, 2)))
    with pytest.raises(ParseError) as error:
        decode_tensor(blob[:-3])
    assert error.value.offset > 0
    assert "byte offset" in str(error.value)


def test_tensor_codec_bad_magic():
    """Test that a stream without the SIBT magic is rejected at offset 0."""
    with pytest.raises(ParseError) as error:
        decode_tensor(b"XXXX" + encode_tensor(np.ones(2))[4:])
    assert error.value.offset == 0
