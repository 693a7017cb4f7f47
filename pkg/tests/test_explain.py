import numpy as np
import pytest

from spatialib.explain import (
    METHODS,
    difference_map,
    emit_heatmap,
    explain,
    integrated_gradients,
    scorecam_weights,
)
from spatialib.models import METHOD_IDS, ContractError, LayerSpec, SaliencyMap
from spatialib.network import Classifier, build_linear, build_small_cnn
from spatialib.utils import read_pgm


@pytest.fixture
def image():
    """Fixture for a 1 x 16 x 16 image in [0, 1]."""
    return np.random.default_rng(5).uniform(size=(1, 16, 16))


@pytest.fixture
def cnn():
    """Fixture for a small CNN with four feature maps."""
    return build_small_cnn(channels=4, classes=3, image_side=16, seed=0)


def _zeroed(model, *names, fill=0.0):
    params = dict(model.params)
    for name in names:
        params[name] = np.full_like(params[name], fill)
    return model.with_params(params)


def _pooled_head(conv_weight, conv_bias, dense_weight):
    """1x1 conv, ReLU, global 4x4 average and a dense head, capturing the ReLU output."""
    out_channels, in_channels = conv_weight.shape[:2]
    layers = [
        LayerSpec(name="conv", kind="conv", in_size=in_channels, out_size=out_channels, kernel=1),
        LayerSpec(name="act", kind="relu"),
        LayerSpec(name="pool", kind="avgpool", kernel=4),
        LayerSpec(name="flatten", kind="flatten"),
        LayerSpec(name="dense", kind="dense", in_size=out_channels, out_size=len(dense_weight)),
    ]
    params = {
        "conv.weight": conv_weight,
        "conv.bias": conv_bias,
        "dense.weight": dense_weight,
        "dense.bias": np.zeros(len(dense_weight)),
    }
    return Classifier(layers, params, (in_channels, 4, 4), len(dense_weight), capture_layer="conv")


# Registry
def test_every_method_is_registered():
    """Test that every method id has an implementation."""
    assert set(METHODS) == set(METHOD_IDS)


def test_unknown_method(cnn, image):
    """Test that an unknown method id is a contract error."""
    with pytest.raises(ContractError):
        explain(cnn, image, "lime")


def test_invalid_class(cnn, image):
    """Test that a class index outside [0, C) is a contract error."""
    with pytest.raises(ContractError):
        explain(cnn, image, "saliency", c=3)
    with pytest.raises(ContractError):
        explain(cnn, image, "saliency", c=-1)


@pytest.mark.parametrize("method_id", METHOD_IDS)
def test_maps_are_normalized(cnn, image, method_id):
    """Test that every method returns an h x w map in [0, 1] for the predicted class."""
    smap = explain(cnn, image, method_id)
    assert smap.scores.shape == (16, 16)
    assert smap.scores.min() >= 0.0 and smap.scores.max() <= 1.0
    assert smap.method == method_id
    assert smap.target == int(cnn.predict(image[None])[0])


# Gradient methods
def test_zero_weights_give_zero_saliency():
    """Test that a model ignoring its input has an all-zero saliency map."""
    model = build_linear((1, 4, 4), 3, weight=np.zeros((3, 16)))
    smap = explain(model, np.ones((1, 4, 4)), "saliency")
    np.testing.assert_array_equal(smap.scores, np.zeros((4, 4)))


def test_saliency_ignores_logit_shift():
    """Test that adding one constant to every logit leaves the saliency unchanged."""
    rng = np.random.default_rng(0)
    weight = rng.standard_normal((3, 16))
    x = rng.uniform(size=(1, 4, 4))
    plain = explain(build_linear((1, 4, 4), 3, weight=weight), x, "saliency", c=1)
    shifted = explain(build_linear((1, 4, 4), 3, weight=weight, bias=np.full(3, 7.5)), x, "saliency", c=1)
    np.testing.assert_allclose(plain.raw, shifted.raw, atol=1e-12)


def test_saliency_matches_finite_differences():
    """Test that the saliency gradient agrees with central differences of the posterior."""
    rng = np.random.default_rng(4)
    model = build_linear((1, 4, 4), 3, weight=0.5 * rng.standard_normal((3, 16)))
    x = rng.uniform(size=(1, 4, 4))
    step = 1e-6
    numeric = np.zeros((4, 4))
    for i in range(4):
        for j in range(4):
            up, down = x.copy(), x.copy()
            up[0, i, j] += step
            down[0, i, j] -= step
            numeric[i, j] = (model.posterior(up[None])[0, 1] - model.posterior(down[None])[0, 1]) / (2 * step)
    smap = explain(model, x, "saliency", c=1)
    np.testing.assert_allclose(smap.raw, numeric, atol=1e-8)
    np.testing.assert_allclose(smap.scores, np.abs(numeric) / np.abs(numeric).max(), atol=1e-6)


def test_guided_equals_saliency_without_relu():
    """Test that guided backprop and saliency coincide on a model without ReLU."""
    rng = np.random.default_rng(1)
    model = build_linear((1, 4, 4), 3, weight=rng.standard_normal((3, 16)))
    x = rng.uniform(size=(1, 4, 4))
    np.testing.assert_array_equal(
        explain(model, x, "guided_backprop", c=2).raw, explain(model, x, "saliency", c=2).raw
    )


def test_guided_drops_negative_gradients():
    """Test that guided backprop zeroes a negative gradient arriving at an active ReLU."""
    layers = [
        LayerSpec(name="flatten", kind="flatten"),
        LayerSpec(name="hidden", kind="dense", in_size=1, out_size=1),
        LayerSpec(name="act", kind="relu"),
        LayerSpec(name="head", kind="dense", in_size=1, out_size=2),
    ]
    params = {
        "hidden.weight": np.ones((1, 1)),
        "hidden.bias": np.zeros(1),
        "head.weight": np.array([[-1.0], [1.0]]),
        "head.bias": np.zeros(2),
    }
    model = Classifier(layers, params, (1, 1, 1), 2)
    x = np.ones((1, 1, 1))
    assert explain(model, x, "saliency", c=0, score="logit").raw[0, 0] == -1.0
    assert explain(model, x, "guided_backprop", c=0, score="logit").raw[0, 0] == 0.0
    assert explain(model, x, "guided_backprop", c=1, score="logit").raw[0, 0] == 1.0


def test_integrated_gradients_of_linear_logit():
    """Test that IG of a linear logit is exactly ``W_c * x``."""
    rng = np.random.default_rng(2)
    weight = rng.standard_normal((3, 16))
    x = rng.uniform(size=(1, 4, 4))
    smap = integrated_gradients(build_linear((1, 4, 4), 3, weight=weight), x, c=0, score="logit", steps=8)
    np.testing.assert_allclose(smap.raw, weight[0].reshape(4, 4) * x[0], atol=1e-12)
    assert smap.raw.sum() == pytest.approx(weight[0] @ x.ravel())


def test_integrated_gradients_at_baseline():
    """Test that x equal to the baseline gives an all-zero attribution."""
    model = build_linear((1, 4, 4), 3, weight=np.random.default_rng(3).standard_normal((3, 16)))
    x = np.full((1, 4, 4), 0.4)
    smap = integrated_gradients(model, x, c=0, baseline=x)
    np.testing.assert_array_equal(smap.raw, np.zeros((4, 4)))
    np.testing.assert_array_equal(smap.scores, np.zeros((4, 4)))


def test_integrated_gradients_completeness():
    """Test that the attributions sum to ``p_c(x) - p_c(0)`` within 1e-3 relative error."""
    weight = np.stack([np.full(16, 0.2), np.zeros(16), np.full(16, -0.2)])
    model = build_linear((1, 4, 4), 3, weight=weight)
    x = np.full((1, 4, 4), 0.5)
    smap = integrated_gradients(model, x, c=0, steps=64)
    expected = model.posterior(x[None])[0, 0] - model.posterior(np.zeros((1, 1, 4, 4)))[0, 0]
    assert smap.raw.sum() == pytest.approx(expected, rel=1e-3)


def test_integrated_gradients_needs_eight_steps(cnn, image):
    """Test that fewer than 8 Riemann samples are refused."""
    with pytest.raises(ContractError):
        integrated_gradients(cnn, image, steps=4)


# CAM methods
@pytest.mark.parametrize("side", [16, 32, 64])
def test_gradcam_is_upsampled(side):
    """Test that GradCAM maps come back at input resolution."""
    model = build_small_cnn(channels=2, classes=3, image_side=side, seed=1)
    x = np.random.default_rng(side).uniform(size=(1, side, side))
    assert explain(model, x, "gradcam").scores.shape == (side, side)


@pytest.mark.parametrize("method_id", ["gradcam", "gradcam_pp"])
def test_zero_dense_weights_give_zero_cam(cnn, image, method_id):
    """Test that a head ignoring the features gives an all-zero CAM."""
    model = _zeroed(cnn, "dense.weight")
    np.testing.assert_array_equal(explain(model, image, method_id).scores, np.zeros((16, 16)))


def test_cam_needs_capture_layer():
    """Test that CAM methods refuse models without convolutions."""
    model = build_linear((1, 4, 4), 3)
    with pytest.raises(ContractError):
        explain(model, np.ones((1, 4, 4)), "gradcam")


def test_gradcam_single_channel_is_relu_activation():
    """Test that one channel with a uniform gradient gives a map proportional to ``ReLU(A)``."""
    model = _pooled_head(np.ones((1, 1, 1, 1)), np.array([-0.5]), np.array([[2.0], [-1.0]]))
    x = np.linspace(0.0, 1.0, 16).reshape(1, 4, 4)
    activation = np.maximum(x[0] - 0.5, 0.0)
    smap = explain(model, x, "gradcam", c=0, score="logit")
    np.testing.assert_allclose(smap.raw, activation * 2.0 / 16, atol=1e-12)
    np.testing.assert_allclose(smap.scores, activation / activation.max(), atol=1e-12)


def test_gradcam_pp_matches_gradcam_for_uniform_gradients():
    """Test that GradCAM++ ranks pixels like GradCAM when every channel sees the same constant gradient."""
    x0 = np.random.default_rng(6).uniform(size=(4, 4))
    x = np.stack([x0, x0[::-1, ::-1]])
    model = _pooled_head(np.eye(2).reshape(2, 2, 1, 1), np.zeros(2), np.array([[1.0, 1.0], [-1.0, 0.0]]))
    plain = explain(model, x, "gradcam", c=0, score="logit")
    plus = explain(model, x, "gradcam_pp", c=0, score="logit")
    np.testing.assert_allclose(plus.scores, plain.scores, atol=1e-12)
    g = 1.0 / 16
    weight = 16 * g**3 / (2 * g**2 + g**3 * x0.sum() + 1e-8)
    np.testing.assert_allclose(plus.raw, weight * x.sum(axis=0), rtol=1e-9)


def test_scorecam_counts_forward_passes(cnn, image):
    """Test that ScoreCAM spends one pass per channel plus the baseline."""
    assert explain(cnn, image, "scorecam").forward_passes == 5


def test_scorecam_constant_activations(cnn, image):
    """Test that constant activations give empty masks and an all-zero map."""
    model = _zeroed(cnn, "conv1.weight", "conv2.weight", "conv3.weight")
    model = _zeroed(model, "conv3.bias", fill=0.5)
    smap = explain(model, image, "scorecam")
    np.testing.assert_array_equal(smap.scores, np.zeros((16, 16)))


def test_scorecam_favours_object_channel():
    """Test that the channel lighting up on the object gets the largest ScoreCAM weight."""
    x = np.full((1, 4, 4), 0.2)
    x[0, :, :2] = 1.0
    conv_weight = np.array([1.0, -1.0]).reshape(2, 1, 1, 1)
    model = _pooled_head(conv_weight, np.array([-0.5, 0.5]), np.array([[4.0, 0.0], [0.0, 4.0]]))
    weights, masks = scorecam_weights(model, x[None], 0, score="logit")
    np.testing.assert_allclose(weights, [1.0, 0.0], atol=1e-12)
    assert int(np.argmax(weights)) == 0
    np.testing.assert_array_equal(masks[0], (x[0] == 1.0).astype(float))
    smap = explain(model, x, "scorecam", c=0, score="logit")
    np.testing.assert_allclose(smap.scores, (x[0] == 1.0).astype(float), atol=1e-12)


# Mask map
def test_mask_map_is_sigmoid_range(cnn, image):
    """Test that the raw mask stays strictly inside (0, 1)."""
    smap = explain(cnn, image, "ours", threshold=0.3, sharpness=0.2)
    assert np.all(smap.raw > 0.0) and np.all(smap.raw < 1.0)


# Output
def test_emit_heatmap(tmp_path):
    """Test that the heatmap and its overlay are written and the heatmap reads back."""
    scores = np.linspace(0.0, 1.0, 16).reshape(4, 4)
    smap = SaliencyMap(scores=scores, method="saliency", target=0)
    heat_path, overlay_path = emit_heatmap(smap, np.full((1, 4, 4), 0.5), tmp_path / "maps", "s0")
    assert heat_path.name == "saliency_s0.pgm"
    assert overlay_path.exists()
    np.testing.assert_allclose(read_pgm(heat_path), scores, atol=0.5 / 255 + 1e-12)


def test_difference_map_colors():
    """Test that red marks a higher S-IB score and blue a higher baseline score."""
    baseline = SaliencyMap(scores=np.array([[0.0, 1.0]]), method="saliency", target=0)
    sib = SaliencyMap(scores=np.array([[1.0, 0.0]]), method="saliency", target=0)
    rgb = difference_map(baseline, sib)
    np.testing.assert_array_equal(rgb[0, 0], [1.0, 0.0, 0.0])
    np.testing.assert_array_equal(rgb[0, 1], [0.0, 0.0, 1.0])


def test_difference_map_shape_mismatch():
    """Test that maps of different shapes cannot be compared."""
    a = SaliencyMap(scores=np.zeros((2, 2)), method="saliency", target=0)
    b = SaliencyMap(scores=np.zeros((3, 3)), method="saliency", target=0)
    with pytest.raises(ContractError):
        difference_map(a, b)
