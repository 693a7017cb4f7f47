from pathlib import Path
from typing import Any, Callable, Dict, Optional, Tuple

import numpy as np
from scipy import ndimage

# Setup logging
import logging

logger = logging.getLogger("spatialib")

from spatialib import autodiff as ad
from spatialib.autodiff import Graph, guided_relu
from spatialib.models import ContractError, SaliencyMap
from spatialib.network import Classifier, ForwardPass
from spatialib.sib import compute_vjp_decoding, generate_mask
from spatialib.utils import write_pgm, write_ppm

GRADCAM_PP_EPS = 1e-8

METHODS: Dict[str, Callable] = {}


def method(method_id: str):
    """Decorator registering an attribution method under ``method_id``."""

    def decorator(func: Callable) -> Callable:
        METHODS[method_id] = func
        return func

    return decorator


def _prepare(model: Classifier, x: Any, c: Optional[int]) -> Tuple[np.ndarray, int]:
    image = np.asarray(x, dtype=np.float64)
    if image.ndim == len(model.input_shape) - 1:
        image = image[None]
    if image.shape != model.input_shape:
        raise ContractError(f"image shape {image.shape} does not match {model.input_shape}")
    batch = image[None]
    if c is None:
        c = int(model.predict(batch)[0])
    if not 0 <= c < model.classes:
        raise ContractError(f"class index {c} outside [0, {model.classes})")
    return batch, c


def _class_score(fwd: ForwardPass, c: int, score: str):
    if score not in ("posterior", "logit"):
        raise ContractError(f"score must be posterior or logit, got {score!r}")
    source = fwd.posterior if score == "posterior" else fwd.logits
    return ad.reduce_sum(ad.take_slice(source, axis=1, start=c, stop=c + 1))


def _normalized(values: np.ndarray) -> np.ndarray:
    values = np.maximum(values, 0.0)
    if not np.all(np.isfinite(values)):
        raise ContractError("attribution contains non-finite values")
    peak = values.max()
    return values / peak if peak > 0 else np.zeros_like(values)


def _upsample(cam: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    if cam.shape == tuple(shape):
        return cam
    factors = (shape[0] / cam.shape[0], shape[1] / cam.shape[1])
    return ndimage.zoom(cam, factors, order=1, mode="nearest", grid_mode=True)


def _input_gradient(model: Classifier, batch: np.ndarray, c: int, tau: float, score: str) -> np.ndarray:
    graph = Graph()
    x = graph.variable(batch)
    fwd = model.forward(x, tau=tau)
    return ad.backward(_class_score(fwd, c, score), [x])[x].value


@method("saliency")
def saliency(model: Classifier, x: Any, c: Optional[int] = None, tau: float = 1.0, score: str = "posterior") -> SaliencyMap:
    """``|d p_c / d x|``, max over channels.

    :param model: Classifier
    :param x: 1 x h x w image
    :param c: Target class, the predicted class when omitted
    :param tau: Softmax temperature
    :param score: ``posterior`` (default) or ``logit``
    :rtype: SaliencyMap
    """
    batch, c = _prepare(model, x, c)
    grad = _input_gradient(model, batch, c, tau, score)[0]
    return SaliencyMap(
        scores=_normalized(np.abs(grad).max(axis=0)), raw=grad.max(axis=0), method="saliency", target=c
    )


@method("guided_backprop")
def guided_backprop(
    model: Classifier, x: Any, c: Optional[int] = None, tau: float = 1.0, score: str = "posterior"
) -> SaliencyMap:
    """Saliency with ReLU backward rules that also drop negative incoming gradients."""
    batch, c = _prepare(model, x, c)
    with guided_relu():
        grad = _input_gradient(model, batch, c, tau, score)[0]
    return SaliencyMap(
        scores=_normalized(np.abs(grad).max(axis=0)),
        raw=grad.max(axis=0),
        method="guided_backprop",
        target=c,
    )


@method("integrated_gradients")
def integrated_gradients(
    model: Classifier,
    x: Any,
    c: Optional[int] = None,
    tau: float = 1.0,
    score: str = "posterior",
    steps: int = 32,
    baseline: Optional[np.ndarray] = None,
) -> SaliencyMap:
    """``(x - b)`` times the mean gradient at midpoint samples of the straight path from b to x.

    ``raw`` holds the signed attributions, their sum approximates ``f_c(x) - f_c(b)``.

    :param steps: Riemann samples m, at least 8
    :param baseline: Same shape as x, zeros when omitted
    :raises ContractError: For m < 8 or a baseline of the wrong shape
    """
    if steps < 8:
        raise ContractError(f"integrated_gradients needs at least 8 steps, got {steps}")
    batch, c = _prepare(model, x, c)
    base = np.zeros_like(batch) if baseline is None else np.asarray(baseline, dtype=np.float64).reshape(batch.shape)
    alphas = (np.arange(steps) + 0.5) / steps
    path = base + alphas[:, None, None, None] * (batch - base)
    grads = _input_gradient(model, path, c, tau, score)
    attribution = ((batch - base) * grads.mean(axis=0, keepdims=True))[0]
    return SaliencyMap(
        scores=_normalized(np.abs(attribution).max(axis=0)),
        raw=attribution.sum(axis=0),
        method="integrated_gradients",
        target=c,
    )


def _capture_gradients(model: Classifier, batch: np.ndarray, c: int, tau: float, score: str):
    if model.capture_layer is None:
        raise ContractError("CAM methods need a model with a capture layer")
    graph = Graph()
    x = graph.variable(batch)
    fwd = model.forward(x, tau=tau)
    activation = fwd.captured
    grads = ad.backward(_class_score(fwd, c, score), [activation])
    return activation.value[0], grads[activation].value[0]


@method("gradcam")
def gradcam(model: Classifier, x: Any, c: Optional[int] = None, tau: float = 1.0, score: str = "posterior") -> SaliencyMap:
    """``ReLU(sum_k w_k A_k)`` with ``w_k`` the spatial mean of ``d f_c / d A_k``, bilinearly upsampled."""
    batch, c = _prepare(model, x, c)
    activation, grad = _capture_gradients(model, batch, c, tau, score)
    weights = grad.mean(axis=(1, 2))
    cam = np.maximum(np.tensordot(weights, activation, axes=1), 0.0)
    cam = _upsample(cam, model.input_shape[-2:])
    return SaliencyMap(scores=_normalized(cam), raw=cam, method="gradcam", target=c)


@method("gradcam_pp")
def gradcam_pp(model: Classifier, x: Any, c: Optional[int] = None, tau: float = 1.0, score: str = "posterior") -> SaliencyMap:
    """GradCAM with pixel-wise weights ``alpha = g^2 / (2 g^2 + sum(A g^3) + eps)`` applied to ``ReLU(g)``."""
    batch, c = _prepare(model, x, c)
    activation, grad = _capture_gradients(model, batch, c, tau, score)
    denominator = 2.0 * grad**2 + (activation * grad**3).sum(axis=(1, 2), keepdims=True)
    alpha = grad**2 / (denominator + GRADCAM_PP_EPS)
    weights = (alpha * np.maximum(grad, 0.0)).sum(axis=(1, 2))
    cam = np.maximum(np.tensordot(weights, activation, axes=1), 0.0)
    cam = _upsample(cam, model.input_shape[-2:])
    return SaliencyMap(scores=_normalized(cam), raw=cam, method="gradcam_pp", target=c)


def scorecam_weights(
    model: Classifier, batch: np.ndarray, c: int, tau: float = 1.0, score: str = "posterior"
) -> Tuple[np.ndarray, np.ndarray]:
    """Per-channel ScoreCAM weights and the K x h x w masks they were measured with.

    Each mask is an upsampled, min-max normalized activation map, the weight is the
    class score on the masked input minus the score on the all-zero input.
    """
    if model.capture_layer is None:
        raise ContractError("CAM methods need a model with a capture layer")
    activation = model.forward(batch, tau=tau).captured.value[0]
    side = model.input_shape[-2:]
    masks = []
    for channel in activation:
        up = _upsample(channel, side)
        spread = up.max() - up.min()
        masks.append((up - up.min()) / spread if spread > 0 else np.zeros_like(up))
    masks = np.stack(masks)
    masked = batch * masks[:, None, :, :]
    scoring = np.concatenate([masked, np.zeros_like(batch)])
    fwd = model.forward(scoring, tau=tau)
    values = (fwd.posterior if score == "posterior" else fwd.logits).value[:, c]
    return values[:-1] - values[-1], masks


@method("scorecam")
def scorecam(model: Classifier, x: Any, c: Optional[int] = None, tau: float = 1.0, score: str = "posterior") -> SaliencyMap:
    """``ReLU(sum_k w_k mask_k)`` with the weights of :func:`scorecam_weights`.

    ``forward_passes`` counts the K masked passes plus the baseline pass.
    """
    batch, c = _prepare(model, x, c)
    weights, masks = scorecam_weights(model, batch, c, tau, score)
    cam = np.maximum(np.tensordot(weights, masks, axes=1), 0.0)
    return SaliencyMap(
        scores=_normalized(cam), raw=cam, method="scorecam", target=c, forward_passes=len(masks) + 1
    )


@method("ours")
def mask_map(
    model: Classifier,
    x: Any,
    c: Optional[int] = None,
    tau: float = 1.0,
    threshold: float = 0.5,
    sharpness: float = 0.1,
) -> SaliencyMap:
    """The S-IB mask head M rendered as a saliency map (R decoded with the current posterior)."""
    batch, c = _prepare(model, x, c)
    decoding = compute_vjp_decoding(model, batch, tau, retain_graph=False)
    mask = generate_mask(decoding.r, threshold, sharpness).value[0]
    return SaliencyMap(scores=_normalized(mask), raw=mask, method="ours", target=c)


def explain(model: Classifier, x: Any, method_id: str, c: Optional[int] = None, **options) -> SaliencyMap:
    """Dispatch to a registered method.

    .. code-block:: python

        smap = explain(model, sample.image, "gradcam")

    :raises ContractError: For an unknown method id
    """
    func = METHODS.get(method_id)
    if func is None:
        raise ContractError(f"unknown method {method_id!r}, expected one of {sorted(METHODS)}")
    return func(model, x, c, **options)


def overlay(smap: SaliencyMap, image: np.ndarray) -> np.ndarray:
    """Grayscale image tinted red by the scores, h x w x 3."""
    gray = np.asarray(image, dtype=np.float64).reshape(smap.scores.shape)
    heat = smap.scores[..., None]
    return gray[..., None] * (1.0 - 0.5 * heat) + 0.5 * heat * np.array([1.0, 0.0, 0.0])


def emit_heatmap(smap: SaliencyMap, image: np.ndarray, out_dir, sample_id: str) -> Tuple[Path, Path]:
    """Write ``{method}_{sample_id}.pgm`` and the overlay ``{method}_{sample_id}.ppm``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    heat_path = out_dir / f"{smap.method}_{sample_id}.pgm"
    overlay_path = out_dir / f"{smap.method}_{sample_id}.ppm"
    write_pgm(heat_path, smap.scores)
    write_ppm(overlay_path, overlay(smap, image))
    logger.info(f"wrote {heat_path} and {overlay_path}")
    return heat_path, overlay_path


def difference_map(map_baseline: SaliencyMap, map_sib: SaliencyMap) -> np.ndarray:
    """Signed difference as RGB: red where the S-IB map is higher, blue where the baseline is."""
    if map_baseline.scores.shape != map_sib.scores.shape:
        raise ContractError("difference map needs maps of equal shape")
    diff = map_sib.scores - map_baseline.scores
    return np.stack([np.maximum(diff, 0.0), np.zeros_like(diff), np.maximum(-diff, 0.0)], axis=-1)


def emit_difference_map(map_baseline: SaliencyMap, map_sib: SaliencyMap, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_ppm(path, difference_map(map_baseline, map_sib))
    return path
