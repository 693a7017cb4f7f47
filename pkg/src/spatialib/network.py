import struct
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict

# Setup logging
import logging

logger = logging.getLogger("spatialib")

from spatialib import autodiff as ad
from spatialib.autodiff import DiffValue, Graph
from spatialib.models import (
    SUPPORTED_SIDES,
    ConfigError,
    ContractError,
    LayerSpec,
    OptimState,
    ParseError,
)

PARAMS_MAGIC = b"SIBP"


class ForwardPass(BaseModel):
    """
    Result of :meth:`Classifier.forward`.

    :param logits: N x C logits
    :param posterior: N x C ``softmax(logits / tau)``
    :param captured: Post-ReLU activation of the capture layer, None for models without convolutions
    :param params: The parameter values the pass was evaluated with
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    logits: Any
    posterior: Any
    captured: Any = None
    params: Dict[str, Any] = {}


class Classifier:
    """Sequential image classifier evaluated through the autodiff primitives.

    :param layers: Layer sequence
    :param params: Named parameters in stable order (``<layer>.weight``, ``<layer>.bias``)
    :param input_shape: Per-sample input shape, ``(1, h, w)``
    :param classes: Number of output classes
    :param capture_layer: Name of the last convolution, whose post-ReLU output is captured for CAM methods
    :type layers: List[LayerSpec]
    :type params: Dict[str, numpy.ndarray]
    :type input_shape: Tuple[int, ...]
    :type classes: int
    :type capture_layer: str, optional
    """

    def __init__(
        self,
        layers: Sequence[LayerSpec],
        params: Mapping[str, np.ndarray],
        input_shape: Tuple[int, ...],
        classes: int,
        capture_layer: Optional[str] = None,
    ):
        self.layers: List[LayerSpec] = list(layers)
        self.params: Dict[str, np.ndarray] = {k: ad.tensor(v) for k, v in params.items()}
        self.input_shape = tuple(input_shape)
        self.classes = classes
        self.capture_layer = capture_layer

    def __repr__(self) -> str:
        kinds = ",".join(layer.kind for layer in self.layers)
        return f"Classifier(input={self.input_shape}, classes={self.classes}, layers=[{kinds}])"

    def param_names(self) -> List[str]:
        return list(self.params)

    def with_params(self, params: Mapping[str, np.ndarray]) -> "Classifier":
        """Copy of this classifier carrying ``params``, which must match names and shapes.

        :raises ContractError: On any name or shape mismatch
        """
        if set(params) != set(self.params):
            raise ContractError(
                f"parameter names differ: expected {sorted(self.params)}, got {sorted(params)}"
            )
        for name, value in self.params.items():
            if np.shape(params[name]) != value.shape:
                raise ContractError(
                    f"parameter {name}: expected shape {value.shape}, got {np.shape(params[name])}"
                )
        ordered = {name: params[name] for name in self.params}
        return Classifier(self.layers, ordered, self.input_shape, self.classes, self.capture_layer)

    def bind(self, graph: Graph) -> Dict[str, DiffValue]:
        """Register every parameter as a variable of ``graph``."""
        return {name: graph.variable(value, name=name) for name, value in self.params.items()}

    def forward(
        self,
        x: Any,
        tau: float = 1.0,
        params: Optional[Mapping[str, DiffValue]] = None,
    ) -> ForwardPass:
        """Run the network on a batch.

        :param x: N x 1 x h x w images (array or DiffValue), a single 1 x h x w image is batched
        :param tau: Softmax temperature, > 0
        :param params: Bound parameters from :meth:`bind`; constants when omitted
        :return: Logits, posterior and captured activation
        :rtype: ForwardPass
        :raises ContractError: If ``x`` does not match the input shape
        """
        x = ad.constant(x)
        if x.shape == self.input_shape:
            x = ad.reshape(x, (1,) + self.input_shape)
        if x.ndim != len(self.input_shape) + 1 or x.shape[1:] != self.input_shape:
            raise ContractError(f"input shape {x.shape} does not match N x {self.input_shape}")
        if params is None:
            params = {name: ad.constant(value) for name, value in self.params.items()}

        h, captured, capturing = x, None, False
        for layer in self.layers:
            if layer.kind == "conv":
                weight, bias = params[f"{layer.name}.weight"], params[f"{layer.name}.bias"]
                h = ad.conv2d(h, weight, stride=layer.stride, padding=layer.padding)
                h = h + ad.reshape(bias, (1, layer.out_size, 1, 1))
                capturing = layer.name == self.capture_layer
                if capturing:
                    captured = h
                continue
            if layer.kind == "relu":
                h = ad.relu(h)
                if capturing:
                    captured = h
            elif layer.kind == "avgpool":
                h = ad.avg_pool2d(h, layer.kernel)
            elif layer.kind == "maxpool":
                h = ad.max_pool2d(h, layer.kernel)
            elif layer.kind == "flatten":
                h = ad.reshape(h, (h.shape[0], -1))
            elif layer.kind == "dense":
                weight, bias = params[f"{layer.name}.weight"], params[f"{layer.name}.bias"]
                h = ad.matmul(h, ad.transpose(weight, (1, 0))) + bias
            capturing = False

        posterior = ad.softmax(h, tau=tau, axis=-1)
        return ForwardPass(logits=h, posterior=posterior, captured=captured, params=dict(params))

    def posterior(self, images: np.ndarray, tau: float = 1.0) -> np.ndarray:
        """Graph-free batched posterior, N x C."""
        return self.forward(images, tau=tau).posterior.value

    def predict(self, images: np.ndarray) -> np.ndarray:
        """Predicted class per image."""
        return np.argmax(self.forward(images).logits.value, axis=-1)


def _he_normal(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def build_small_cnn(channels: int, classes: int, image_side: int, seed: int) -> Classifier:
    """Three ``conv 3x3 -> ReLU -> avg-pool 2x2`` blocks followed by one dense layer.

    :param channels: Feature maps per convolution
    :param classes: Output classes, at least 2
    :param image_side: Input side, one of 16, 32, 64
    :param seed: Initialization seed, equal seeds give bitwise-equal parameters
    :return: Freshly initialized classifier with He-scaled weights and zero biases
    :rtype: Classifier
    :raises ConfigError: For an unsupported side, class count or channel count
    """
    violations = []
    if image_side not in SUPPORTED_SIDES:
        violations.append(f"image_side: must be one of {SUPPORTED_SIDES}, got {image_side}")
    if classes < 2:
        violations.append(f"classes: must be >= 2, got {classes}")
    if channels < 1:
        violations.append(f"channels: must be >= 1, got {channels}")
    if violations:
        raise ConfigError(violations)

    rng = np.random.default_rng(seed)
    layers: List[LayerSpec] = []
    params: Dict[str, np.ndarray] = {}
    in_channels = 1
    for block in range(1, 4):
        name = f"conv{block}"
        layers += [
            LayerSpec(name=name, kind="conv", in_size=in_channels, out_size=channels, kernel=3, padding=1),
            LayerSpec(name=f"relu{block}", kind="relu"),
            LayerSpec(name=f"pool{block}", kind="avgpool", kernel=2),
        ]
        params[f"{name}.weight"] = _he_normal(rng, (channels, in_channels, 3, 3), in_channels * 9)
        params[f"{name}.bias"] = np.zeros(channels)
        in_channels = channels

    features = channels * (image_side // 8) ** 2
    layers += [
        LayerSpec(name="flatten", kind="flatten"),
        LayerSpec(name="dense", kind="dense", in_size=features, out_size=classes),
    ]
    params["dense.weight"] = _he_normal(rng, (classes, features), features)
    params["dense.bias"] = np.zeros(classes)
    logger.debug(f"built small CNN: channels={channels} classes={classes} side={image_side} seed={seed}")
    return Classifier(layers, params, (1, image_side, image_side), classes, capture_layer="conv3")


def build_linear(
    input_shape: Tuple[int, ...],
    classes: int,
    weight: Optional[np.ndarray] = None,
    bias: Optional[np.ndarray] = None,
    seed: int = 0,
) -> Classifier:
    """Flatten followed by one dense layer, logits ``W x + b``.

    :param input_shape: Per-sample input shape, ``(1, h, w)``
    :param classes: Output classes, 1 allowed for degenerate checks
    :param weight: ``classes x (h*w)`` weights, small random values when omitted
    :param bias: ``classes`` biases, zeros when omitted
    :return: Linear-softmax classifier without a capture layer
    :rtype: Classifier
    """
    features = int(np.prod(input_shape))
    if weight is None:
        weight = np.random.default_rng(seed).standard_normal((classes, features)) * 0.01
    weight = np.asarray(weight, dtype=np.float64).reshape(classes, features)
    bias = np.zeros(classes) if bias is None else np.asarray(bias, dtype=np.float64)
    layers = [
        LayerSpec(name="flatten", kind="flatten"),
        LayerSpec(name="dense", kind="dense", in_size=features, out_size=classes),
    ]
    return Classifier(layers, {"dense.weight": weight, "dense.bias": bias}, input_shape, classes)


def sgd_step(
    model: Classifier, grads: Mapping[str, Any], state: OptimState
) -> Tuple[Classifier, OptimState]:
    """One SGD-with-momentum update: ``m <- mu m + g``, ``theta <- theta - lr m``.

    :param model: Current model
    :param grads: Gradient per parameter name (arrays or DiffValues)
    :param state: Optimizer state, missing momentum buffers start at zero
    :return: Updated model and state
    :rtype: Tuple[Classifier, OptimState]
    :raises ContractError: If the gradient keys differ from the parameter keys
    """
    if set(grads) != set(model.params):
        raise ContractError(
            f"gradient keys {sorted(grads)} differ from parameter keys {sorted(model.params)}"
        )
    params, buffers = {}, {}
    for name, theta in model.params.items():
        grad = grads[name]
        grad = grad.value if isinstance(grad, DiffValue) else np.asarray(grad, dtype=np.float64)
        if grad.shape != theta.shape:
            raise ContractError(f"gradient for {name} has shape {grad.shape}, expected {theta.shape}")
        previous = state.buffers.get(name)
        velocity = grad.copy() if previous is None else state.momentum * previous + grad
        buffers[name] = velocity
        params[name] = theta - state.lr * velocity
    return model.with_params(params), OptimState(lr=state.lr, momentum=state.momentum, buffers=buffers)


def save_params(model: Any) -> bytes:
    """Serialize parameters: ``SIBP``, u32 count, then per entry a u32-length-prefixed UTF-8 name and a SIBT block.

    :param model: A Classifier or a name-to-array mapping
    """
    params = model.params if isinstance(model, Classifier) else model
    chunks = [PARAMS_MAGIC, struct.pack("<I", len(params))]
    for name, value in params.items():
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)) + encoded)
        chunks.append(ad.encode_tensor(value))
    return b"".join(chunks)


def load_params(buffer: bytes) -> Dict[str, np.ndarray]:
    """Parse a parameter stream written by :func:`save_params`.

    :return: Parameters in stored order
    :raises ParseError: With the byte offset of the first malformed field; nothing is returned partially
    """
    if buffer[:4] != PARAMS_MAGIC:
        raise ParseError("missing SIBP magic", 0)
    if len(buffer) < 8:
        raise ParseError("truncated entry count", 4)
    (count,) = struct.unpack_from("<I", buffer, 4)
    cursor = 8
    params: Dict[str, np.ndarray] = {}
    for _ in range(count):
        if len(buffer) < cursor + 4:
            raise ParseError("truncated name length", cursor)
        (length,) = struct.unpack_from("<I", buffer, cursor)
        cursor += 4
        if len(buffer) < cursor + length:
            raise ParseError("truncated name", cursor)
        try:
            name = buffer[cursor : cursor + length].decode("utf-8")
        except UnicodeDecodeError:
            raise ParseError("name is not valid UTF-8", cursor)
        cursor += length
        params[name], cursor = ad.decode_tensor(buffer, cursor)
    if cursor != len(buffer):
        raise ParseError("trailing bytes after last entry", cursor)
    return params
