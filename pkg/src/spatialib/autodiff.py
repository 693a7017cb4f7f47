import contextvars
import logging
import struct
from contextlib import contextmanager
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict
from scipy import special

from spatialib.models import ContractError, DomainError, ParseError, ShapeError

# Setup logging
logger = logging.getLogger("spatialib")

TENSOR_MAGIC = b"SIBT"

_GUIDED_RELU: contextvars.ContextVar = contextvars.ContextVar(
    "spatialib_guided_relu", default=False
)


def _freeze(array: Any, owned: bool = False) -> np.ndarray:
    """Read-only float64 view, a writeable array is copied first unless the caller owns it."""
    array = np.asarray(array, dtype=np.float64)
    if array.flags.writeable:
        if not owned:
            array = array.copy()
        array.setflags(write=False)
    return array


def tensor(data: Any) -> np.ndarray:
    """Build a user-facing tensor: a read-only float64 copy of ``data``.

    :param data: Anything ``numpy.array`` accepts
    :type data: array-like
    :return: Read-only float64 array
    :rtype: numpy.ndarray
    :raises ContractError: If any element is NaN or infinite
    """
    array = np.array(data, dtype=np.float64)
    if not np.all(np.isfinite(array)):
        raise ContractError("tensor contains NaN or infinite values")
    array.setflags(write=False)
    return array


class DiffValue:
    """A tensor bound into a :class:`Graph`.

    Constants carry no node and never receive gradients. Values produced by
    primitives on graph-connected inputs are recorded on the same graph, which
    is also where backward passes with ``retain_graph=True`` record their
    gradients, so gradients can be differentiated again.

    :param value: The forward value
    :param graph: Owning graph, None for constants
    :param node: Index of the producing node, None for constants
    :param name: Optional label (parameter name)
    """

    __slots__ = ("value", "graph", "node", "name", "__weakref__")
    __array_priority__ = 1000

    def __init__(
        self,
        value: np.ndarray,
        graph: Optional["Graph"] = None,
        node: Optional[int] = None,
        name: Optional[str] = None,
    ):
        self.value = _freeze(value)
        self.graph = graph
        self.node = node
        self.name = name

    @property
    def requires_grad(self) -> bool:
        return self.node is not None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return int(self.value.size)

    def item(self) -> float:
        if self.value.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.value.reshape(()))

    def detach(self) -> "DiffValue":
        return DiffValue(self.value, name=self.name)

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ""
        return f"DiffValue(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def sum(self, axis=None, keepdims: bool = False) -> "DiffValue":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "DiffValue":
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "DiffValue":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def constant(data: Any) -> DiffValue:
    """Wrap ``data`` as a constant leaf (no node, no gradient)."""
    return data if isinstance(data, DiffValue) else DiffValue(np.array(data, dtype=np.float64))


class Node:
    """One record of the graph: operation kind, inputs, attributes and saved forward values."""

    __slots__ = ("index", "kind", "inputs", "attrs", "saved", "value")

    def __init__(self, index, kind, inputs, attrs, saved, value):
        self.index = index
        self.kind = kind
        self.inputs = inputs
        self.attrs = attrs
        self.saved = saved
        self.value = value

    @property
    def parents(self) -> Tuple[int, ...]:
        return tuple(v.node for v in self.inputs if v.node is not None)


class Graph:
    """Append-only computation graph, topological order equals insertion order.

    A graph is single-threaded; independent graphs may be used concurrently.

    .. code-block:: python

        graph = Graph()
        x = graph.variable([3.0])
        y = x * x
        grads = backward(y.sum(), [x])
        grads[x].value  # array([6.])
    """

    def __init__(self):
        self.nodes: List[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def variable(self, data: Any, name: Optional[str] = None) -> DiffValue:
        """Create a leaf that requires gradients.

        :param data: Initial value, must be finite
        :param name: Optional label
        :return: Graph-connected leaf
        :rtype: DiffValue
        """
        value = data.value if isinstance(data, DiffValue) else tensor(data)
        return self._record("leaf", (), {}, {}, value, name=name)

    def _record(self, kind, inputs, attrs, saved, value, name=None) -> DiffValue:
        index = len(self.nodes)
        for parent in inputs:
            if parent.node is not None and parent.node >= index:
                raise ContractError(f"{kind}: parent node {parent.node} does not precede {index}")
        value = _freeze(value, owned=True)
        self.nodes.append(Node(index, kind, tuple(inputs), attrs, saved, value))
        return DiffValue(value, self, index, name)


class BackwardContext(BaseModel):
    """What a backward rule sees: inputs, output, attributes and saved forward values."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    inputs: Tuple[Any, ...]
    output: Any
    attrs: Dict[str, Any]
    saved: Dict[str, Any]


class Primitive(BaseModel):
    """A registered primitive: forward in numpy, backward expressed in primitives.

    :param kind: Primitive id used by :func:`apply_primitive`
    :param arity: Number of inputs, None for variadic
    :param forward_fn: ``(values, attrs) -> (value, saved)``
    :param backward_fn: ``(ctx, grad, needs) -> tuple of gradients or None``
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    kind: str
    arity: Optional[int]
    forward_fn: Callable
    backward_fn: Optional[Callable] = None

    def backward(self, func: Callable) -> Callable:
        """Decorator registering the backward rule of this primitive."""
        self.backward_fn = func
        return func


PRIMITIVES: Dict[str, Primitive] = {}


def primitive(kind: str, arity: Optional[int] = 1):
    """Decorator to register a primitive forward function.

    .. code-block:: python

        @primitive("exp")
        def _exp(values, attrs):
            return np.exp(values[0]), None

        @_exp.backward
        def _exp_backward(ctx, g, needs):
            return (mul(g, ctx.output),)
    """

    def decorator(func: Callable) -> Primitive:
        record = Primitive(kind=kind, arity=arity, forward_fn=func)
        PRIMITIVES[kind] = record
        return record

    return decorator


def _common_graph(kind: str, inputs: Sequence[DiffValue]) -> Optional[Graph]:
    graph = None
    for value in inputs:
        if value.node is None:
            continue
        if graph is None:
            graph = value.graph
        elif value.graph is not graph:
            raise ContractError(f"{kind}: inputs belong to different graphs")
    return graph


def apply_primitive(kind: str, inputs: Sequence[Any], **attrs) -> DiffValue:
    """Evaluate a registered primitive and record it on the inputs' graph.

    :param kind: Primitive id, see :data:`PRIMITIVES`
    :param inputs: DiffValues or array-likes (lifted to constants)
    :param attrs: Primitive attributes (axis, tau, stride, ...)
    :return: The output, graph-connected iff any input is
    :rtype: DiffValue
    :raises ShapeError: If the inputs do not conform to the primitive's shape rule
    :raises DomainError: If an attribute lies outside its domain
    """
    record = PRIMITIVES.get(kind)
    if record is None:
        raise ContractError(f"unknown primitive {kind!r}")
    inputs = tuple(constant(v) for v in inputs)
    if record.arity is not None and len(inputs) != record.arity:
        raise ContractError(f"{kind}: expected {record.arity} inputs, got {len(inputs)}")
    graph = _common_graph(kind, inputs)
    value, saved = record.forward_fn(tuple(v.value for v in inputs), attrs)
    value = _freeze(value, owned=True)
    if graph is None:
        return DiffValue(value)
    return graph._record(kind, inputs, attrs, saved or {}, value)


# ------ Backward passes ------ #
class GradientMap(dict):
    """Gradients keyed by the ``wrt`` DiffValues (identity keys).

    :ivar unreachable: ``wrt`` entries the output does not depend on, they received zero gradients
    """

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.unreachable: List[DiffValue] = []


def _node_gradients(node: Node, graph: Graph, g: DiffValue, needs, retain_graph: bool):
    if retain_graph:
        inputs = node.inputs
        output = DiffValue(node.value, graph, node.index)
    else:
        inputs = tuple(v.detach() for v in node.inputs)
        output = DiffValue(node.value)
        g = g.detach()
    ctx = BackwardContext(inputs=inputs, output=output, attrs=node.attrs, saved=node.saved)
    grads = PRIMITIVES[node.kind].backward_fn(ctx, g, needs)
    return grads


def _propagate(
    output: DiffValue, wrt: Sequence[DiffValue], seed: DiffValue, retain_graph: bool
) -> GradientMap:
    for value in wrt:
        if not isinstance(value, DiffValue) or not value.requires_grad:
            raise ContractError("every wrt entry must be a DiffValue with requires_grad = true")

    result = GradientMap()
    graph = output.graph
    targets = {v.node for v in wrt if v.graph is graph} if output.node is not None else set()

    reachable = set()
    if targets:
        top = output.node
        low = min(targets)
        needed = {}
        for index in range(low, top + 1):
            node = graph.nodes[index]
            needed[index] = index in targets or any(needed.get(p, False) for p in node.parents)
        if needed.get(top, False):
            grads: Dict[int, DiffValue] = {top: seed}
            found: Dict[int, DiffValue] = {}
            for index in range(top, low - 1, -1):
                g = grads.pop(index, None)
                if g is None:
                    continue
                if index in targets:
                    found[index] = g
                node = graph.nodes[index]
                needs = tuple(
                    v.node is not None and needed.get(v.node, False) for v in node.inputs
                )
                if not any(needs):
                    continue
                in_grads = _node_gradients(node, graph, g, needs, retain_graph)
                for parent, parent_grad, need in zip(node.inputs, in_grads, needs):
                    if not need or parent_grad is None:
                        continue
                    previous = grads.get(parent.node)
                    grads[parent.node] = parent_grad if previous is None else add(previous, parent_grad)
            reachable = set(found)
            for value in wrt:
                if value.node in found:
                    grad = found[value.node]
                    result[value] = grad if retain_graph else grad.detach()

    for value in wrt:
        if value.node not in reachable:
            logger.warning(f"backward: {value!r} is unreachable from the output, zero gradient")
            result.unreachable.append(value)
            result[value] = DiffValue(np.zeros(value.shape))
    logger.debug(f"backward over graph of {len(graph) if graph else 0} nodes, retain={retain_graph}")
    return result


def backward(
    output: DiffValue, wrt: Iterable[DiffValue], retain_graph: bool = False
) -> GradientMap:
    """Reverse-mode gradients of a scalar.

    :param output: Scalar DiffValue
    :param wrt: Values to differentiate with respect to, each requires_grad
    :param retain_graph: Record the backward pass on the graph so gradients are re-differentiable
    :return: Gradient for every ``wrt`` entry
    :rtype: GradientMap
    :raises ContractError: If ``output`` is not a scalar

    .. note:: Unreachable ``wrt`` entries get a zero gradient and are listed in ``unreachable``.
    """
    output = constant(output)
    if output.size != 1:
        raise ContractError(f"backward needs a scalar output, got shape {output.shape}")
    seed = DiffValue(np.ones(output.shape))
    return _propagate(output, list(wrt), seed, retain_graph)


def vjp(
    outputs: DiffValue,
    inputs: Iterable[DiffValue],
    cotangent: Any,
    retain_graph: bool = False,
) -> GradientMap:
    """Vector-Jacobian products ``J^T v`` of ``outputs`` w.r.t. each input.

    :param outputs: Any-shaped DiffValue
    :param inputs: Values to differentiate with respect to
    :param cotangent: Array (frozen) or DiffValue (graph-connected) shaped like ``outputs``
    :param retain_graph: Keep the results re-differentiable
    :return: ``J^T v`` for every input
    :rtype: GradientMap
    :raises ContractError: If the cotangent shape differs from the outputs shape
    """
    outputs = constant(outputs)
    seed = cotangent if isinstance(cotangent, DiffValue) else DiffValue(np.asarray(cotangent, dtype=np.float64))
    if seed.shape != outputs.shape:
        raise ContractError(f"vjp: cotangent shape {seed.shape} differs from outputs {outputs.shape}")
    if not retain_graph and seed.requires_grad:
        seed = seed.detach()
    return _propagate(outputs, list(inputs), seed, retain_graph)


@contextmanager
def guided_relu():
    """Inside this context ReLU backward rules also zero negative incoming gradients."""
    token = _GUIDED_RELU.set(True)
    try:
        yield
    finally:
        _GUIDED_RELU.reset(token)


# ------ Shape helpers ------ #
def _broadcast_shape(kind: str, *shapes) -> Tuple[int, ...]:
    try:
        return tuple(np.broadcast_shapes(*shapes))
    except ValueError:
        raise ShapeError(kind, shapes)


def _normalize_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def _keepdims_shape(shape, axes) -> Tuple[int, ...]:
    return tuple(1 if i in axes else d for i, d in enumerate(shape))


def _sum_to(array: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    lead = array.ndim - len(shape)
    if lead < 0:
        raise ShapeError("sum_to", (array.shape, shape))
    if lead:
        array = array.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and array.shape[i] != 1)
    if axes:
        array = array.sum(axis=axes, keepdims=True)
    if array.shape != tuple(shape):
        raise ShapeError("sum_to", (array.shape, shape))
    return array


def _unbroadcast(g: DiffValue, shape) -> DiffValue:
    return g if g.shape == tuple(shape) else sum_to(g, shape)


def _swap_last(value: DiffValue) -> DiffValue:
    axes = list(range(value.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(value, tuple(axes))


def _first_argmax_mask(array: np.ndarray, axes: Tuple[int, ...]) -> np.ndarray:
    # one-hot of the first maximum (lowest flat index) over ``axes``
    moved = np.moveaxis(array, axes, tuple(range(-len(axes), 0)))
    flat = moved.reshape(moved.shape[: moved.ndim - len(axes)] + (-1,))
    onehot = np.zeros_like(flat)
    np.put_along_axis(onehot, np.argmax(flat, axis=-1)[..., None], 1.0, axis=-1)
    return np.moveaxis(onehot.reshape(moved.shape), tuple(range(-len(axes), 0)), axes)


def _check_tau(kind: str, tau: float):
    if not tau > 0:
        raise DomainError(f"{kind}: temperature must be > 0, got {tau}")


def _check_pool(kind: str, shape, size: int):
    if len(shape) < 2 or size < 1 or shape[-1] % size or shape[-2] % size:
        raise ShapeError(kind, (shape,), f"spatial dims must be divisible by {size}")


# ------ Elementwise primitives ------ #
@primitive("add", arity=2)
def _add(values, attrs):
    a, b = values
    _broadcast_shape("add", a.shape, b.shape)
    return a + b, None


@_add.backward
def _add_backward(ctx, g, needs):
    a, b = ctx.inputs
    return (
        _unbroadcast(g, a.shape) if needs[0] else None,
        _unbroadcast(g, b.shape) if needs[1] else None,
    )


@primitive("sub", arity=2)
def _sub(values, attrs):
    a, b = values
    _broadcast_shape("sub", a.shape, b.shape)
    return a - b, None


@_sub.backward
def _sub_backward(ctx, g, needs):
    a, b = ctx.inputs
    return (
        _unbroadcast(g, a.shape) if needs[0] else None,
        _unbroadcast(neg(g), b.shape) if needs[1] else None,
    )


@primitive("mul", arity=2)
def _mul(values, attrs):
    a, b = values
    _broadcast_shape("mul", a.shape, b.shape)
    return a * b, None


@_mul.backward
def _mul_backward(ctx, g, needs):
    a, b = ctx.inputs
    return (
        _unbroadcast(mul(g, b), a.shape) if needs[0] else None,
        _unbroadcast(mul(g, a), b.shape) if needs[1] else None,
    )


@primitive("div", arity=2)
def _div(values, attrs):
    a, b = values
    _broadcast_shape("div", a.shape, b.shape)
    return a / b, None


@_div.backward
def _div_backward(ctx, g, needs):
    a, b = ctx.inputs
    return (
        _unbroadcast(div(g, b), a.shape) if needs[0] else None,
        _unbroadcast(neg(div(mul(g, ctx.output), b)), b.shape) if needs[1] else None,
    )


@primitive("power")
def _power(values, attrs):
    return np.power(values[0], attrs["exponent"]), None


@_power.backward
def _power_backward(ctx, g, needs):
    exponent = ctx.attrs["exponent"]
    if exponent == 0:
        return (DiffValue(np.zeros(ctx.inputs[0].shape)),)
    return (mul(g, mul(power(ctx.inputs[0], exponent - 1), exponent)),)


@primitive("exp")
def _exp(values, attrs):
    return np.exp(values[0]), None


@_exp.backward
def _exp_backward(ctx, g, needs):
    return (mul(g, ctx.output),)


@primitive("log")
def _log(values, attrs):
    return np.log(values[0]), None


@_log.backward
def _log_backward(ctx, g, needs):
    return (div(g, ctx.inputs[0]),)


@primitive("sigmoid")
def _sigmoid(values, attrs):
    return special.expit(values[0]), None


@_sigmoid.backward
def _sigmoid_backward(ctx, g, needs):
    y = ctx.output
    return (mul(g, mul(y, sub(1.0, y))),)


@primitive("relu")
def _relu(values, attrs):
    x = values[0]
    return np.maximum(x, 0.0), {"active": (x > 0).astype(np.float64)}


@_relu.backward
def _relu_backward(ctx, g, needs):
    gate = ctx.saved["active"]
    if _GUIDED_RELU.get():
        gate = gate * (g.value > 0)
    return (mul(g, constant(gate)),)


@primitive("abs")
def _abs(values, attrs):
    x = values[0]
    return np.abs(x), {"sign": np.sign(x)}


@_abs.backward
def _abs_backward(ctx, g, needs):
    return (mul(g, constant(ctx.saved["sign"])),)


# ------ Reductions and shape primitives ------ #
@primitive("sum")
def _reduce_sum(values, attrs):
    x = values[0]
    axes = _normalize_axes(attrs.get("axis"), x.ndim)
    return np.sum(x, axis=axes, keepdims=attrs.get("keepdims", False)), None


@_reduce_sum.backward
def _reduce_sum_backward(ctx, g, needs):
    x = ctx.inputs[0]
    axes = _normalize_axes(ctx.attrs.get("axis"), x.ndim)
    return (broadcast_to(reshape(g, _keepdims_shape(x.shape, axes)), x.shape),)


@primitive("max")
def _reduce_max(values, attrs):
    x = values[0]
    axes = _normalize_axes(attrs.get("axis"), x.ndim)
    value = np.max(x, axis=axes, keepdims=attrs.get("keepdims", False))
    return value, {"mask": _first_argmax_mask(x, axes)}


@_reduce_max.backward
def _reduce_max_backward(ctx, g, needs):
    x = ctx.inputs[0]
    axes = _normalize_axes(ctx.attrs.get("axis"), x.ndim)
    spread = broadcast_to(reshape(g, _keepdims_shape(x.shape, axes)), x.shape)
    return (mul(spread, constant(ctx.saved["mask"])),)


@primitive("broadcast_to")
def _broadcast_to(values, attrs):
    x = values[0]
    shape = tuple(attrs["shape"])
    if _broadcast_shape("broadcast_to", x.shape, shape) != shape:
        raise ShapeError("broadcast_to", (x.shape, shape))
    return np.broadcast_to(x, shape), None


@_broadcast_to.backward
def _broadcast_to_backward(ctx, g, needs):
    return (sum_to(g, ctx.inputs[0].shape),)


@primitive("sum_to")
def _sum_to_primitive(values, attrs):
    return _sum_to(values[0], tuple(attrs["shape"])), None


@_sum_to_primitive.backward
def _sum_to_backward(ctx, g, needs):
    return (broadcast_to(g, ctx.inputs[0].shape),)


@primitive("reshape")
def _reshape(values, attrs):
    x = values[0]
    try:
        return x.reshape(attrs["shape"]), None
    except ValueError:
        raise ShapeError("reshape", (x.shape, tuple(attrs["shape"])))


@_reshape.backward
def _reshape_backward(ctx, g, needs):
    return (reshape(g, ctx.inputs[0].shape),)


@primitive("transpose")
def _transpose(values, attrs):
    x = values[0]
    axes = tuple(attrs["axes"])
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError("transpose", (x.shape, axes), "axes must permute all dims")
    return np.transpose(x, axes), None


@_transpose.backward
def _transpose_backward(ctx, g, needs):
    return (transpose(g, tuple(int(i) for i in np.argsort(ctx.attrs["axes"]))),)


def _slicer(ndim: int, axis: int, start: int, stop: int):
    index = [slice(None)] * ndim
    index[axis] = slice(start, stop)
    return tuple(index)


@primitive("slice")
def _slice(values, attrs):
    x = values[0]
    axis = attrs["axis"] % x.ndim
    if not 0 <= attrs["start"] <= attrs["stop"] <= x.shape[axis]:
        raise ShapeError("slice", (x.shape,), f"range {attrs['start']}:{attrs['stop']} on axis {axis}")
    return x[_slicer(x.ndim, axis, attrs["start"], attrs["stop"])], None


@_slice.backward
def _slice_backward(ctx, g, needs):
    x = ctx.inputs[0]
    return (embed(g, x.shape, ctx.attrs["axis"], ctx.attrs["start"], ctx.attrs["stop"]),)


@primitive("embed")
def _embed(values, attrs):
    x = values[0]
    out = np.zeros(attrs["shape"])
    out[_slicer(out.ndim, attrs["axis"] % out.ndim, attrs["start"], attrs["stop"])] = x
    return out, None


@_embed.backward
def _embed_backward(ctx, g, needs):
    return (take_slice(g, ctx.attrs["axis"], ctx.attrs["start"], ctx.attrs["stop"]),)


@primitive("concatenate", arity=None)
def _concatenate(values, attrs):
    try:
        return np.concatenate(values, axis=attrs["axis"]), None
    except ValueError:
        raise ShapeError("concatenate", tuple(v.shape for v in values))


@_concatenate.backward
def _concatenate_backward(ctx, g, needs):
    axis = ctx.attrs["axis"]
    grads, offset = [], 0
    for value, need in zip(ctx.inputs, needs):
        size = value.shape[axis]
        grads.append(take_slice(g, axis, offset, offset + size) if need else None)
        offset += size
    return tuple(grads)


# ------ Linear algebra ------ #
@primitive("matmul", arity=2)
def _matmul(values, attrs):
    a, b = values
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul", (a.shape, b.shape), "operands must be at least 2-D")
    try:
        return np.matmul(a, b), None
    except ValueError:
        raise ShapeError("matmul", (a.shape, b.shape))


@_matmul.backward
def _matmul_backward(ctx, g, needs):
    a, b = ctx.inputs
    return (
        _unbroadcast(matmul(g, _swap_last(b)), a.shape) if needs[0] else None,
        _unbroadcast(matmul(_swap_last(a), g), b.shape) if needs[1] else None,
    )


@primitive("softmax")
def _softmax(values, attrs):
    _check_tau("softmax", attrs["tau"])
    return special.softmax(values[0] / attrs["tau"], axis=attrs["axis"]), None


@_softmax.backward
def _softmax_backward(ctx, g, needs):
    y, axis, tau = ctx.output, ctx.attrs["axis"], ctx.attrs["tau"]
    inner = reduce_sum(mul(g, y), axis=axis, keepdims=True)
    return (mul(mul(y, sub(g, inner)), 1.0 / tau),)


@primitive("log_softmax")
def _log_softmax(values, attrs):
    _check_tau("log_softmax", attrs["tau"])
    return special.log_softmax(values[0] / attrs["tau"], axis=attrs["axis"]), None


@_log_softmax.backward
def _log_softmax_backward(ctx, g, needs):
    axis, tau = ctx.attrs["axis"], ctx.attrs["tau"]
    probs = softmax(ctx.inputs[0], tau=tau, axis=axis)
    total = reduce_sum(g, axis=axis, keepdims=True)
    return (mul(sub(g, mul(probs, total)), 1.0 / tau),)


# ------ Convolution and pooling ------ #
def _conv_out(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _im2col_array(x: np.ndarray, kernel: int, stride: int, padding: int) -> np.ndarray:
    n, c, h, w = x.shape
    ho, wo = _conv_out(h, kernel, stride, padding), _conv_out(w, kernel, stride, padding)
    padded = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = np.lib.stride_tricks.sliding_window_view(padded, (kernel, kernel), axis=(2, 3))
    windows = windows[:, :, : stride * ho : stride, : stride * wo : stride]
    cols = windows.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kernel * kernel, ho * wo)
    return np.ascontiguousarray(cols)


def _col2im_array(cols, input_shape, kernel: int, stride: int, padding: int) -> np.ndarray:
    n, c, h, w = input_shape
    ho, wo = _conv_out(h, kernel, stride, padding), _conv_out(w, kernel, stride, padding)
    blocks = cols.reshape(n, c, kernel, kernel, ho, wo)
    out = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
    for i in range(kernel):
        for j in range(kernel):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += blocks[:, :, i, j]
    return out[:, :, padding : padding + h, padding : padding + w]


def _check_conv_input(kind: str, shape, kernel: int, stride: int, padding: int):
    if len(shape) != 4:
        raise ShapeError(kind, (shape,), "expected N x C x H x W")
    if stride < 1 or padding < 0 or kernel < 1:
        raise ShapeError(kind, (shape,), f"kernel={kernel} stride={stride} padding={padding}")
    if shape[2] + 2 * padding < kernel or shape[3] + 2 * padding < kernel:
        raise ShapeError(kind, (shape,), f"kernel {kernel} larger than padded input")


@primitive("im2col")
def _im2col(values, attrs):
    x = values[0]
    _check_conv_input("im2col", x.shape, attrs["kernel"], attrs["stride"], attrs["padding"])
    return _im2col_array(x, attrs["kernel"], attrs["stride"], attrs["padding"]), None


@_im2col.backward
def _im2col_backward(ctx, g, needs):
    a = ctx.attrs
    return (col2im(g, ctx.inputs[0].shape, a["kernel"], a["stride"], a["padding"]),)


@primitive("col2im")
def _col2im(values, attrs):
    shape = tuple(attrs["input_shape"])
    kernel, stride, padding = attrs["kernel"], attrs["stride"], attrs["padding"]
    _check_conv_input("col2im", shape, kernel, stride, padding)
    expected = (
        shape[0],
        shape[1] * kernel * kernel,
        _conv_out(shape[2], kernel, stride, padding) * _conv_out(shape[3], kernel, stride, padding),
    )
    if values[0].shape != expected:
        raise ShapeError("col2im", (values[0].shape, expected))
    return _col2im_array(values[0], shape, kernel, stride, padding), None


@_col2im.backward
def _col2im_backward(ctx, g, needs):
    a = ctx.attrs
    return (im2col(g, a["kernel"], a["stride"], a["padding"]),)


@primitive("conv2d", arity=2)
def _conv2d(values, attrs):
    x, w = values
    stride, padding = attrs["stride"], attrs["padding"]
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError("conv2d", (x.shape, w.shape), "weight must be F x C x k x k")
    _check_conv_input("conv2d", x.shape, w.shape[2], stride, padding)
    if x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", (x.shape, w.shape), "input channels differ")
    n, _, h, width = x.shape
    f, kernel = w.shape[0], w.shape[2]
    ho, wo = _conv_out(h, kernel, stride, padding), _conv_out(width, kernel, stride, padding)
    cols = _im2col_array(x, kernel, stride, padding)
    out = np.matmul(w.reshape(f, -1), cols)
    return out.reshape(n, f, ho, wo), None


@_conv2d.backward
def _conv2d_backward(ctx, g, needs):
    x, w = ctx.inputs
    stride, padding = ctx.attrs["stride"], ctx.attrs["padding"]
    n, f, ho, wo = g.shape
    kernel = w.shape[2]
    g_flat = reshape(g, (n, f, ho * wo))
    w_flat = reshape(w, (f, w.shape[1] * kernel * kernel))
    grad_x = grad_w = None
    if needs[0]:
        grad_cols = matmul(transpose(w_flat, (1, 0)), g_flat)
        grad_x = col2im(grad_cols, x.shape, kernel, stride, padding)
    if needs[1]:
        cols = im2col(x, kernel, stride, padding)
        grad_w = reshape(reduce_sum(matmul(g_flat, transpose(cols, (0, 2, 1))), axis=0), w.shape)
    return grad_x, grad_w


@primitive("avg_pool2d")
def _avg_pool2d(values, attrs):
    x, k = values[0], attrs["size"]
    _check_pool("avg_pool2d", x.shape, k)
    *lead, h, w = x.shape
    return x.reshape(*lead, h // k, k, w // k, k).mean(axis=(-3, -1)), None


@_avg_pool2d.backward
def _avg_pool2d_backward(ctx, g, needs):
    k = ctx.attrs["size"]
    return (mul(upsample2d(g, k), 1.0 / (k * k)),)


@primitive("upsample2d")
def _upsample2d(values, attrs):
    x, k = values[0], attrs["factor"]
    if x.ndim < 2 or k < 1:
        raise ShapeError("upsample2d", (x.shape,), f"factor={k}")
    return np.repeat(np.repeat(x, k, axis=-2), k, axis=-1), None


@_upsample2d.backward
def _upsample2d_backward(ctx, g, needs):
    k = ctx.attrs["factor"]
    return (mul(avg_pool2d(g, k), float(k * k)),)


@primitive("max_pool2d")
def _max_pool2d(values, attrs):
    x, k = values[0], attrs["size"]
    _check_pool("max_pool2d", x.shape, k)
    *lead, h, w = x.shape
    windows = x.reshape(*lead, h // k, k, w // k, k)
    axes = (windows.ndim - 3, windows.ndim - 1)
    mask = _first_argmax_mask(windows, axes).reshape(x.shape)
    return windows.max(axis=axes), {"mask": mask}


@_max_pool2d.backward
def _max_pool2d_backward(ctx, g, needs):
    k = ctx.attrs["size"]
    return (mul(upsample2d(g, k), constant(ctx.saved["mask"])),)


_BLUR_WEIGHTS = np.outer([1.0, 2.0, 1.0], [1.0, 2.0, 1.0]) / 16.0


def _blur_zero_padded(x: np.ndarray) -> np.ndarray:
    pad = [(0, 0)] * (x.ndim - 2) + [(1, 1), (1, 1)]
    padded = np.pad(x, pad)
    h, w = x.shape[-2:]
    out = np.zeros(x.shape)
    for i in range(3):
        for j in range(3):
            out = out + _BLUR_WEIGHTS[i, j] * padded[..., i : i + h, j : j + w]
    return out


def _blur_norm(h: int, w: int) -> np.ndarray:
    # kernel mass that falls inside the image, 1 away from the border
    return _blur_zero_padded(np.ones((h, w)))


@primitive("blur3x3")
def _blur3x3(values, attrs):
    x = values[0]
    if x.ndim < 2:
        raise ShapeError("blur3x3", (x.shape,), "needs at least 2 dims")
    return _blur_zero_padded(x) / _blur_norm(*x.shape[-2:]), None


@_blur3x3.backward
def _blur3x3_backward(ctx, g, needs):
    # adjoint of B(x) / n is B(g / n), B being symmetric
    norm = _blur_norm(*g.shape[-2:])
    return (mul(blur3x3(mul(g, 1.0 / norm)), norm),)


# ------ Functional API ------ #
def add(a, b) -> DiffValue:
    return apply_primitive("add", (a, b))


def sub(a, b) -> DiffValue:
    return apply_primitive("sub", (a, b))


def mul(a, b) -> DiffValue:
    return apply_primitive("mul", (a, b))


def div(a, b) -> DiffValue:
    return apply_primitive("div", (a, b))


def neg(a) -> DiffValue:
    return apply_primitive("mul", (a, -1.0))


def power(a, exponent: float) -> DiffValue:
    return apply_primitive("power", (a,), exponent=float(exponent))


def exp(a) -> DiffValue:
    return apply_primitive("exp", (a,))


def log(a) -> DiffValue:
    return apply_primitive("log", (a,))


def sigmoid(a) -> DiffValue:
    return apply_primitive("sigmoid", (a,))


def relu(a) -> DiffValue:
    return apply_primitive("relu", (a,))


def absolute(a) -> DiffValue:
    return apply_primitive("abs", (a,))


def reduce_sum(a, axis=None, keepdims: bool = False) -> DiffValue:
    return apply_primitive("sum", (a,), axis=axis, keepdims=keepdims)


def reduce_mean(a, axis=None, keepdims: bool = False) -> DiffValue:
    a = constant(a)
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reduce_max(a, axis=None, keepdims: bool = False) -> DiffValue:
    return apply_primitive("max", (a,), axis=axis, keepdims=keepdims)


def reduce_min(a, axis=None, keepdims: bool = False) -> DiffValue:
    return neg(reduce_max(neg(a), axis=axis, keepdims=keepdims))


def broadcast_to(a, shape) -> DiffValue:
    return apply_primitive("broadcast_to", (a,), shape=tuple(shape))


def sum_to(a, shape) -> DiffValue:
    return apply_primitive("sum_to", (a,), shape=tuple(shape))


def reshape(a, shape) -> DiffValue:
    return apply_primitive("reshape", (a,), shape=tuple(shape))


def transpose(a, axes) -> DiffValue:
    return apply_primitive("transpose", (a,), axes=tuple(axes))


def take_slice(a, axis: int, start: int, stop: int) -> DiffValue:
    return apply_primitive("slice", (a,), axis=axis, start=start, stop=stop)


def embed(a, shape, axis: int, start: int, stop: int) -> DiffValue:
    return apply_primitive("embed", (a,), shape=tuple(shape), axis=axis, start=start, stop=stop)


def concatenate(values: Sequence[Any], axis: int = 0) -> DiffValue:
    return apply_primitive("concatenate", tuple(values), axis=axis)


def matmul(a, b) -> DiffValue:
    return apply_primitive("matmul", (a, b))


def softmax(a, tau: float = 1.0, axis: int = -1) -> DiffValue:
    _check_tau("softmax", tau)
    return apply_primitive("softmax", (a,), tau=float(tau), axis=axis)


def log_softmax(a, tau: float = 1.0, axis: int = -1) -> DiffValue:
    _check_tau("log_softmax", tau)
    return apply_primitive("log_softmax", (a,), tau=float(tau), axis=axis)


def im2col(a, kernel: int, stride: int = 1, padding: int = 0) -> DiffValue:
    return apply_primitive("im2col", (a,), kernel=kernel, stride=stride, padding=padding)


def col2im(a, input_shape, kernel: int, stride: int = 1, padding: int = 0) -> DiffValue:
    return apply_primitive(
        "col2im", (a,), input_shape=tuple(input_shape), kernel=kernel, stride=stride, padding=padding
    )


def conv2d(x, w, stride: int = 1, padding: int = 0) -> DiffValue:
    return apply_primitive("conv2d", (x, w), stride=stride, padding=padding)


def avg_pool2d(a, size: int = 2) -> DiffValue:
    return apply_primitive("avg_pool2d", (a,), size=size)


def max_pool2d(a, size: int = 2) -> DiffValue:
    return apply_primitive("max_pool2d", (a,), size=size)


def upsample2d(a, factor: int = 2) -> DiffValue:
    return apply_primitive("upsample2d", (a,), factor=factor)


def blur3x3(a) -> DiffValue:
    return apply_primitive("blur3x3", (a,))


# ------ SIBT serialization ------ #
def encode_tensor(array: Any) -> bytes:
    """Serialize a tensor: ``SIBT``, u32 rank, u64 dims, little-endian f64 payload."""
    array = np.ascontiguousarray(np.asarray(array, dtype="<f8"))
    header = TENSOR_MAGIC + struct.pack("<I", array.ndim)
    header += struct.pack(f"<{array.ndim}Q", *array.shape)
    return header + array.tobytes(order="C")


def decode_tensor(buffer: bytes, offset: int = 0) -> Tuple[np.ndarray, int]:
    """Parse one SIBT block starting at ``offset``.

    :return: The tensor and the offset just past the block
    :raises ParseError: With the byte offset of the first malformed field
    """
    if buffer[offset : offset + 4] != TENSOR_MAGIC:
        raise ParseError("missing SIBT magic", offset)
    cursor = offset + 4
    if len(buffer) < cursor + 4:
        raise ParseError("truncated rank", cursor)
    (rank,) = struct.unpack_from("<I", buffer, cursor)
    cursor += 4
    if len(buffer) < cursor + 8 * rank:
        raise ParseError("truncated dims", cursor)
    dims = struct.unpack_from(f"<{rank}Q", buffer, cursor)
    if any(d == 0 for d in dims):
        raise ParseError("zero-sized dimension", cursor)
    cursor += 8 * rank
    count = int(np.prod(dims)) if rank else 1
    if len(buffer) < cursor + 8 * count:
        raise ParseError("truncated payload", cursor)
    data = np.frombuffer(buffer, dtype="<f8", count=count, offset=cursor)
    array = data.astype(np.float64).reshape(dims)
    array.setflags(write=False)
    return array, cursor + 8 * count
