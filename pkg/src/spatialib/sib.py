from typing import Any, Dict, List, Mapping, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict

# Setup logging
import logging

logger = logging.getLogger("spatialib")

from spatialib import autodiff as ad
from spatialib.autodiff import DiffValue, Graph
from spatialib.data import batches, take_batch
from spatialib.network import Classifier, ForwardPass, sgd_step
from spatialib.models import (
    Batch,
    ConfigError,
    ContractError,
    Dataset,
    EpochRecord,
    NonFiniteLossError,
    OptimState,
    RunConfig,
    SibLossTerms,
    SibSettings,
)

STANDARDIZE_EPS = 1e-8
FLAT_TOLERANCE = 1e-12
ACCURACY_CHUNK = 128


class VjpDecoding(BaseModel):
    """
    The decoding ``R = J^T p`` of a batch.

    :param r: N x h x w DiffValue, graph-connected when computed with ``retain_graph``
    :param images: N x h x w inputs the decoding belongs to
    :param posterior: The posterior p the Jacobian was taken of
    :param cotangent: The cotangent used, an array (frozen) or DiffValue (attached)
    :param forward: The forward pass that produced ``posterior``
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    r: Any
    images: Any
    posterior: Any
    cotangent: Any
    forward: ForwardPass


class MaskedDecomposition(BaseModel):
    """Foreground/background split of R and X by a soft mask M."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    mask: Any
    r_fg: Any
    r_bg: Any
    x_fg: Any
    x_bg: Any


def compute_vjp_decoding(
    model: Classifier,
    x: Any,
    tau: float = 1.0,
    params: Optional[Mapping[str, DiffValue]] = None,
    cotangent_mode: str = "frozen",
    retain_graph: bool = True,
) -> VjpDecoding:
    """Decode the posterior back to input space with one backward pass.

    The current posterior is used as cotangent. In ``frozen`` mode it is a
    constant, in ``attached`` mode it stays on the graph so second-order
    gradients also flow through it.

    :param model: Classifier
    :param x: N x 1 x h x w images (or a single 1 x h x w image)
    :param tau: Softmax temperature
    :param params: Parameters bound on a graph; R is then differentiable w.r.t. them
    :param cotangent_mode: ``frozen`` or ``attached``
    :param retain_graph: Keep R on the graph (needed for training)
    :return: The decoding, R shaped N x h x w
    :rtype: VjpDecoding
    """
    if cotangent_mode not in ("frozen", "attached"):
        raise ConfigError([f"cotangent_mode: expected frozen or attached, got {cotangent_mode!r}"])
    graph = next(iter(params.values())).graph if params else None
    graph = graph or Graph()
    images = x.value if isinstance(x, DiffValue) else np.asarray(x, dtype=np.float64)
    x_var = graph.variable(images)
    fwd = model.forward(x_var, tau=tau, params=params)
    posterior = fwd.posterior
    cotangent = posterior if cotangent_mode == "attached" else posterior.value
    grads = ad.vjp(posterior, [x_var], cotangent, retain_graph=retain_graph)
    batch = posterior.shape[0]
    side_h, side_w = model.input_shape[-2:]
    r = ad.reshape(grads[x_var], (batch, side_h, side_w))
    flat_images = ad.constant(images.reshape(batch, side_h, side_w))
    logger.debug(f"vjp decoding: batch={batch} graph nodes={len(graph)} mode={cotangent_mode}")
    return VjpDecoding(r=r, images=flat_images, posterior=posterior, cotangent=cotangent, forward=fwd)


def generate_mask(r: Any, threshold: float = 0.5, sharpness: float = 0.1) -> DiffValue:
    """Mask head ``sigmoid((minmax(blur(|R|)) - t) / s)``, per image.

    A constant map normalizes to all-zero, giving ``sigmoid(-t/s)`` everywhere.

    :param r: R as VjpDecoding, DiffValue or array, last two axes spatial
    :param threshold: t in (0, 1)
    :param sharpness: s > 0
    :return: M with values in (0, 1), same shape as R
    :rtype: DiffValue
    :raises ConfigError: If t or s is out of range
    """
    violations = []
    if not 0.0 < threshold < 1.0:
        violations.append(f"threshold: must lie in (0, 1), got {threshold}")
    if not sharpness > 0.0:
        violations.append(f"sharpness: must be > 0, got {sharpness}")
    if violations:
        raise ConfigError(violations)
    r = r.r if isinstance(r, VjpDecoding) else ad.constant(r)

    smoothed = ad.blur3x3(ad.absolute(r))
    high = ad.reduce_max(smoothed, axis=(-2, -1), keepdims=True)
    low = ad.reduce_min(smoothed, axis=(-2, -1), keepdims=True)
    spread = high - low
    # rounding noise of the blur on a flat map counts as flat
    degenerate = (spread.value <= FLAT_TOLERANCE * np.abs(high.value)).astype(np.float64)
    if degenerate.any():
        logger.debug(f"mask head: {int(degenerate.sum())} constant map(s) normalized to zero")
    normalized = (smoothed - low) / (spread + degenerate) * (1.0 - degenerate)
    return ad.sigmoid((normalized - threshold) / sharpness)


def split(r: Any, x: Any, mask: Any) -> MaskedDecomposition:
    """``R_fg = R M``, ``R_bg = R (1 - M)`` and the same for X.

    :raises ContractError: If the three shapes differ
    """
    r, x, mask = ad.constant(r), ad.constant(x), ad.constant(mask)
    if not r.shape == x.shape == mask.shape:
        raise ContractError(f"split: shapes differ R={r.shape} X={x.shape} M={mask.shape}")
    complement = 1.0 - mask
    return MaskedDecomposition(
        mask=mask, r_fg=r * mask, r_bg=r * complement, x_fg=x * mask, x_bg=x * complement
    )


def _rows(value: Any, label: str) -> DiffValue:
    value = ad.constant(value)
    if value.ndim == 1:
        value = ad.reshape(value, (value.shape[0], 1))
    elif value.ndim > 2:
        value = ad.reshape(value, (value.shape[0], -1))
    if value.shape[0] < 2:
        raise ContractError(f"{label}: HSIC needs at least 2 samples, got {value.shape[0]}")
    return value


def hsic_linear(a: Any, b: Any) -> DiffValue:
    """Biased linear-kernel HSIC ``tr(K H L H) / (n - 1)^2`` with ``K = A A^T``, ``L = B B^T``.

    Rows are samples, inputs with more than two axes are flattened per sample.

    :raises ContractError: If n < 2 or the row counts differ
    """
    a, b = _rows(a, "hsic_linear"), _rows(b, "hsic_linear")
    n = a.shape[0]
    if b.shape[0] != n:
        raise ContractError(f"hsic_linear: row counts differ ({n} vs {b.shape[0]})")
    a_centered = a - ad.reduce_mean(a, axis=0, keepdims=True)
    b_centered = b - ad.reduce_mean(b, axis=0, keepdims=True)
    k = ad.matmul(a_centered, ad.transpose(a_centered, (1, 0)))
    l = ad.matmul(b_centered, ad.transpose(b_centered, (1, 0)))
    return ad.reduce_sum(k * l) / float((n - 1) ** 2)


def hsic_bruteforce(a: np.ndarray, b: np.ndarray) -> float:
    """Reference ``tr(K H L H) / (n - 1)^2`` as an explicit quadruple sum, for small n."""
    a = np.asarray(a, dtype=np.float64).reshape(len(a), -1)
    b = np.asarray(b, dtype=np.float64).reshape(len(b), -1)
    n = a.shape[0]
    k, l = a @ a.T, b @ b.T
    h = np.eye(n) - np.full((n, n), 1.0 / n)
    total = 0.0
    for i in range(n):
        for j in range(n):
            for p in range(n):
                for q in range(n):
                    total += k[i, j] * h[j, p] * l[p, q] * h[q, i]
    return total / (n - 1) ** 2


def standardize(value: Any, mode: str = "feature", eps: float = STANDARDIZE_EPS) -> DiffValue:
    """Zero-mean, unit-variance scaling over the batch, per feature or for the whole matrix."""
    value = ad.constant(value)
    if mode == "none":
        return value
    axis = 0 if mode == "feature" else None
    centered = value - ad.reduce_mean(value, axis=axis, keepdims=True)
    variance = ad.reduce_mean(centered * centered, axis=axis, keepdims=True)
    return centered * ad.power(variance + eps, -0.5)


def dependence(a: Any, b: Any, mode: str = "feature") -> DiffValue:
    """Scale-free HSIC: standardized HSIC divided by ``d * e``, rescaled by ``((n-1)/n)^2``.

    With per-feature standardization this is the mean squared cross-correlation
    between the columns of A and B, so it lies in [0, 1].
    """
    a, b = _rows(a, "dependence"), _rows(b, "dependence")
    n, d, e = a.shape[0], a.shape[1], b.shape[1]
    raw = hsic_linear(standardize(a, mode), standardize(b, mode))
    return raw * (((n - 1) / n) ** 2 / (d * e))


def loss_fg(decomp: MaskedDecomposition, mode: str = "feature") -> DiffValue:
    """``-dependence(R_fg, X_fg)`` over per-sample flattened pairs."""
    return ad.neg(dependence(decomp.r_fg, decomp.x_fg, mode))


def loss_bg(decomp: MaskedDecomposition, mode: str = "batch") -> DiffValue:
    """Empirical ``Var(R_bg)``.

    ``batch``: population variance of each pixel across the batch, averaged over pixels.
    ``spatial``: variance of each image across its pixels, averaged over images.

    :raises ContractError: If the batch holds fewer than 2 samples
    """
    r_bg = ad.constant(decomp.r_bg)
    if r_bg.shape[0] < 2:
        raise ContractError(f"loss_bg: batch of {r_bg.shape[0]} sample(s), need at least 2")
    if mode == "batch":
        centered = r_bg - ad.reduce_mean(r_bg, axis=0, keepdims=True)
        return ad.reduce_mean(centered * centered)
    if mode == "spatial":
        axes = tuple(range(1, r_bg.ndim))
        centered = r_bg - ad.reduce_mean(r_bg, axis=axes, keepdims=True)
        return ad.reduce_mean(centered * centered)
    raise ConfigError([f"variance_mode: expected batch or spatial, got {mode!r}"])


def cross_entropy(logits: Any, labels: np.ndarray, tau: float = 1.0) -> DiffValue:
    """Mean ``-log softmax(z / tau)[y]``."""
    logits = ad.constant(logits)
    labels = np.asarray(labels, dtype=np.int64)
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    picked = ad.reduce_sum(ad.log_softmax(logits, tau=tau, axis=-1) * onehot, axis=-1)
    return ad.neg(ad.reduce_mean(picked))


def _decompose(decoding: VjpDecoding, settings: SibSettings) -> MaskedDecomposition:
    if settings.mask_override is not None:
        mask = ad.constant(np.full(decoding.r.shape, settings.mask_override))
    else:
        mask = generate_mask(decoding.r, settings.threshold, settings.sharpness)
    return split(decoding.r, decoding.images, mask)


def sib_loss(
    model: Classifier,
    batch: Batch,
    settings: SibSettings,
    params: Optional[Mapping[str, DiffValue]] = None,
) -> SibLossTerms:
    """S-IB objective ``L_ce + L_bg + gamma L_fg`` on one batch, all terms on one graph.

    Without decoding terms (``settings.decodes`` false) the objective is the
    plain cross-entropy and R is never computed.

    :param model: Classifier
    :param batch: At least two samples
    :param settings: Objective settings
    :param params: Parameters bound on a graph, bound on a fresh graph when omitted
    :return: Term values, with the graph-connected total in ``objective``
    :rtype: SibLossTerms
    """
    if len(batch) < 2:
        raise ContractError(f"sib_loss: batch of {len(batch)} sample(s), need at least 2")
    if params is None:
        params = model.bind(Graph())

    hsic_fg = hsic_bg = 0.0
    if settings.decodes:
        decoding = compute_vjp_decoding(
            model, batch.images, settings.tau, params, settings.cotangent_mode
        )
        fwd = decoding.forward
        ce = cross_entropy(fwd.logits, batch.labels, settings.tau)
        decomp = _decompose(decoding, settings)
        l_fg = loss_fg(decomp, settings.hsic_standardize)
        l_bg = loss_bg(decomp, settings.variance_mode)
        total = ce + l_bg if settings.bg_enabled else ce
        total = total + l_fg * settings.gamma
        hsic_fg = -l_fg.item()
        hsic_bg = dependence(decomp.r_bg.value, decomp.x_bg.value, settings.hsic_standardize).item()
        l_fg_value, l_bg_value = l_fg.item(), l_bg.item()
    else:
        fwd = model.forward(batch.images, settings.tau, params)
        ce = cross_entropy(fwd.logits, batch.labels, settings.tau)
        total = ce
        l_fg_value = l_bg_value = 0.0

    correct = int(np.sum(np.argmax(fwd.logits.value, axis=-1) == batch.labels))
    terms = SibLossTerms(
        l_ce=ce.item(),
        l_fg=l_fg_value,
        l_bg=l_bg_value,
        gamma=settings.gamma,
        total=total.item(),
        hsic_fg=hsic_fg,
        hsic_bg=hsic_bg,
        correct=correct,
        objective=total,
    )
    logger.debug(f"sib_loss: {terms.snapshot()}")
    return terms


def loss_gradients(
    model: Classifier, batch: Batch, settings: SibSettings
) -> Tuple[SibLossTerms, Dict[str, np.ndarray]]:
    """Objective terms and the gradient of the total w.r.t. every parameter (double backprop)."""
    graph = Graph()
    params = model.bind(graph)
    terms = sib_loss(model, batch, settings, params)
    grads = ad.backward(terms.objective, list(params.values()))
    return terms, {name: grads[value].value for name, value in params.items()}


def monitor_terms(model: Classifier, batch: Batch, settings: SibSettings) -> EpochRecord:
    """First-order evaluation of every logged quantity on a fixed batch.

    Decoding always runs here, so baseline and S-IB logs share one schema.
    """
    decoding = compute_vjp_decoding(model, batch.images, settings.tau, retain_graph=False)
    logits = decoding.forward.logits
    decomp = _decompose(decoding, settings)
    l_fg = loss_fg(decomp, settings.hsic_standardize).item()
    return EpochRecord(
        epoch=0,
        acc=float(np.mean(np.argmax(logits.value, axis=-1) == batch.labels)),
        l_ce=cross_entropy(logits, batch.labels, settings.tau).item(),
        l_fg=l_fg,
        l_bg=loss_bg(decomp, settings.variance_mode).item(),
        hsic_fg=-l_fg,
        hsic_bg=dependence(decomp.r_bg, decomp.x_bg, settings.hsic_standardize).item(),
    )


def split_accuracy(model: Classifier, dataset: Dataset) -> float:
    """Top-1 accuracy over every sample of ``dataset``, graph-free."""
    images, labels = dataset.images(), dataset.labels()
    hits = sum(
        int(np.sum(model.predict(images[i : i + ACCURACY_CHUNK]) == labels[i : i + ACCURACY_CHUNK]))
        for i in range(0, len(images), ACCURACY_CHUNK)
    )
    return hits / len(images)


def monitor_batch(dataset: Dataset, size: int) -> Batch:
    """The first ``size`` samples of the dataset, in stored order."""
    return take_batch(dataset, range(min(size, len(dataset))))


def train(
    model: Classifier,
    dataset: Dataset,
    config: RunConfig,
    include_initial: bool = False,
) -> Tuple[Classifier, List[EpochRecord]]:
    """Train with ``sib_loss`` and SGD with momentum.

    :param model: Initial classifier
    :param dataset: Training split, nonempty
    :param config: Run configuration (objective settings, optimizer, epochs, batch size, seed)
    :param include_initial: Also log the untrained state as epoch 0
    :return: The trained model and one log row per epoch, ``acc`` over the whole split and
        the objective terms on the fixed monitor batch
    :rtype: Tuple[Classifier, List[EpochRecord]]
    :raises NonFiniteLossError: With epoch, batch index and term values when a term is NaN/Inf
    """
    if len(dataset) == 0:
        raise ContractError("train: empty dataset")
    settings = config.sib_settings()
    state = OptimState(lr=config.lr, momentum=config.momentum)
    monitor = monitor_batch(dataset, config.monitor_size)
    log: List[EpochRecord] = []
    if include_initial:
        log.append(monitor_terms(model, monitor, settings).model_copy(update={"acc": split_accuracy(model, dataset)}))

    for epoch in range(1, config.epochs + 1):
        for index, batch in enumerate(batches(dataset, config.batch_size, config.seed, epoch)):
            terms, grads = loss_gradients(model, batch, settings)
            values = terms.snapshot()
            if not all(np.isfinite(v) for v in values.values()):
                raise NonFiniteLossError(epoch, index, values)
            model, state = sgd_step(model, grads, state)
        record = monitor_terms(model, monitor, settings).model_copy(
            update={"epoch": epoch, "acc": split_accuracy(model, dataset)}
        )
        logger.info(
            f"epoch {epoch}: acc={record.acc:.3f} l_ce={record.l_ce:.4f} "
            f"hsic_fg={record.hsic_fg:.4f} l_bg={record.l_bg:.3e}"
        )
        log.append(record)
    return model, log
