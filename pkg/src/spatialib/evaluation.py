from concurrent.futures import ThreadPoolExecutor
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel
from scipy import integrate, special, stats
from sklearn.metrics import average_precision_score

# Setup logging
import logging

logger = logging.getLogger("spatialib")

from spatialib.explain import explain, guided_backprop
from spatialib.models import (
    BoundCheck,
    ContractError,
    Dataset,
    DomainError,
    EpochRecord,
    FaithfulnessCurve,
    FaithfulnessError,
    LabeledSample,
    LocalizationReport,
    MiQuadrants,
    SaliencyMap,
    SufficiencyResult,
)
from spatialib.network import Classifier
from spatialib.sib import compute_vjp_decoding, dependence

INFERENCE_CHUNK = 128


def _scores(smap: Any) -> np.ndarray:
    return smap.scores if isinstance(smap, SaliencyMap) else np.asarray(smap, dtype=np.float64)


def _same_shape(pred: np.ndarray, gt: np.ndarray):
    if pred.shape != gt.shape:
        raise ContractError(f"mask shapes differ: {pred.shape} vs {gt.shape}")


# ------ Localization ------ #
def binarize(smap: Any, threshold: float = 0.5) -> np.ndarray:
    """Pixels with score >= threshold become 1, the rest 0."""
    if not 0.0 < threshold < 1.0:
        raise ContractError(f"threshold must lie in (0, 1), got {threshold}")
    return (_scores(smap) >= threshold).astype(np.int64)


def pixel_accuracy(pred: np.ndarray, gt: np.ndarray) -> float:
    pred, gt = np.asarray(pred).astype(bool), np.asarray(gt).astype(bool)
    _same_shape(pred, gt)
    return float(np.mean(pred == gt))


def _iou(pred: np.ndarray, gt: np.ndarray) -> float:
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def miou(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean of foreground and background IoU, a class empty in both masks counts as IoU 1."""
    pred, gt = np.asarray(pred).astype(bool), np.asarray(gt).astype(bool)
    _same_shape(pred, gt)
    return 0.5 * (_iou(pred, gt) + _iou(~pred, ~gt))


def pixel_ap(smap: Any, gt: np.ndarray) -> float:
    """Average precision of the pixel ranking against the foreground, tied scores share one threshold."""
    scores, gt = _scores(smap), np.asarray(gt).astype(bool)
    _same_shape(scores, gt)
    if not gt.any():
        raise ContractError("pixel_ap needs at least one foreground pixel")
    if gt.all():
        return 1.0
    return float(average_precision_score(gt.ravel(), scores.ravel()))


def localization_report(
    maps: Sequence[Any], gts: Sequence[np.ndarray], threshold: float = 0.5
) -> LocalizationReport:
    """Per-sample Pixel Acc / mIoU / AP and their means."""
    if len(maps) == 0 or len(maps) != len(gts):
        raise ContractError(f"need matching nonempty maps and masks, got {len(maps)} and {len(gts)}")
    per_sample = []
    for smap, gt in zip(maps, gts):
        pred = binarize(smap, threshold)
        per_sample.append(
            {"pixel_acc": pixel_accuracy(pred, gt), "miou": miou(pred, gt), "map": pixel_ap(smap, gt)}
        )
    frame = pd.DataFrame(per_sample)
    return LocalizationReport(
        pixel_acc=float(frame["pixel_acc"].mean()),
        miou=float(frame["miou"].mean()),
        map=float(frame["map"].mean()),
        per_sample=per_sample,
    )


# ------ Faithfulness ------ #
def _curve(kind: str, model: Any, x: np.ndarray, smap: Any, steps: int, sample_id: str) -> FaithfulnessCurve:
    if steps < 10:
        raise ContractError(f"faithfulness curves need at least 10 steps, got {steps}")
    image = np.asarray(x, dtype=np.float64)
    scores = _scores(smap)
    if image.shape[-2:] != scores.shape:
        raise ContractError(f"map shape {scores.shape} does not match image {image.shape}")
    original = image.reshape((1,) * (4 - image.ndim) + image.shape)
    target = int(np.argmax(model.posterior(original)[0]))

    order = np.argsort(-scores.ravel(), kind="stable")
    pixels = scores.size
    fractions = np.linspace(0.0, 1.0, steps + 1)
    counts = np.round(fractions * pixels).astype(np.int64)
    rank = np.empty(pixels, dtype=np.int64)
    rank[order] = np.arange(pixels)
    # selected[s, p]: pixel p is among the first counts[s] pixels of the ranking
    selected = (rank[None, :] < counts[:, None]).reshape((steps + 1,) + scores.shape)
    if kind == "insertion":
        keep = selected
    else:
        keep = ~selected
    frames = original * keep[:, None, :, :]
    confidences = np.concatenate(
        [model.posterior(frames[i : i + INFERENCE_CHUNK])[:, target] for i in range(0, len(frames), INFERENCE_CHUNK)]
    )
    if not np.all(np.isfinite(confidences)):
        raise FaithfulnessError(f"non-finite confidence on the {kind} curve", sample_id)
    auc = float(np.clip(integrate.trapezoid(confidences, fractions), 0.0, 1.0))
    return FaithfulnessCurve(kind=kind, fractions=fractions.tolist(), confidences=confidences.tolist(), auc=auc)


def insertion_curve(model: Any, x: np.ndarray, smap: Any, steps: int = 100, sample_id: str = "") -> FaithfulnessCurve:
    """Reveal pixels in descending score order on a zero image, tracking the originally predicted class.

    :param model: Anything with ``posterior(images) -> N x C``
    :param x: 1 x h x w image
    :param smap: SaliencyMap or h x w scores
    :param steps: Number of reveal steps, at least 10
    :raises FaithfulnessError: For a non-finite confidence
    """
    return _curve("insertion", model, x, smap, steps, sample_id)


def deletion_curve(model: Any, x: np.ndarray, smap: Any, steps: int = 100, sample_id: str = "") -> FaithfulnessCurve:
    """Zero pixels in descending score order starting from the original image."""
    return _curve("deletion", model, x, smap, steps, sample_id)


# ------ Accuracy ------ #
def _posteriors(model: Classifier, images: np.ndarray, tau: float = 1.0) -> np.ndarray:
    return np.concatenate(
        [model.posterior(images[i : i + INFERENCE_CHUNK], tau) for i in range(0, len(images), INFERENCE_CHUNK)]
    )


def accuracy(model: Classifier, dataset: Dataset, k: Optional[int] = None) -> Dict[str, float]:
    """Top-1 and top-k accuracy, ``k`` defaults to ``min(5, C - 1)``."""
    if len(dataset) == 0:
        raise ContractError("accuracy of an empty dataset")
    k = min(5, max(model.classes - 1, 1)) if k is None else k
    probs = _posteriors(model, dataset.images())
    labels = dataset.labels()
    ranked = np.argsort(-probs, axis=1, kind="stable")[:, :k]
    return {
        "top1": float(np.mean(ranked[:, 0] == labels)),
        "topk": float(np.mean(np.any(ranked == labels[:, None], axis=1))),
        "k": float(k),
    }


# ------ Information diagnostics ------ #
def info_differential(per_sample_diffs: Sequence[float]) -> List[float]:
    """``exp`` of within-dataset z-scores (population std), all ones when the variance is zero."""
    diffs = np.asarray(per_sample_diffs, dtype=np.float64)
    if diffs.size < 2:
        raise ContractError(f"info_differential needs at least 2 values, got {diffs.size}")
    spread = diffs.std()
    if spread == 0.0:
        return [1.0] * diffs.size
    return np.exp((diffs - diffs.mean()) / spread).tolist()


def _scaled(diffs: Sequence[float]) -> List[float]:
    return info_differential(diffs) if len(diffs) >= 2 else [1.0] * len(diffs)


def info_differential_rows(
    diffs: Dict[str, Sequence[float]], sample_ids: Sequence[str], seed: int
) -> List[Dict[str, Any]]:
    """One row per (mode, sample) for the models evaluated on one dataset.

    ``info_differential`` z-scores within each model's own images.
    ``info_differential_pooled`` z-scores over the images of every mode together,
    which puts baseline and S-IB on one scale.
    """
    pooled = _scaled([d for values in diffs.values() for d in values])
    rows, cursor = [], 0
    for mode, values in diffs.items():
        for sample_id, diff, own in zip(sample_ids, values, _scaled(values)):
            rows.append(
                {
                    "mode": mode,
                    "seed": seed,
                    "sample_id": sample_id,
                    "diff": diff,
                    "info_differential": own,
                    "info_differential_pooled": pooled[cursor],
                }
            )
            cursor += 1
    return rows


def _pixel_dependence(r: np.ndarray, x: np.ndarray) -> float:
    if r.size < 2:
        return 0.0
    return dependence(r.reshape(-1, 1), x.reshape(-1, 1)).item()


def per_sample_info_terms(
    model: Classifier, dataset: Dataset, source: str = "guided_backprop", tau: float = 1.0
) -> List[Tuple[float, float]]:
    """Per image ``(HSIC(R_fg, X_fg), HSIC(R_bg, X_bg))`` with pixels as observations and regions from the masks.

    :param source: ``guided_backprop`` (class gradient with guided ReLU) or ``vjp`` (the decoding R)
    """
    if source not in ("guided_backprop", "vjp"):
        raise ContractError(f"source must be guided_backprop or vjp, got {source!r}")
    terms = []
    for sample in dataset.samples:
        if source == "guided_backprop":
            r = guided_backprop(model, sample.image, tau=tau).raw
        else:
            r = compute_vjp_decoding(model, sample.image, tau, retain_graph=False).r.value[0]
        x, mask = sample.image[0], sample.gt_mask.astype(bool)
        terms.append((_pixel_dependence(r[mask], x[mask]), _pixel_dependence(r[~mask], x[~mask])))
    return terms


def per_sample_info_diffs(
    model: Classifier, dataset: Dataset, source: str = "guided_backprop", tau: float = 1.0
) -> List[float]:
    """Per image ``HSIC(R_fg, X_fg) - HSIC(R_bg, X_bg)``, see :func:`per_sample_info_terms`."""
    return [fg - bg for fg, bg in per_sample_info_terms(model, dataset, source, tau)]


def decode_dataset(model: Classifier, images: np.ndarray, tau: float = 1.0) -> np.ndarray:
    """R for every image, N x h x w, first order only."""
    chunks = [
        compute_vjp_decoding(model, images[i : i + INFERENCE_CHUNK], tau, retain_graph=False).r.value
        for i in range(0, len(images), INFERENCE_CHUNK)
    ]
    return np.concatenate(chunks)


def mi_quadrants_from_arrays(r: np.ndarray, x: np.ndarray, masks: np.ndarray, mode: str = "feature") -> MiQuadrants:
    """Dependence of the four (X-region, R-region) pairs, samples as rows."""
    r, x, masks = (np.asarray(v, dtype=np.float64) for v in (r, x, masks))
    if not r.shape == x.shape == masks.shape:
        raise ContractError(f"shapes differ R={r.shape} X={x.shape} M={masks.shape}")
    r_fg, r_bg = r * masks, r * (1.0 - masks)
    x_fg, x_bg = x * masks, x * (1.0 - masks)
    return MiQuadrants(
        fg_fg=dependence(x_fg, r_fg, mode).item(),
        bg_bg=dependence(x_bg, r_bg, mode).item(),
        fg_bg=dependence(x_fg, r_bg, mode).item(),
        bg_fg=dependence(x_bg, r_fg, mode).item(),
    )


def mi_quadrants(
    model: Classifier,
    dataset: Dataset,
    masks: Optional[np.ndarray] = None,
    tau: float = 1.0,
    mode: str = "feature",
) -> MiQuadrants:
    """Four-quadrant dependence over a dataset, regions from the ground-truth masks unless ``masks`` is given."""
    images = dataset.images()
    r = decode_dataset(model, images, tau)
    masks = dataset.masks() if masks is None else masks
    return mi_quadrants_from_arrays(r, images[:, 0], masks, mode)


# ------ Theory checks ------ #
class BoundSweep(BaseModel):
    """Outcome of :func:`variance_bound_sweep`."""

    cases: int
    violations: int
    min_ratio: float
    max_ratio: float


def variance_bound_check(sigma_matrix: np.ndarray, sigma: float) -> BoundCheck:
    """Compare ``0.5 log2 det(I + S / s^2)`` with ``tr(S) / (2 s^2 ln 2)``.

    ``ratio = lhs / rhs`` tends to 1 as ``tr(S) -> 0`` and is 1 for ``S = 0``.

    :raises ContractError: If S is not a symmetric PSD matrix
    :raises DomainError: If s <= 0
    """
    if not sigma > 0:
        raise DomainError(f"sigma must be > 0, got {sigma}")
    cov = np.atleast_2d(np.asarray(sigma_matrix, dtype=np.float64))
    if cov.shape[0] != cov.shape[1] or not np.allclose(cov, cov.T, atol=1e-12):
        raise ContractError("covariance must be a symmetric square matrix")
    if np.linalg.eigvalsh(cov).min() < -1e-10 * max(1.0, np.abs(cov).max()):
        raise ContractError("covariance must be positive semi-definite")
    variance = sigma**2
    _, logdet = np.linalg.slogdet(np.eye(cov.shape[0]) + cov / variance)
    lhs = 0.5 * logdet / np.log(2.0)
    rhs = np.trace(cov) / (2.0 * variance * np.log(2.0))
    ratio = lhs / rhs if rhs > 0 else 1.0
    return BoundCheck(lhs=float(lhs), rhs=float(rhs), holds=bool(lhs <= rhs + 1e-12), ratio=float(ratio))


def variance_bound_sweep(
    cases: int = 1000, max_dim: int = 8, sigmas: Sequence[float] = (0.1, 1.0), seed: int = 0
) -> BoundSweep:
    """Check the bound on random PSD matrices with log-uniform scale."""
    rng = np.random.default_rng(seed)
    violations, ratios = 0, []
    for case in range(cases):
        dim = int(rng.integers(1, max_dim + 1))
        factor = rng.standard_normal((dim, dim)) * np.exp(rng.uniform(-4.0, 2.0))
        check = variance_bound_check(factor @ factor.T, sigmas[case % len(sigmas)])
        violations += not check.holds
        ratios.append(check.ratio)
    if violations:
        logger.warning(f"variance bound violated in {violations} of {cases} cases")
    return BoundSweep(cases=cases, violations=violations, min_ratio=min(ratios), max_ratio=max(ratios))


def sufficiency_check_linear(
    weight: np.ndarray, x: np.ndarray, tau: float, mask: np.ndarray, bias: Optional[np.ndarray] = None
) -> SufficiencyResult:
    """Recover the posterior of a linear-softmax model from R restricted to ``mask``.

    Uses the exact Jacobian ``J = (diag(p) - p p^T) W / tau`` and solves
    ``[J_M^T; 1^T] q = [R_M; 1]`` by least squares.

    :param weight: C x P logit weights
    :param x: Input with P elements
    :param tau: Softmax temperature
    :param mask: Boolean support with P elements
    :return: Residual ``max |q - p|`` when the rank condition holds, otherwise a violated condition
    :rtype: SufficiencyResult
    """
    if not tau > 0:
        raise DomainError(f"tau must be > 0, got {tau}")
    weight = np.atleast_2d(np.asarray(weight, dtype=np.float64))
    classes, pixels = weight.shape
    x = np.asarray(x, dtype=np.float64).reshape(pixels)
    support = np.asarray(mask).reshape(pixels).astype(bool)
    logits = weight @ x + (0.0 if bias is None else np.asarray(bias, dtype=np.float64))
    p = special.softmax(logits / tau)
    jacobian = (np.diag(p) - np.outer(p, p)) @ weight / tau
    r = jacobian.T @ p

    size = int(support.sum())
    required = min(classes, size)
    rank = int(np.linalg.matrix_rank(weight[:, support])) if size else 0
    if size == 0 or rank < required:
        logger.warning(f"sufficiency condition violated: rank {rank} < required {required} (|M|={size})")
        return SufficiencyResult(residual=None, rank=rank, required_rank=required, condition_holds=False)

    system = np.vstack([jacobian[:, support].T, np.ones((1, classes))])
    target = np.concatenate([r[support], [1.0]])
    if np.linalg.matrix_rank(system) < classes:
        logger.warning("sufficiency condition violated: posterior not identifiable from R_M")
        return SufficiencyResult(residual=None, rank=rank, required_rank=required, condition_holds=False)
    recovered, *_ = np.linalg.lstsq(system, target, rcond=None)
    return SufficiencyResult(
        residual=float(np.abs(recovered - p).max()), rank=rank, required_rank=required, condition_holds=True
    )


def sufficiency_sweep(
    instances: int = 50,
    classes: int = 3,
    support: int = 8,
    pixels: int = 16,
    tau: float = 1.0,
    deficient: int = 10,
    seed: int = 0,
) -> Dict[str, Any]:
    """Run :func:`sufficiency_check_linear` on random full-rank and duplicate-row instances."""
    rng = np.random.default_rng(seed)
    residuals = []
    for _ in range(instances):
        weight = rng.standard_normal((classes, pixels))
        mask = np.zeros(pixels, dtype=bool)
        mask[rng.choice(pixels, support, replace=False)] = True
        result = sufficiency_check_linear(weight, rng.standard_normal(pixels), tau, mask)
        if result.condition_holds:
            residuals.append(result.residual)
    reported = 0
    for _ in range(deficient):
        weight = np.repeat(rng.standard_normal((1, pixels)), classes, axis=0)
        mask = np.zeros(pixels, dtype=bool)
        mask[rng.choice(pixels, support, replace=False)] = True
        reported += not sufficiency_check_linear(weight, rng.standard_normal(pixels), tau, mask).condition_holds
    return {
        "cases": instances,
        "recovered": sum(r < 1e-6 for r in residuals),
        "max_residual": max(residuals, default=float("nan")),
        "deficient_cases": deficient,
        "deficient_reported": reported,
    }


def trend_statistics(log: Any) -> Dict[str, float]:
    """Spearman correlation of the epoch index with ``hsic_fg`` and with ``l_bg``."""
    if isinstance(log, pd.DataFrame):
        frame = log
    else:
        frame = pd.DataFrame([r.model_dump() if isinstance(r, EpochRecord) else r for r in log])
    if len(frame) < 2:
        return {"hsic_fg": float("nan"), "l_bg": float("nan")}
    return {
        "hsic_fg": float(stats.spearmanr(frame["epoch"], frame["hsic_fg"])[0]),
        "l_bg": float(stats.spearmanr(frame["epoch"], frame["l_bg"])[0]),
    }


# ------ Method sweep ------ #
class MethodEvaluation(BaseModel):
    """Per-sample scores of one method on one sample."""

    method: str
    sample_id: str
    pixel_acc: float
    miou: float
    map: float
    insertion_auc: float
    deletion_auc: float
    insertion: List[float]
    deletion: List[float]


def _evaluate_sample(
    model: Classifier, sample: LabeledSample, methods: Sequence[str], options: Dict[str, Any]
) -> List[MethodEvaluation]:
    results = []
    for method_id in methods:
        extra = {"steps": options["ig_steps"]} if method_id == "integrated_gradients" else {}
        if method_id == "ours":
            extra = {"threshold": options["mask_threshold"], "sharpness": options["mask_sharpness"]}
        smap = explain(model, sample.image, method_id, tau=options["tau"], **extra)
        pred = binarize(smap, options["threshold"])
        insertion = insertion_curve(model, sample.image, smap, options["steps"], sample.sample_id)
        deletion = deletion_curve(model, sample.image, smap, options["steps"], sample.sample_id)
        results.append(
            MethodEvaluation(
                method=method_id,
                sample_id=sample.sample_id,
                pixel_acc=pixel_accuracy(pred, sample.gt_mask),
                miou=miou(pred, sample.gt_mask),
                map=pixel_ap(smap, sample.gt_mask),
                insertion_auc=insertion.auc,
                deletion_auc=deletion.auc,
                insertion=insertion.confidences,
                deletion=deletion.confidences,
            )
        )
    return results


def evaluate_methods(
    model: Classifier,
    dataset: Dataset,
    methods: Sequence[str],
    threshold: float = 0.5,
    steps: int = 100,
    ig_steps: int = 32,
    tau: float = 1.0,
    mask_threshold: float = 0.5,
    mask_sharpness: float = 0.1,
    workers: int = 1,
) -> Dict[str, pd.DataFrame]:
    """Localization and faithfulness of every method over the dataset.

    Samples are processed by a thread pool, results keep the dataset order.

    :return: ``localization`` (method, pixel_acc, miou, map), ``faithfulness`` (method, insertion_auc,
        deletion_auc), ``curves`` (method, kind, fraction, confidence) and ``per_sample`` frames
    """
    if len(dataset) == 0:
        raise ContractError("evaluate_methods on an empty dataset")
    options = dict(
        threshold=threshold,
        steps=steps,
        ig_steps=ig_steps,
        tau=tau,
        mask_threshold=mask_threshold,
        mask_sharpness=mask_sharpness,
    )
    with ThreadPoolExecutor(max_workers=workers) as pool:
        nested = list(pool.map(lambda s: _evaluate_sample(model, s, methods, options), dataset.samples))
    records = [item for group in nested for item in group]
    per_sample = pd.DataFrame([r.model_dump(exclude={"insertion", "deletion"}) for r in records])
    by_method = per_sample.groupby("method", sort=False)

    localization = by_method[["pixel_acc", "miou", "map"]].mean().reset_index()
    faithfulness = by_method[["insertion_auc", "deletion_auc"]].mean().reset_index()
    fractions = np.linspace(0.0, 1.0, steps + 1)
    curve_rows = []
    for method_id in methods:
        chosen = [r for r in records if r.method == method_id]
        for kind in ("insertion", "deletion"):
            mean_curve = np.mean([getattr(r, kind) for r in chosen], axis=0)
            curve_rows += [
                {"method": method_id, "kind": kind, "fraction": f, "confidence": c}
                for f, c in zip(fractions, mean_curve)
            ]
    logger.info(f"evaluated {len(methods)} method(s) on {len(dataset)} sample(s)")
    return {
        "localization": localization,
        "faithfulness": faithfulness,
        "curves": pd.DataFrame(curve_rows),
        "per_sample": per_sample,
    }
