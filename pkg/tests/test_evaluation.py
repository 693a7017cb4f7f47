import numpy as np
import pytest

from spatialib.evaluation import (
    accuracy,
    binarize,
    deletion_curve,
    evaluate_methods,
    info_differential,
    info_differential_rows,
    insertion_curve,
    localization_report,
    mi_quadrants,
    mi_quadrants_from_arrays,
    miou,
    per_sample_info_diffs,
    per_sample_info_terms,
    pixel_accuracy,
    pixel_ap,
    sufficiency_check_linear,
    sufficiency_sweep,
    trend_statistics,
    variance_bound_check,
    variance_bound_sweep,
)
from spatialib.data import generate_synthetic
from spatialib.models import ContractError, Dataset, DomainError, EpochRecord, LabeledSample
from spatialib.network import build_linear, build_small_cnn


class AnyForeground:
    """Detector that is certain of class 1 as soon as any pixel is nonzero."""

    def posterior(self, images):
        hit = np.any(images.reshape(len(images), -1) != 0, axis=1).astype(np.float64)
        return np.stack([1.0 - hit, hit], axis=1)


def make_dataset(n, side=4, labels=None, seed=0):
    rng = np.random.default_rng(seed)
    mask = np.zeros((side, side), dtype=np.int64)
    mask[:, : side // 2] = 1
    labels = labels if labels is not None else [i % 3 for i in range(n)]
    samples = [
        LabeledSample(image=rng.uniform(size=(1, side, side)), label=labels[i], gt_mask=mask, sample_id=f"s{i}")
        for i in range(n)
    ]
    return Dataset(samples=samples, classes=3, split="test")


@pytest.fixture
def left_half():
    """Fixture for 128 random 4 x 4 images with the left half as foreground."""
    x = np.random.default_rng(11).uniform(size=(128, 4, 4))
    masks = np.zeros((128, 4, 4))
    masks[:, :, :2] = 1.0
    return x, masks


# Localization
def test_binarize():
    """Test that scores at or above the threshold become foreground."""
    scores = np.array([[0.2, 0.5], [0.7, 0.49]])
    np.testing.assert_array_equal(binarize(scores, 0.5), [[0, 1], [1, 0]])
    with pytest.raises(ContractError):
        binarize(scores, 1.0)


def test_pixel_accuracy():
    """Test that four wrong pixels out of sixteen give 0.75."""
    gt = np.zeros((4, 4), dtype=np.int64)
    gt[:2] = 1
    pred = gt.copy()
    pred[0, :2] = 0
    pred[3, 2:] = 1
    assert pixel_accuracy(pred, gt) == 0.75


def test_miou_by_hand():
    """Test the mean of foreground IoU 1/3 and background IoU 3/5."""
    pred = np.array([[1, 1, 0], [0, 0, 0]])
    gt = np.array([[0, 1, 1], [0, 0, 0]])
    assert miou(pred, gt) == pytest.approx(7 / 15)


def test_miou_empty_class_counts_as_match():
    """Test that a class absent from both masks has IoU 1."""
    assert miou(np.zeros((2, 2)), np.zeros((2, 2))) == 1.0
    assert miou(np.ones((2, 2)), np.ones((2, 2))) == 1.0


def test_mask_shapes_must_match():
    """Test that comparing masks of different shapes is a contract error."""
    with pytest.raises(ContractError):
        pixel_accuracy(np.zeros((2, 2)), np.zeros((2, 3)))


def test_pixel_ap():
    """Test AP for a reversed ranking, uniform scores and a perfect ranking."""
    assert pixel_ap(np.array([[0.1, 0.9]]), np.array([[1, 0]])) == pytest.approx(0.5)
    gt = np.zeros((4, 4))
    gt[0, :3] = 1
    assert pixel_ap(np.full((4, 4), 0.3), gt) == pytest.approx(3 / 16)
    assert pixel_ap(gt * 0.8 + 0.1, gt) == pytest.approx(1.0)


def test_pixel_ap_needs_foreground():
    """Test that AP of an empty ground truth is refused."""
    with pytest.raises(ContractError):
        pixel_ap(np.ones((2, 2)), np.zeros((2, 2)))


def test_localization_report_averages_samples():
    """Test that the report holds the mean of the per-sample values."""
    gt = np.array([[1, 0], [0, 0]])
    report = localization_report([np.array([[1.0, 0.0], [0.0, 0.0]]), np.array([[0.0, 1.0], [0.0, 0.0]])], [gt, gt])
    assert report.pixel_acc == pytest.approx((1.0 + 0.5) / 2)
    assert len(report.per_sample) == 2
    with pytest.raises(ContractError):
        localization_report([], [])


# Faithfulness
def test_constant_model_curves():
    """Test that a model ignoring its input gives flat curves with AUC 1/C."""
    model = build_linear((1, 4, 4), 3, weight=np.zeros((3, 16)))
    x = np.random.default_rng(0).uniform(size=(1, 4, 4))
    scores = np.random.default_rng(1).uniform(size=(4, 4))
    for curve in (insertion_curve(model, x, scores, steps=10), deletion_curve(model, x, scores, steps=10)):
        np.testing.assert_allclose(curve.confidences, np.full(11, 1 / 3))
        assert curve.auc == pytest.approx(1 / 3)
        assert curve.fractions[0] == 0.0 and curve.fractions[-1] == 1.0


def test_detector_curves():
    """Test that ranking the only bright pixel first saturates insertion and empties deletion."""
    x = np.zeros((1, 4, 4))
    x[0, 1, 2] = 1.0
    scores = np.zeros((4, 4))
    scores[1, 2] = 1.0
    insertion = insertion_curve(AnyForeground(), x, scores, steps=10)
    deletion = deletion_curve(AnyForeground(), x, scores, steps=10)
    assert insertion.confidences == [0.0] + [1.0] * 10
    assert deletion.confidences == [1.0] + [0.0] * 10
    assert insertion.auc == pytest.approx(0.95)
    assert deletion.auc == pytest.approx(0.05)


def test_insertion_ends_at_original_confidence():
    """Test that the last insertion frame is the original image."""
    model = build_small_cnn(channels=2, classes=3, image_side=16, seed=0)
    x = np.random.default_rng(2).uniform(size=(1, 16, 16))
    curve = insertion_curve(model, x, np.random.default_rng(3).uniform(size=(16, 16)), steps=10)
    p = model.posterior(x[None])[0]
    assert curve.confidences[-1] == pytest.approx(p.max())


def test_curve_needs_ten_steps():
    """Test that fewer than 10 steps are refused."""
    model = build_linear((1, 4, 4), 3)
    with pytest.raises(ContractError):
        insertion_curve(model, np.ones((1, 4, 4)), np.ones((4, 4)), steps=9)


# Accuracy
def test_accuracy_top1_and_topk():
    """Test top-1 and top-2 accuracy of a model that always ranks class 0 then 1."""
    model = build_linear((1, 4, 4), 3, weight=np.zeros((3, 16)), bias=np.array([1.0, 0.5, 0.0]))
    result = accuracy(model, make_dataset(4, labels=[0, 0, 1, 2]))
    assert result == {"top1": 0.5, "topk": 0.75, "k": 2.0}


# Information diagnostics
def test_info_differential_constant():
    """Test that zero variance maps every sample to 1."""
    assert info_differential([0.3, 0.3, 0.3]) == [1.0, 1.0, 1.0]


def test_info_differential_values():
    """Test ``exp`` of the population z-scores."""
    np.testing.assert_allclose(info_differential([0.0, 2.0]), [np.exp(-1.0), np.exp(1.0)])


def test_info_differential_is_affine_invariant():
    """Test that a positive affine change of the differences leaves the result unchanged."""
    diffs = np.random.default_rng(4).standard_normal(20)
    np.testing.assert_allclose(info_differential(diffs), info_differential(3.0 * diffs - 2.0))
    with pytest.raises(ContractError):
        info_differential([1.0])


def test_info_differential_rows_per_model_and_pooled():
    """Test that each model is z-scored on its own and the pooled column over both modes."""
    rows = info_differential_rows({"baseline": [0.0, 2.0], "sib": [2.0, 4.0]}, ["a", "b"], seed=3)
    assert [r["mode"] for r in rows] == ["baseline", "baseline", "sib", "sib"]
    np.testing.assert_allclose([r["info_differential"] for r in rows], np.exp([-1.0, 1.0, -1.0, 1.0]))
    root2 = np.sqrt(2.0)
    np.testing.assert_allclose([r["info_differential_pooled"] for r in rows], np.exp([-root2, 0.0, 0.0, root2]))
    assert rows[3]["sample_id"] == "b" and rows[3]["seed"] == 3


def test_info_differential_rows_single_sample():
    """Test that a lone image scores 1 on both scales."""
    rows = info_differential_rows({"sib": [0.7]}, ["a"], seed=0)
    assert rows[0]["info_differential"] == 1.0 and rows[0]["info_differential_pooled"] == 1.0


def test_quadrants_favor_foreground(left_half):
    """Test that R carrying only the foreground gives the largest within-foreground dependence."""
    x, masks = left_half
    quadrants = mi_quadrants_from_arrays(x * masks, x, masks)
    assert quadrants.fg_fg == max(quadrants.fg_fg, quadrants.bg_bg, quadrants.fg_bg, quadrants.bg_fg)
    assert quadrants.fg_fg > 3.0 * quadrants.bg_fg
    assert quadrants.bg_bg == pytest.approx(0.0, abs=1e-12)
    assert quadrants.fg_bg == pytest.approx(0.0, abs=1e-12)


def test_quadrants_swap_with_mask(left_half):
    """Test that complementing the mask swaps the quadrants."""
    x, masks = left_half
    r = np.random.default_rng(12).standard_normal(x.shape) + x
    a = mi_quadrants_from_arrays(r, x, masks)
    b = mi_quadrants_from_arrays(r, x, 1.0 - masks)
    assert a.fg_fg == pytest.approx(b.bg_bg)
    assert a.bg_fg == pytest.approx(b.fg_bg)


def test_quadrants_of_inert_model():
    """Test that a model with zero weights decodes to R = 0 and no dependence."""
    model = build_linear((1, 4, 4), 3, weight=np.zeros((3, 16)))
    quadrants = mi_quadrants(model, make_dataset(8))
    for value in quadrants.model_dump().values():
        assert abs(value) < 1e-12


def test_per_sample_info_diffs():
    """Test that one difference is produced per sample for both sources."""
    model = build_linear((1, 4, 4), 3, seed=5)
    dataset = make_dataset(5)
    assert len(per_sample_info_diffs(model, dataset)) == 5
    assert len(per_sample_info_diffs(model, dataset, source="vjp")) == 5
    with pytest.raises(ContractError):
        per_sample_info_diffs(model, dataset, source="lrp")


def test_foreground_term_on_generated_objects():
    """Test that textured objects give every image a nonzero foreground dependence."""
    _, test = generate_synthetic(classes=3, side=16, n=6, spurious=0.0, seed=2, n_test=6)
    model = build_linear((1, 16, 16), 3, weight=0.2 * np.random.default_rng(7).standard_normal((3, 256)))
    terms = per_sample_info_terms(model, test, source="vjp")
    assert len(terms) == 6
    for fg, bg in terms:
        assert fg > 0.0 and bg >= -1e-12
    diffs = per_sample_info_diffs(model, test, source="vjp")
    np.testing.assert_allclose(diffs, [fg - bg for fg, bg in terms])


# Theory checks
def test_bound_for_zero_covariance():
    """Test that S = 0 gives equality with ratio 1."""
    check = variance_bound_check(np.zeros((3, 3)), 1.0)
    assert check.lhs == pytest.approx(0.0) and check.rhs == 0.0
    assert check.holds and check.ratio == 1.0


def test_bound_for_unit_covariance():
    """Test the scalar case S = 1, s = 1."""
    check = variance_bound_check(np.eye(1), 1.0)
    assert check.lhs == pytest.approx(0.5)
    assert check.rhs == pytest.approx(1.0 / (2.0 * np.log(2.0)))
    assert check.holds


def test_bound_sweep_has_no_violations():
    """Test that random PSD matrices never violate the bound."""
    sweep = variance_bound_sweep(cases=1000, seed=1)
    assert sweep.violations == 0
    assert sweep.max_ratio <= 1.0 + 1e-12


def test_bound_rejects_bad_input():
    """Test that non-PSD or asymmetric matrices and s <= 0 are refused."""
    with pytest.raises(ContractError):
        variance_bound_check(np.diag([1.0, -1.0]), 1.0)
    with pytest.raises(ContractError):
        variance_bound_check(np.array([[1.0, 0.5], [0.0, 1.0]]), 1.0)
    with pytest.raises(DomainError):
        variance_bound_check(np.eye(2), 0.0)


def test_sufficiency_recovers_posterior():
    """Test that R on an 8-pixel support recovers the posterior of a full-rank linear model."""
    rng = np.random.default_rng(6)
    mask = np.zeros(16, dtype=bool)
    mask[::2] = True
    result = sufficiency_check_linear(rng.standard_normal((3, 16)), rng.standard_normal(16), 1.0, mask)
    assert result.condition_holds
    assert result.rank == result.required_rank == 3
    assert result.residual < 1e-6


def test_sufficiency_reports_violations():
    """Test that an empty support and duplicate weight rows are reported as violated."""
    rng = np.random.default_rng(7)
    empty = sufficiency_check_linear(rng.standard_normal((3, 16)), rng.standard_normal(16), 1.0, np.zeros(16))
    assert not empty.condition_holds and empty.residual is None
    duplicate = np.repeat(rng.standard_normal((1, 16)), 3, axis=0)
    result = sufficiency_check_linear(duplicate, rng.standard_normal(16), 1.0, np.ones(16))
    assert not result.condition_holds and result.rank == 1


def test_sufficiency_sweep():
    """Test that all full-rank instances are recovered and all deficient ones reported."""
    summary = sufficiency_sweep()
    assert summary["recovered"] == 50
    assert summary["deficient_reported"] == 10


def test_trend_statistics():
    """Test perfectly monotone logs."""
    log = [
        EpochRecord(epoch=e, acc=0.5, l_ce=1.0, l_fg=-0.1 * e, l_bg=1.0 / e, hsic_fg=0.1 * e, hsic_bg=0.0)
        for e in range(1, 6)
    ]
    stats = trend_statistics(log)
    assert stats["hsic_fg"] == pytest.approx(1.0)
    assert stats["l_bg"] == pytest.approx(-1.0)


# Method sweep
def test_evaluate_methods_tables():
    """Test the shape of the per-method tables on a tiny run."""
    model = build_small_cnn(channels=2, classes=3, image_side=16, seed=0)
    dataset = make_dataset(2, side=16)
    tables = evaluate_methods(model, dataset, ["saliency", "gradcam"], steps=10, workers=2)
    assert list(tables["localization"]["method"]) == ["saliency", "gradcam"]
    assert list(tables["faithfulness"].columns) == ["method", "insertion_auc", "deletion_auc"]
    assert len(tables["curves"]) == 2 * 2 * 11
    assert len(tables["per_sample"]) == 4
