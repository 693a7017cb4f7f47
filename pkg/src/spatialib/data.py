from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Tuple

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage

# Setup logging
import logging

logger = logging.getLogger("spatialib")

from spatialib.models import (
    SUPPORTED_SIDES,
    Batch,
    ConfigError,
    Dataset,
    DatasetFormatError,
    LabeledSample,
)
from spatialib.utils import format_pairs, parse_config_text, read_pgm, sample_rng, write_pgm

OBJECT_RANGE = (0.7, 0.9)
OBJECT_GRAIN = 0.04
BACKGROUND_CEILING = 0.55
BAND_RANGE = (0.06, 0.38)

SHAPES: Dict[str, Callable] = {}


def shape(family: str):
    """Decorator registering a shape family drawer ``(draw, cx, cy, r)``."""

    def decorator(func: Callable) -> Callable:
        SHAPES[family] = func
        return func

    return decorator


@shape("disk")
def _disk(draw: ImageDraw.ImageDraw, cx: float, cy: float, r: float):
    draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=255)


@shape("triangle")
def _triangle(draw, cx, cy, r):
    draw.polygon([(cx, cy - r), (cx - r, cy + r), (cx + r, cy + r)], fill=255)


@shape("bar")
def _bar(draw, cx, cy, r):
    draw.rectangle([cx - r, cy - 0.3 * r, cx + r, cy + 0.3 * r], fill=255)


@shape("ring")
def _ring(draw, cx, cy, r):
    draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=255)
    inner = 0.55 * r
    draw.ellipse([cx - inner, cy - inner, cx + inner, cy + inner], fill=0)


@shape("cross")
def _cross(draw, cx, cy, r):
    arm = 0.3 * r
    draw.rectangle([cx - r, cy - arm, cx + r, cy + arm], fill=255)
    draw.rectangle([cx - arm, cy - r, cx + arm, cy + r], fill=255)


@shape("square")
def _square(draw, cx, cy, r):
    half = 0.75 * r
    draw.rectangle([cx - half, cy - half, cx + half, cy + half], fill=255)


@shape("diamond")
def _diamond(draw, cx, cy, r):
    draw.polygon([(cx, cy - r), (cx + r, cy), (cx, cy + r), (cx - r, cy)], fill=255)


@shape("frame")
def _frame(draw, cx, cy, r):
    draw.rectangle([cx - r, cy - r, cx + r, cy + r], fill=255)
    inner = 0.55 * r
    draw.rectangle([cx - inner, cy - inner, cx + inner, cy + inner], fill=0)


@shape("hourglass")
def _hourglass(draw, cx, cy, r):
    draw.polygon([(cx - r, cy - r), (cx + r, cy - r), (cx, cy)], fill=255)
    draw.polygon([(cx - r, cy + r), (cx + r, cy + r), (cx, cy)], fill=255)


@shape("crescent")
def _crescent(draw, cx, cy, r):
    draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=255)
    shift = 0.5 * r
    draw.ellipse([cx - r + shift, cy - r - shift, cx + r + shift, cy + r - shift], fill=0)


def render_mask(family: str, side: int, rng: np.random.Generator) -> np.ndarray:
    """Draw one shape at a random position and scale, returns its boolean support."""
    for _ in range(8):
        r = rng.uniform(0.18, 0.3) * side
        cx, cy = rng.uniform(r + 1.0, side - r - 2.0, size=2)
        canvas = Image.new("L", (side, side), 0)
        SHAPES[family](ImageDraw.Draw(canvas), cx, cy, r)
        mask = np.asarray(canvas) > 0
        if mask.any():
            return mask
    raise ConfigError([f"side: {side} too small to render {family}"])


def band_level(band: int, classes: int) -> float:
    low, high = BAND_RANGE
    return low + (high - low) * band / max(classes - 1, 1)


def render_sample(
    label: int, classes: int, side: int, rng: np.random.Generator, correlated: bool
) -> Tuple[np.ndarray, np.ndarray]:
    """Render a textured shape on a textured background, quantized to 8 bits.

    :param correlated: Use the label's background band instead of a random one
    :return: 1 x side x side image and its boolean mask
    """
    family = list(SHAPES)[label]
    mask = render_mask(family, side, rng)
    band = label if correlated else int(rng.integers(classes))
    texture = ndimage.gaussian_filter(rng.standard_normal((side, side)), sigma=1.5)
    texture = texture / (texture.std() + 1e-12)
    background = np.clip(band_level(band, classes) + 0.04 * texture, 0.0, BACKGROUND_CEILING)
    grain = ndimage.gaussian_filter(rng.standard_normal((side, side)), sigma=1.0)
    grain = np.clip(grain / (grain.std() + 1e-12), -2.5, 2.5)
    # objects stay within [0.6, 1], above every background pixel
    foreground = rng.uniform(*OBJECT_RANGE) + OBJECT_GRAIN * grain
    image = np.where(mask, foreground, background)
    image = np.round(image * 255.0) / 255.0
    return image[None], mask


def _generate_split(
    split: str, classes: int, side: int, n: int, spurious: float, seed: int, recipe: Dict[str, str]
) -> Dataset:
    samples = []
    for index in range(n):
        rng = sample_rng(seed, split, index)
        label = index % classes
        correlated = split == "train" and rng.uniform() < spurious
        image, mask = render_sample(label, classes, side, rng, correlated)
        samples.append(
            LabeledSample(image=image, label=label, gt_mask=mask, sample_id=f"{split}_{index:05d}")
        )
    return Dataset(samples=samples, classes=classes, split=split, seed=seed, recipe={**recipe, "split": split})


def generate_synthetic(
    classes: int,
    side: int,
    n: int,
    spurious: float,
    seed: int,
    n_test: Optional[int] = None,
) -> Tuple[Dataset, Dataset]:
    """Generate train and test splits, one shape family per class.

    With probability ``spurious`` a TRAIN sample's background band is its
    class band, otherwise (and always on TEST) the band is drawn uniformly.

    :param classes: Class count in [2, 10]
    :param side: Image side, one of 16, 32, 64
    :param n: Train samples
    :param spurious: Background/class correlation rho in [0, 1]
    :param seed: Generation seed
    :param n_test: Test samples, ``n`` when omitted
    :return: ``(train, test)``
    :rtype: Tuple[Dataset, Dataset]
    :raises ConfigError: Listing every out-of-range argument
    """
    violations = []
    if not 2 <= classes <= len(SHAPES):
        violations.append(f"classes: must lie in [2, {len(SHAPES)}], got {classes}")
    if side not in SUPPORTED_SIDES:
        violations.append(f"side: must be one of {SUPPORTED_SIDES}, got {side}")
    if not 0.0 <= spurious <= 1.0:
        violations.append(f"spurious: must lie in [0, 1], got {spurious}")
    if violations:
        raise ConfigError(violations)
    n_test = n if n_test is None else n_test
    recipe = {"classes": str(classes), "side": str(side), "spurious": repr(float(spurious)), "seed": str(seed)}
    train = _generate_split("train", classes, side, n, spurious, seed, {**recipe, "n": str(n)})
    test = _generate_split("test", classes, side, n_test, spurious, seed, {**recipe, "n": str(n_test)})
    logger.info(f"generated {len(train)} train / {len(test)} test samples, classes={classes} side={side}")
    return train, test


def save_dataset(dataset: Dataset, path):
    """Write ``class_<k>/<id>.pgm`` + ``class_<k>/<id>.mask.pgm`` and ``recipe.txt``."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    for sample in dataset.samples:
        folder = root / f"class_{sample.label}"
        folder.mkdir(exist_ok=True)
        write_pgm(folder / f"{sample.sample_id}.pgm", sample.image[0])
        write_pgm(folder / f"{sample.sample_id}.mask.pgm", sample.gt_mask.astype(np.float64))
    recipe = {**dataset.recipe, "classes": str(dataset.classes), "split": dataset.split}
    (root / "recipe.txt").write_text(format_pairs(recipe))
    logger.info(f"saved {len(dataset)} samples to {root}")


def box_mask(shape: Tuple[int, int], box: Iterable[float]) -> np.ndarray:
    """Inside-box foreground for ``x0 y0 x1 y1`` (inclusive pixel corners)."""
    x0, y0, x1, y1 = (int(round(float(v))) for v in box)
    mask = np.zeros(shape, dtype=bool)
    mask[max(y0, 0) : y1 + 1, max(x0, 0) : x1 + 1] = True
    return mask


def _load_mask(image_path: Path, shape: Tuple[int, int]) -> Optional[np.ndarray]:
    stem = image_path.name[: -len(".pgm")]
    mask_path = image_path.with_name(f"{stem}.mask.pgm")
    box_path = image_path.with_name(f"{stem}.box.txt")
    if mask_path.is_file():
        mask = read_pgm(mask_path) > 0.5
        if mask.shape != shape:
            raise DatasetFormatError(
                f"mask shape {mask.shape} differs from image shape {shape}", str(mask_path)
            )
        return mask
    if box_path.is_file():
        fields = box_path.read_text().split()
        try:
            box = [float(v) for v in fields]
            if not np.all(np.isfinite(box)):
                raise ValueError(fields)
        except ValueError:
            raise DatasetFormatError(f"non-numeric box field in {fields}", str(box_path))
        if len(box) != 4:
            raise DatasetFormatError(f"box needs 4 fields x0 y0 x1 y1, got {len(box)}", str(box_path))
        return box_mask(shape, box)
    return None


def load_folder(path) -> Dataset:
    """Load a ``class_<k>/<id>.pgm`` tree with sibling ``<id>.mask.pgm`` (or ``<id>.box.txt``) files.

    :return: Samples ordered by id, an empty dataset for an empty directory
    :raises DatasetFormatError: For a missing directory, missing masks (all listed) or mismatched dims
    """
    root = Path(path)
    if not root.is_dir():
        raise DatasetFormatError("dataset directory does not exist", str(root))
    recipe = parse_config_text((root / "recipe.txt").read_text()) if (root / "recipe.txt").is_file() else {}

    samples, missing = [], []
    for folder in sorted(root.glob("class_*")):
        try:
            label = int(folder.name[len("class_") :])
        except ValueError:
            raise DatasetFormatError("class folder must be named class_<k>", str(folder))
        for image_path in sorted(folder.glob("*.pgm")):
            if image_path.name.endswith(".mask.pgm"):
                continue
            image = read_pgm(image_path)
            mask = _load_mask(image_path, image.shape)
            if mask is None:
                missing.append(str(image_path.with_name(image_path.name[:-4] + ".mask.pgm")))
                continue
            if not mask.any():
                raise DatasetFormatError("mask has no foreground pixel", str(image_path))
            samples.append(
                LabeledSample(image=image[None], label=label, gt_mask=mask, sample_id=image_path.name[:-4])
            )
    if missing:
        raise DatasetFormatError(f"{len(missing)} image(s) without mask: {', '.join(missing)}", missing[0])

    samples.sort(key=lambda s: s.sample_id)
    if samples and len({s.image.shape for s in samples}) > 1:
        raise DatasetFormatError("images differ in size", str(root))
    if not samples:
        logger.warning(f"no samples found under {root}")
    classes = int(recipe.get("classes", max((s.label for s in samples), default=-1) + 1))
    seed = int(recipe["seed"]) if "seed" in recipe else None
    return Dataset(samples=samples, classes=classes, split=recipe.get("split", "train"), seed=seed, recipe=recipe)


def take_batch(dataset: Dataset, indices: Iterable[int]) -> Batch:
    """Stack the selected samples into a Batch."""
    chosen = [dataset.samples[i] for i in indices]
    return Batch(
        images=np.stack([s.image for s in chosen]),
        labels=np.array([s.label for s in chosen], dtype=np.int64),
        masks=np.stack([s.gt_mask for s in chosen]).astype(np.float64),
        sample_ids=[s.sample_id for s in chosen],
    )


def batches(dataset: Dataset, batch_size: int, seed: int, epoch: int) -> List[Batch]:
    """Shuffle deterministically per ``(seed, epoch)`` and cut into batches.

    A trailing batch with fewer than two samples is dropped.
    """
    order = np.random.default_rng([seed, epoch]).permutation(len(dataset))
    chunks = [order[start : start + batch_size] for start in range(0, len(order), batch_size)]
    return [take_batch(dataset, chunk) for chunk in chunks if len(chunk) >= 2]
