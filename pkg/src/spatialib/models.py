from typing import Any, Dict, List, Literal, Optional, Tuple

import numpy as np
import pydantic
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


METHOD_IDS: Tuple[str, ...] = (
    "saliency",
    "guided_backprop",
    "integrated_gradients",
    "gradcam",
    "gradcam_pp",
    "scorecam",
    "ours",
)
SUPPORTED_SIDES: Tuple[int, ...] = (16, 32, 64)


# ------ Exceptions ------ #
class SpatialIBError(Exception):
    """
    Base exception for every error raised by spatialib.

    .. note:: Catch this exception to handle any library failure, the CLI turns it into a one-line JSON error.
    """

    pass


class ContractError(SpatialIBError):
    """Raised when a caller violates an operation's preconditions."""

    pass


class ShapeError(ContractError):
    """
    Shape mismatch inside a primitive.

    :param primitive: Name of the primitive that rejected its inputs
    :param dims: The offending shapes
    :type primitive: str
    :type dims: tuple
    """

    def __init__(self, primitive: str, dims: tuple, detail: str = ""):
        self.primitive = primitive
        self.dims = tuple(tuple(d) if isinstance(d, (tuple, list)) else d for d in dims)
        message = f"{primitive}: incompatible shapes {self.dims}"
        if detail:
            message += f" ({detail})"
        super().__init__(message)


class DomainError(SpatialIBError):
    """Raised when an attribute lies outside its mathematical domain (e.g. temperature <= 0)."""

    pass


class ConfigError(SpatialIBError):
    """
    Configuration validation failure, lists every violation at once.

    :param violations: One message per violated field
    :type violations: list[str]
    """

    def __init__(self, violations: List[str]):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class ParseError(SpatialIBError):
    """
    Corrupt binary stream (tensor or parameter file).

    :param offset: Byte offset where parsing failed
    :type offset: int
    """

    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} at byte offset {offset}")


class DatasetFormatError(SpatialIBError):
    """Raised when a dataset folder is malformed, the message names the offending file."""

    def __init__(self, message: str, path: str):
        self.path = path
        super().__init__(f"{message}: {path}")


class NonFiniteLossError(SpatialIBError):
    """
    Training produced a NaN/Inf loss.

    :param epoch: Epoch in which the loss diverged
    :param batch_index: Index of the batch within the epoch
    :param terms: Snapshot of the loss terms at failure
    """

    def __init__(self, epoch: int, batch_index: int, terms: Dict[str, float]):
        self.epoch = epoch
        self.batch_index = batch_index
        self.terms = dict(terms)
        super().__init__(
            f"non-finite loss at epoch {epoch}, batch {batch_index}: {self.terms}"
        )


class FaithfulnessError(SpatialIBError):
    """Raised when a faithfulness curve meets a non-finite confidence."""

    def __init__(self, message: str, sample_id: str):
        self.sample_id = sample_id
        super().__init__(f"{message} (sample {sample_id})")


# ------ Network records ------ #
class LayerSpec(BaseModel):
    """
    One layer of a sequential classifier.

    :param name: Layer name, parameters are stored as ``<name>.weight`` / ``<name>.bias``
    :param kind: One of ``conv``, ``relu``, ``avgpool``, ``maxpool``, ``flatten``, ``dense``
    :param in_size: Input channels (conv) or features (dense)
    :param out_size: Output channels (conv) or features (dense)
    :param kernel: Convolution kernel side or pooling window
    :param stride: Convolution stride
    :param padding: Convolution zero padding
    """

    name: str
    kind: Literal["conv", "relu", "avgpool", "maxpool", "flatten", "dense"]
    in_size: int = 0
    out_size: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0


class OptimState(BaseModel):
    """
    SGD-with-momentum state.

    :param lr: Learning rate
    :param momentum: Momentum coefficient mu
    :param buffers: Per-parameter momentum tensors, shapes mirror the parameters
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    lr: float = Field(ge=0.0)
    momentum: float = Field(ge=0.0, lt=1.0)
    buffers: Dict[str, np.ndarray] = {}


# ------ S-IB records ------ #
class SibSettings(BaseModel):
    """
    Knobs of the S-IB objective.

    :param gamma: Weight of the foreground term. That term is the scale-free dependence in [0, 1]
        (linear HSIC of standardized features times ``((n-1)/n)^2 / (d e)``), so gamma = 1 here
        is a weight of ``(n-1)^2 / (n^2 d e)`` on the raw HSIC of the standardized features
    :param tau: Softmax temperature
    :param threshold: Mask head threshold t
    :param sharpness: Mask head sharpness s
    :param mask_override: When set, the mask is this constant everywhere
    :param bg_enabled: Whether the background variance term is part of the objective
    :param variance_mode: ``batch`` (per-pixel variance across the batch) or ``spatial`` (per-image variance across pixels)
    :param cotangent_mode: ``frozen`` (posterior detached as cotangent) or ``attached``
    :param hsic_standardize: ``feature``, ``global`` or ``none`` scaling before the dependence measure
    """

    gamma: float = Field(default=1.0, ge=0.0)
    tau: float = Field(default=1.0, gt=0.0)
    threshold: float = Field(default=0.5, gt=0.0, lt=1.0)
    sharpness: float = Field(default=0.1, gt=0.0)
    mask_override: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    bg_enabled: bool = True
    variance_mode: Literal["batch", "spatial"] = "batch"
    cotangent_mode: Literal["frozen", "attached"] = "frozen"
    hsic_standardize: Literal["feature", "global", "none"] = "feature"

    @classmethod
    def baseline(cls, **kwargs) -> "SibSettings":
        """Settings that reduce the objective to plain cross-entropy."""
        return cls(gamma=0.0, bg_enabled=False, **kwargs)

    @property
    def decodes(self) -> bool:
        """Whether the VJP decoding contributes to the objective at all."""
        return self.gamma > 0.0 or self.bg_enabled


class SibLossTerms(BaseModel):
    """
    Terms of the S-IB objective for one batch.

    :param l_ce: Cross-entropy
    :param l_fg: Foreground term, minus the HSIC dependence
    :param l_bg: Background variance
    :param gamma: Weight applied to ``l_fg``
    :param total: ``l_ce + l_bg + gamma * l_fg``
    :param hsic_fg: Dependence between R_fg and X_fg
    :param hsic_bg: Dependence between R_bg and X_bg
    :param correct: Number of correctly classified samples in the batch
    :param objective: Graph-connected scalar for ``total`` (a DiffValue)
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    l_ce: float
    l_fg: float
    l_bg: float
    gamma: float
    total: float
    hsic_fg: float = 0.0
    hsic_bg: float = 0.0
    correct: int = 0
    objective: Any = Field(default=None, exclude=True)

    def snapshot(self) -> Dict[str, float]:
        return {"l_ce": self.l_ce, "l_fg": self.l_fg, "l_bg": self.l_bg, "total": self.total}


class EpochRecord(BaseModel):
    """
    One row of the training log.

    :param acc: Top-1 accuracy over the whole training split
    :param l_ce: Cross-entropy on the monitor batch, as are the remaining terms
    """

    epoch: int
    acc: float
    l_ce: float
    l_fg: float
    l_bg: float
    hsic_fg: float
    hsic_bg: float


# ------ Explanation / evaluation records ------ #
class SaliencyMap(BaseModel):
    """
    Per-pixel attribution aligned with an input image.

    :param scores: h x w map, nonnegative, max-normalized to [0, 1]
    :param raw: Signed, unnormalized attribution the scores were derived from
    :param method: Method id
    :param target: Attributed class
    :param forward_passes: Forward passes spent on scoring (ScoreCAM accounting)
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    scores: np.ndarray
    raw: Optional[np.ndarray] = None
    method: str
    target: int
    forward_passes: int = 0

    @field_validator("scores")
    @classmethod
    def _check_scores(cls, v: np.ndarray) -> np.ndarray:
        if v.ndim != 2:
            raise ValueError(f"saliency scores must be 2-D, got shape {v.shape}")
        if not np.all(np.isfinite(v)) or np.any(v < 0) or np.any(v > 1):
            raise ValueError("saliency scores must be finite and within [0, 1]")
        return v


class LocalizationReport(BaseModel):
    """Pixel Acc / mIoU / mAP aggregated as the mean of the per-sample values."""

    pixel_acc: float = Field(ge=0.0, le=1.0)
    miou: float = Field(ge=0.0, le=1.0)
    map: float = Field(ge=0.0, le=1.0)
    per_sample: List[Dict[str, float]] = []


class FaithfulnessCurve(BaseModel):
    """
    Insertion or deletion curve.

    :param fractions: Increasing fractions of pixels, from 0 to 1
    :param confidences: Posterior of the originally predicted class at each fraction
    :param auc: Trapezoidal area under the curve
    """

    kind: Literal["insertion", "deletion"]
    fractions: List[float]
    confidences: List[float]
    auc: float = Field(ge=0.0, le=1.0)

    @model_validator(mode="after")
    def _check_axis(self) -> "FaithfulnessCurve":
        if len(self.fractions) != len(self.confidences):
            raise ValueError("fractions and confidences differ in length")
        if self.fractions[0] != 0.0 or self.fractions[-1] != 1.0:
            raise ValueError("fractions must start at 0 and end at 1")
        return self


class MiQuadrants(BaseModel):
    """Dependence between the four (X-region, R-region) pairs."""

    fg_fg: float = Field(ge=-1e-12)
    bg_bg: float = Field(ge=-1e-12)
    fg_bg: float = Field(ge=-1e-12)
    bg_fg: float = Field(ge=-1e-12)

    @property
    def within(self) -> float:
        return min(self.fg_fg, self.bg_bg)

    @property
    def cross(self) -> float:
        return max(self.fg_bg, self.bg_fg)


class BoundCheck(BaseModel):
    """Gaussian-channel bound ``0.5 log2 det(I + S/s^2) <= tr(S) / (2 s^2 ln 2)``."""

    lhs: float
    rhs: float
    holds: bool
    ratio: float


class SufficiencyResult(BaseModel):
    """
    Outcome of the linear-model reconstruction check.

    :param residual: Max abs error of the recovered posterior, None when the condition is violated
    :param rank: Rank of the restricted logit Jacobian
    :param required_rank: ``min(C, |M|)``
    :param condition_holds: Whether the rank condition (and recoverability) holds
    """

    residual: Optional[float]
    rank: int
    required_rank: int
    condition_holds: bool


# ------ Data records ------ #
class LabeledSample(BaseModel):
    """
    One image with its label and ground-truth foreground mask.

    :param image: 1 x h x w image in [0, 1]
    :param label: Class index
    :param gt_mask: Binary h x w mask with at least one foreground pixel
    :param sample_id: Stable identifier, used in file names
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    image: np.ndarray
    label: int = Field(ge=0)
    gt_mask: np.ndarray
    sample_id: str

    @model_validator(mode="after")
    def _check_shapes(self) -> "LabeledSample":
        if self.image.ndim != 3 or self.image.shape[0] != 1:
            raise ValueError(f"image must be 1 x h x w, got {self.image.shape}")
        if self.gt_mask.shape != self.image.shape[1:]:
            raise ValueError(
                f"mask shape {self.gt_mask.shape} differs from image {self.image.shape[1:]}"
            )
        if not np.any(self.gt_mask):
            raise ValueError("mask has no foreground pixel")
        return self


class Dataset(BaseModel):
    """
    A split of labeled samples.

    :param samples: The samples, in generation/loading order
    :param classes: Class count
    :param split: ``train`` or ``test``
    :param seed: Generation seed (None for ingested folders)
    :param recipe: Generation recipe as key/value strings
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    samples: List[LabeledSample] = []
    classes: int = Field(ge=0)
    split: str = "train"
    seed: Optional[int] = None
    recipe: Dict[str, str] = {}

    def __len__(self) -> int:
        return len(self.samples)

    def images(self) -> np.ndarray:
        return np.stack([s.image for s in self.samples])

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def masks(self) -> np.ndarray:
        return np.stack([s.gt_mask for s in self.samples]).astype(np.float64)


class Batch(BaseModel):
    """Stacked samples: images (B,1,h,w), labels (B,), masks (B,h,w)."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    images: np.ndarray
    labels: np.ndarray
    masks: np.ndarray
    sample_ids: List[str] = []

    def __len__(self) -> int:
        return int(self.images.shape[0])


# ------ Run configuration ------ #
class RunConfig(BaseModel):
    """
    Everything a CLI command needs, validated before any compute.

    Unknown keys are rejected, every violation is reported at once.
    """

    model_config = ConfigDict(extra="forbid")

    # data
    data_path: Optional[str] = None
    classes: int = Field(default=3, ge=2, le=10)
    side: int = 32
    n_train: int = Field(default=2000, ge=2)
    n_test: int = Field(default=500, ge=2)
    spurious: float = Field(default=0.0, ge=0.0, le=1.0)
    # model
    channels: int = Field(default=8, ge=1)
    # objective
    mode: Literal["baseline", "sib"] = "sib"
    tau: float = Field(default=1.0, gt=0.0)
    gamma: float = Field(default=1.0, ge=0.0)
    mask_threshold: float = Field(default=0.5, gt=0.0, lt=1.0)
    mask_sharpness: float = Field(default=0.1, gt=0.0)
    variance_mode: Literal["batch", "spatial"] = "batch"
    cotangent_mode: Literal["frozen", "attached"] = "frozen"
    hsic_standardize: Literal["feature", "global", "none"] = "feature"
    # optimizer
    lr: float = Field(default=0.01, ge=0.0)
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    epochs: int = Field(default=30, ge=0)
    batch_size: int = Field(default=16, ge=2)
    monitor_size: int = Field(default=64, ge=2)
    # seeds / outputs
    seed: int = Field(default=0, ge=0)
    seeds: List[int] = [0, 1, 2]
    out: str = "runs"
    # evaluation
    methods: List[str] = list(METHOD_IDS)
    eval_samples: int = Field(default=100, ge=1)
    binarize_threshold: float = Field(default=0.5, gt=0.0, lt=1.0)
    faithfulness_steps: int = Field(default=100, ge=10)
    ig_steps: int = Field(default=32, ge=8)
    top_k: int = Field(default=2, ge=1)
    workers: int = Field(default=1, ge=1)

    @field_validator("seeds", "methods", mode="before")
    @classmethod
    def _split_list(cls, v: Any) -> Any:
        if isinstance(v, str):
            return [item.strip() for item in v.split(",") if item.strip()]
        return v

    @field_validator("seeds")
    @classmethod
    def _check_seeds(cls, v: List[int]) -> List[int]:
        if not v or any(s < 0 for s in v):
            raise ValueError("seeds must be a nonempty list of nonnegative integers")
        return v

    @field_validator("side")
    @classmethod
    def _check_side(cls, v: int) -> int:
        if v not in SUPPORTED_SIDES:
            raise ValueError(f"side must be one of {SUPPORTED_SIDES}")
        return v

    @field_validator("methods")
    @classmethod
    def _check_methods(cls, v: List[str]) -> List[str]:
        unknown = [m for m in v if m not in METHOD_IDS]
        if unknown:
            raise ValueError(f"unknown methods {unknown}, expected a subset of {list(METHOD_IDS)}")
        return v

    @model_validator(mode="after")
    def _check_top_k(self) -> "RunConfig":
        if self.top_k > self.classes:
            raise ValueError(f"top_k={self.top_k} exceeds classes={self.classes}")
        return self

    def sib_settings(self) -> SibSettings:
        """Objective settings for this run, baseline mode disables both S-IB terms."""
        common = dict(
            tau=self.tau,
            threshold=self.mask_threshold,
            sharpness=self.mask_sharpness,
            variance_mode=self.variance_mode,
            cotangent_mode=self.cotangent_mode,
            hsic_standardize=self.hsic_standardize,
        )
        if self.mode == "baseline":
            return SibSettings.baseline(**common)
        return SibSettings(gamma=self.gamma, **common)

    def run_tag(self) -> str:
        return f"{self.mode}_seed{self.seed}"


def config_violations(error: pydantic.ValidationError) -> List[str]:
    """Flatten a pydantic validation error into one message per violation."""
    violations = []
    for item in error.errors():
        location = ".".join(str(part) for part in item["loc"]) or "config"
        violations.append(f"{location}: {item['msg']}")
    return violations
