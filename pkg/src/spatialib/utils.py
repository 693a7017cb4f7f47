from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Union

import numpy as np
import pandas as pd
import pydantic
from PIL import Image

# Setup logging
import logging

logger = logging.getLogger("spatialib")

from spatialib.models import ConfigError, RunConfig, config_violations

SPLIT_CODES = {"train": 0, "test": 1, "monitor": 2}

PathLike = Union[str, Path]


# ------ key=value files ------ #
def parse_config_text(text: str) -> Dict[str, str]:
    """Parse ``key=value`` lines, ``#`` starts a comment, blank lines are skipped.

    :raises ConfigError: Listing every malformed or duplicated line at once
    """
    values: Dict[str, str] = {}
    violations = []
    for number, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            violations.append(f"line {number}: expected key=value, got {line!r}")
        elif key in values:
            violations.append(f"line {number}: duplicate key {key!r}")
        else:
            values[key] = value
    if violations:
        raise ConfigError(violations)
    return values


def format_pairs(values: Mapping[str, Any]) -> str:
    """Inverse of :func:`parse_config_text` for flat mappings, None values are left out."""
    lines = []
    for key, value in values.items():
        if value is None:
            continue
        if isinstance(value, (list, tuple)):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"


def build_config(values: Mapping[str, Any]) -> RunConfig:
    """Validate raw values into a RunConfig.

    :raises ConfigError: With one entry per violation
    """
    try:
        return RunConfig.model_validate(dict(values))
    except pydantic.ValidationError as error:
        raise ConfigError(config_violations(error))


def load_config(path: Optional[PathLike] = None, overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """Read a config file (optional), apply non-None overrides, validate.

    .. code-block:: python

        config = load_config("run.cfg", {"seed": 3, "mode": "baseline"})
    """
    values: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError([f"config: file {path} does not exist"])
        values.update(parse_config_text(path.read_text()))
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value
    logger.debug(f"resolved config values: {values}")
    return build_config(values)


def format_config(config: RunConfig) -> str:
    """Effective config with defaults resolved, re-parseable by :func:`load_config`."""
    return format_pairs(config.model_dump())


# ------ images ------ #
def to_uint8(values: np.ndarray) -> np.ndarray:
    return np.round(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pgm(path: PathLike, values: np.ndarray):
    """Write an h x w map in [0, 1] as binary 8-bit PGM (P5)."""
    Image.fromarray(to_uint8(np.asarray(values))).save(path, format="PPM")


def read_pgm(path: PathLike) -> np.ndarray:
    """Read an 8-bit grayscale image as floats ``k / 255``."""
    with Image.open(path) as image:
        if image.mode != "L":
            image = image.convert("L")
        return np.asarray(image, dtype=np.float64) / 255.0


def write_ppm(path: PathLike, rgb: np.ndarray):
    """Write an h x w x 3 image in [0, 1] as binary PPM (P6)."""
    Image.fromarray(to_uint8(np.asarray(rgb))).save(path, format="PPM")


# ------ randomness ------ #
def sample_rng(seed: int, split: str, index: int) -> np.random.Generator:
    """Independent stream for one sample, derived from ``(seed, split, index)``."""
    return np.random.default_rng([seed, SPLIT_CODES[split], index])


# ------ tables ------ #
def write_csv(path: PathLike, rows: Union[pd.DataFrame, Iterable[Mapping[str, Any]]], columns: Optional[List[str]] = None):
    """Write rows as CSV with a fixed float format, so reruns produce identical bytes."""
    frame = rows if isinstance(rows, pd.DataFrame) else pd.DataFrame(list(rows), columns=columns)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.10g")
    logger.info(f"wrote {path} ({len(frame)} rows)")
    return frame
