"""Core value types, training configuration, and validation shared by all modules.

Everything here is plain numpy + stdlib. Arrays are frozen (read-only) at
construction so instances can be shared across threads without copying.
"""

from __future__ import annotations

import enum
import math
from contextlib import contextmanager
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

VALID_ROTATIONS = (0, 90, 180, 270)

# Tolerance on |score_c - spatial_mean(class_map[..., c])| for ActivationStack.
SCORE_POOL_TOL = 1e-5


class WeaksegError(Exception):
    """Base class for toolkit errors."""


class ConfigError(WeaksegError):
    """Raised for malformed config files or invalid config values."""


class DatasetError(WeaksegError):
    """Raised for dataset ingestion / pairing / split problems."""


class CheckpointError(WeaksegError):
    """Raised for unreadable or metadata-mismatched checkpoint files."""


class MaskLeakError(WeaksegError):
    """Raised when a training path reads ground-truth mask contents."""


class MaskSource(enum.Enum):
    """Which visualization produced a saliency map / pseudo-mask."""

    CAM = "cam"
    MIDLAYER = "midlayer"


# ---------------------------------------------------------------------------
# gt_mask access auditing
# ---------------------------------------------------------------------------
# Ground-truth masks are evaluation-only. Every read of ImageSample.gt_mask
# contents is reported to the active audit contexts; the training entry points
# wrap themselves in one and hard-fail if anything was recorded.

_GT_AUDITS: list[list[str]] = []


@contextmanager
def audit_gt_reads() -> Iterator[list[str]]:
    """Record ids whose gt_mask contents are read while the context is open."""
    reads: list[str] = []
    _GT_AUDITS.append(reads)
    try:
        yield reads
    finally:
        _GT_AUDITS.remove(reads)


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


class ImageSample:
    """One RGB image with an image-level fire label.

    pixels are (H, W, 3) float64 in [0, 1]. The optional ground-truth mask is
    only for evaluation; reading it goes through a property so leakage into
    training paths can be audited (see audit_gt_reads).
    """

    __slots__ = ("sample_id", "pixels", "label", "_gt_mask")

    def __init__(self, sample_id: str, pixels, label: int, gt_mask=None):
        pixels = np.asarray(pixels, dtype=np.float64)
        if pixels.ndim != 3 or pixels.shape[2] != 3:
            raise ValueError(f"sample {sample_id!r}: pixels must be (H, W, 3), got {pixels.shape}")
        h, w = pixels.shape[:2]
        if h < 32 or w < 32:
            raise ValueError(f"sample {sample_id!r}: image must be at least 32x32, got {h}x{w}")
        lo, hi = float(pixels.min()), float(pixels.max())
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"sample {sample_id!r}: pixel values must lie in [0,1], got [{lo:g},{hi:g}]")
        if label not in (0, 1):
            raise ValueError(f"sample {sample_id!r}: label must be 0 or 1, got {label!r}")
        if gt_mask is not None:
            gt_mask = np.asarray(gt_mask)
            if gt_mask.shape != (h, w):
                raise ValueError(
                    f"sample {sample_id!r}: gt_mask shape {gt_mask.shape} != image shape {(h, w)}"
                )
            vals = np.unique(gt_mask)
            if not np.isin(vals, (0, 1)).all():
                raise ValueError(f"sample {sample_id!r}: gt_mask values must be 0/1")
            gt_mask = _freeze(gt_mask.astype(bool))
        self.sample_id = sample_id
        self.pixels = _freeze(pixels)
        self.label = int(label)
        self._gt_mask = gt_mask

    @property
    def gt_mask(self) -> Optional[np.ndarray]:
        """Ground-truth mask contents (audited read); None when unavailable."""
        if self._gt_mask is not None:
            for log in _GT_AUDITS:
                log.append(self.sample_id)
        return self._gt_mask

    @property
    def has_gt_mask(self) -> bool:
        """Presence check that does not count as a content read."""
        return self._gt_mask is not None

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def __repr__(self) -> str:
        return (
            f"ImageSample(id={self.sample_id!r}, shape={self.pixels.shape}, "
            f"label={self.label}, gt={'yes' if self.has_gt_mask else 'no'})"
        )


@dataclass(frozen=True)
class ActivationStack:
    """Feature taps from one classifier forward pass.

    features: penultimate conv block output, (H_m, W_m, K), entries >= 0.
    class_map: 1x1-conv output, (H_a, W_a, C).
    scores: pre-activation class scores, (C,), equal to the spatial mean of
    class_map per channel (the pooled-score identity).
    """

    features: np.ndarray
    class_map: np.ndarray
    scores: np.ndarray
    sample_id: str = ""

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        cmap = np.asarray(self.class_map, dtype=np.float64)
        scores = np.atleast_1d(np.asarray(self.scores, dtype=np.float64))
        if feats.ndim != 3:
            raise ValueError(f"features must be (H, W, K), got {feats.shape}")
        if cmap.ndim != 3:
            raise ValueError(f"class_map must be (H, W, C), got {cmap.shape}")
        if feats.min() < 0:
            raise ValueError("features must be non-negative (post-nonlinearity tap)")
        if scores.shape != (cmap.shape[2],):
            raise ValueError(f"scores shape {scores.shape} != channel count {cmap.shape[2]}")
        pooled = cmap.mean(axis=(0, 1))
        gap = float(np.abs(pooled - scores).max())
        if gap > SCORE_POOL_TOL:
            raise ValueError(
                f"scores differ from spatial mean of class_map by {gap:g} (> {SCORE_POOL_TOL:g})"
            )
        object.__setattr__(self, "features", _freeze(feats))
        object.__setattr__(self, "class_map", _freeze(cmap))
        object.__setattr__(self, "scores", _freeze(scores))

    @property
    def num_channels(self) -> int:
        return self.class_map.shape[2]


@dataclass(frozen=True)
class SaliencyMap:
    """Single-channel non-negative map; negatives are clamped at construction."""

    values: np.ndarray
    source: MaskSource
    sample_id: str = ""

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 2:
            raise ValueError(f"saliency values must be 2-D, got shape {vals.shape}")
        object.__setattr__(self, "values", _freeze(np.maximum(vals, 0.0)))
        if not isinstance(self.source, MaskSource):
            object.__setattr__(self, "source", MaskSource(self.source))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class PseudoMask:
    """Binary mask at image resolution plus the threshold that produced it."""

    mask: np.ndarray
    tau: float
    source: MaskSource

    def __post_init__(self):
        mask = np.asarray(self.mask)
        if mask.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
        if not (0.0 <= self.tau <= 1.0):
            raise ValueError(f"tau must lie in [0,1], got {self.tau:g}")
        object.__setattr__(self, "mask", _freeze(mask.astype(bool)))
        if not isinstance(self.source, MaskSource):
            object.__setattr__(self, "source", MaskSource(self.source))

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape


@dataclass(frozen=True)
class TrainConfig:
    """All hyperparameters for both training stages.

    Defaults are the published protocol values; lr/epochs are config knobs and
    are expected to be overridden for desk-scale synthetic runs.
    """

    lambda_reg: float = 0.6
    tau: float = 0.55
    rotations: tuple[int, ...] = (0, 90, 180, 270)
    lr_stage1: float = 3e-5
    lr_stage2: float = 5e-5
    weight_decay: float = 1e-6
    epochs_stage1: int = 50
    epochs_stage2: int = 50
    split_fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)
    seed: int = 0
    batch_size: int = 16
    beta_stage2: float = 1.0
    reg_tap: str = "classmap"
    reg_batch_reduction: str = "mean"

    def replace(self, **kw) -> "TrainConfig":
        return replace(self, **kw)


def validate_config(cfg: TrainConfig) -> list[str]:
    """Return one message per violated invariant; empty list when valid.

    Validation reports, it never throws. epochs may be 0 (an explicit no-op
    training run); negative values are rejected.
    """
    bad: list[str] = []
    if cfg.lambda_reg < 0:
        bad.append(f"lambda_reg must be >= 0, got {cfg.lambda_reg:g}")
    if not (0.0 <= cfg.tau <= 1.0):
        bad.append(f"tau must be in [0,1], got {cfg.tau:g}")
    seen: set[int] = set()
    for r in cfg.rotations:
        if r not in VALID_ROTATIONS:
            bad.append(f"rotation {r} not in {{0,90,180,270}}")
        elif r in seen:
            bad.append(f"duplicate rotation {r}")
        seen.add(r)
    if cfg.lr_stage1 <= 0:
        bad.append(f"lr_stage1 must be > 0, got {cfg.lr_stage1:g}")
    if cfg.lr_stage2 <= 0:
        bad.append(f"lr_stage2 must be > 0, got {cfg.lr_stage2:g}")
    if cfg.weight_decay < 0:
        bad.append(f"weight_decay must be >= 0, got {cfg.weight_decay:g}")
    if cfg.epochs_stage1 < 0:
        bad.append(f"epochs_stage1 must be >= 0, got {cfg.epochs_stage1}")
    if cfg.epochs_stage2 < 0:
        bad.append(f"epochs_stage2 must be >= 0, got {cfg.epochs_stage2}")
    if len(cfg.split_fractions) != 3:
        bad.append(f"split_fractions needs 3 entries, got {len(cfg.split_fractions)}")
    else:
        for f in cfg.split_fractions:
            if f <= 0:
                bad.append(f"split fraction {f:g} must be > 0")
        total = math.fsum(cfg.split_fractions)
        if abs(total - 1.0) > 1e-9:
            bad.append(f"split fractions sum to {total:g}")
    if cfg.batch_size <= 0:
        bad.append(f"batch_size must be > 0, got {cfg.batch_size}")
    if not (0.0 < cfg.beta_stage2 <= 1.0):
        bad.append(f"beta_stage2 must be in (0,1], got {cfg.beta_stage2:g}")
    if cfg.reg_tap not in ("classmap", "features"):
        bad.append(f"reg_tap must be 'classmap' or 'features', got {cfg.reg_tap!r}")
    if cfg.reg_batch_reduction not in ("mean", "sum"):
        bad.append(f"reg_batch_reduction must be 'mean' or 'sum', got {cfg.reg_batch_reduction!r}")
    return bad


# ---------------------------------------------------------------------------
# Config file format: one "key = value" per line, lists comma-separated,
# '#' starts a comment. Unknown keys are an error.
# ---------------------------------------------------------------------------

_INT_FIELDS = {"epochs_stage1", "epochs_stage2", "seed", "batch_size"}
_FLOAT_FIELDS = {"lambda_reg", "tau", "lr_stage1", "lr_stage2", "weight_decay", "beta_stage2"}
_STR_FIELDS = {"reg_tap", "reg_batch_reduction"}
_INT_LIST_FIELDS = {"rotations"}
_FLOAT_LIST_FIELDS = {"split_fractions"}

CONFIG_KEYS = tuple(f.name for f in fields(TrainConfig))


def parse_config_value(key: str, raw: str):
    """Parse one config value string for the given TrainConfig key."""
    raw = raw.strip()
    try:
        if key in _INT_FIELDS:
            return int(raw)
        if key in _FLOAT_FIELDS:
            return float(raw)
        if key in _STR_FIELDS:
            return raw
        if key in _INT_LIST_FIELDS:
            return tuple(int(tok) for tok in raw.split(",") if tok.strip() != "")
        if key in _FLOAT_LIST_FIELDS:
            return tuple(float(tok) for tok in raw.split(",") if tok.strip() != "")
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    raise ConfigError(f"unknown config key {key!r}")


def load_config(path) -> TrainConfig:
    """Load a TrainConfig from a flat key = value file."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    overrides = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        overrides[key] = parse_config_value(key, raw)
    return TrainConfig(**overrides)


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(repr(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def save_config(cfg: TrainConfig, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{f.name} = {_format_value(getattr(cfg, f.name))}" for f in fields(TrainConfig)]
    path.write_text("\n".join(lines) + "\n")
