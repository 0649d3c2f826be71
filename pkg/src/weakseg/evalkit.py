"""Pixel-level evaluation: IoU, mean-IoU rows, ablation tables, overlays."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .datamodel import DatasetError, ImageSample, PseudoMask


@dataclass(frozen=True)
class EvalRow:
    """Mean IoU (percent) of one method over n samples."""

    method_name: str
    mean_iou: float
    n_samples: int

    def __post_init__(self):
        if self.n_samples <= 0:
            raise ValueError(f"n_samples must be > 0, got {self.n_samples}")
        if not (0.0 <= self.mean_iou <= 100.0):
            raise ValueError(f"mean_iou must lie in [0,100], got {self.mean_iou:g}")


def _as_binary(mask) -> np.ndarray:
    if isinstance(mask, PseudoMask):
        return mask.mask
    arr = np.asarray(mask)
    if arr.dtype.kind == "f":
        return arr >= 0.5  # probability maps binarize at 0.5
    return arr != 0


def iou(pred, gt) -> float:
    """Intersection over union of two binary rasters; empty vs empty is 1.0."""
    p = _as_binary(pred)
    g = _as_binary(gt)
    if p.shape != g.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {g.shape}")
    union = int(np.logical_or(p, g).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(p, g).sum()) / union


def evaluate_masks(
    masks: Sequence,
    samples: Sequence[ImageSample],
    method_name: str = "",
    include_negatives: bool = False,
) -> EvalRow:
    """Mean per-sample IoU x 100 against ground truth.

    masks align with samples by position and may be PseudoMasks, binary
    rasters, or probability maps (binarized at 0.5). Positives without a
    gt_mask are an error; negatives are skipped unless include_negatives,
    in which case a missing negative mask counts as all-background.
    """
    if len(masks) != len(samples):
        raise ValueError(f"{len(masks)} masks for {len(samples)} samples")
    scores = []
    for mask, sample in zip(masks, samples):
        if sample.label == 0 and not include_negatives:
            continue
        gt = sample.gt_mask
        if gt is None:
            if sample.label == 0:
                gt = np.zeros(sample.pixels.shape[:2], dtype=bool)
            else:
                raise DatasetError(f"sample {sample.sample_id!r} has no gt_mask")
        scores.append(iou(mask, gt))
    if not scores:
        raise DatasetError("no samples with ground truth to evaluate")
    return EvalRow(method_name, 100.0 * float(np.mean(scores)), len(scores))


def ablation_table(rows: Sequence[EvalRow], sidecar_path=None) -> str:
    """Fixed-width text table of EvalRows, optionally with a JSON sidecar."""
    if not rows:
        raise ValueError("ablation table needs at least one row")
    name_w = max(len("Stage"), max(len(r.method_name) for r in rows))
    lines = [f"{'Stage':<{name_w}}  {'IOU':>7}  {'n':>6}"]
    for r in rows:
        lines.append(f"{r.method_name:<{name_w}}  {r.mean_iou:>7.2f}  {r.n_samples:>6d}")
    text = "\n".join(lines)
    if sidecar_path is not None:
        sidecar_path = Path(sidecar_path)
        sidecar_path.parent.mkdir(parents=True, exist_ok=True)
        payload = [
            {"method": r.method_name, "mean_iou": r.mean_iou, "n": r.n_samples} for r in rows
        ]
        sidecar_path.write_text(json.dumps(payload, indent=2) + "\n")
    return text


OVERLAY_ALPHA = 0.5
OVERLAY_COLOR = (1.0, 0.0, 0.0)


def render_overlay(sample: ImageSample, mask) -> np.ndarray:
    """Original image with the mask region tinted; untouched where mask is 0."""
    m = _as_binary(mask)
    if m.shape != sample.pixels.shape[:2]:
        raise ValueError(f"mask shape {m.shape} != image shape {sample.pixels.shape[:2]}")
    out = sample.pixels.copy()
    tint = np.asarray(OVERLAY_COLOR, dtype=np.float64)
    out[m] = (1.0 - OVERLAY_ALPHA) * out[m] + OVERLAY_ALPHA * tint
    return out


def write_rgb_png(pixels: np.ndarray, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img = Image.fromarray(np.round(np.clip(pixels, 0, 1) * 255).astype(np.uint8), mode="RGB")
    img.save(path, format="PNG")
