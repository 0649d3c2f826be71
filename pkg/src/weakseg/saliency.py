"""Saliency maps from activation taps and their binarization into pseudo-masks.

Two visualizations: the class-map tap itself (CAM-style, negatives clamped)
and the channel mean of the penultimate features (mid-layer). Both are
upsampled bilinearly to image resolution and thresholded at a fraction of
their maximum.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .datamodel import ActivationStack, MaskSource, PseudoMask, SaliencyMap


def cam_map(stack: ActivationStack, class_index: int = 0) -> SaliencyMap:
    """Class-map channel with negatives clamped to zero."""
    if not (0 <= class_index < stack.num_channels):
        raise ValueError(
            f"class_index {class_index} out of range for {stack.num_channels} channel(s)"
        )
    # SaliencyMap clamps at construction.
    return SaliencyMap(
        values=stack.class_map[:, :, class_index],
        source=MaskSource.CAM,
        sample_id=stack.sample_id,
    )


def midlayer_map(stack: ActivationStack) -> SaliencyMap:
    """Per-position mean over the penultimate feature channels."""
    if stack.features.shape[2] < 1:
        raise ValueError("features tap has no channels")
    return SaliencyMap(
        values=stack.features.mean(axis=2),
        source=MaskSource.MIDLAYER,
        sample_id=stack.sample_id,
    )


def _bilinear_resize(values: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Separable bilinear resize with corner-aligned sampling.

    Corners map to corners, so when (target-1) is a multiple of (source-1)
    every source pixel lands exactly on an output pixel and extrema survive.
    """
    sh, sw = values.shape
    th, tw = target
    rows = np.arange(th) * ((sh - 1) / (th - 1)) if th > 1 else np.zeros(1)
    cols = np.arange(tw) * ((sw - 1) / (tw - 1)) if tw > 1 else np.zeros(1)
    if sh == 1:
        rows = np.zeros(th)
    if sw == 1:
        cols = np.zeros(tw)
    r0 = np.floor(rows).astype(int)
    c0 = np.floor(cols).astype(int)
    r1 = np.minimum(r0 + 1, sh - 1)
    c1 = np.minimum(c0 + 1, sw - 1)
    fr = (rows - r0)[:, None]
    fc = (cols - c0)[None, :]
    top = values[r0][:, c0] * (1 - fc) + values[r0][:, c1] * fc
    bot = values[r1][:, c0] * (1 - fc) + values[r1][:, c1] * fc
    return top * (1 - fr) + bot * fr


def upsample(smap: SaliencyMap, target: tuple[int, int]) -> SaliencyMap:
    """Bilinearly upsample a saliency map to image resolution."""
    th, tw = int(target[0]), int(target[1])
    sh, sw = smap.shape
    if th < sh or tw < sw:
        raise ValueError(f"target {th}x{tw} smaller than source {sh}x{sw}")
    if (th, tw) == (sh, sw):
        return smap
    return SaliencyMap(
        values=_bilinear_resize(smap.values, (th, tw)),
        source=smap.source,
        sample_id=smap.sample_id,
    )


def resize_image(pixels: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Bilinear per-channel resize of an (H, W, 3) image in [0, 1]."""
    out = np.empty((target[0], target[1], pixels.shape[2]), dtype=np.float64)
    for c in range(pixels.shape[2]):
        out[:, :, c] = _bilinear_resize(pixels[:, :, c], target)
    return out


def binarize(smap: SaliencyMap, tau: float) -> PseudoMask:
    """Threshold at tau * max(map); >= keeps the argmax pixel even at tau=1.

    An all-zero map gives an all-zero mask for any tau.
    """
    if not (0.0 <= tau <= 1.0):
        raise ValueError(f"tau must lie in [0,1], got {tau:g}")
    peak = float(smap.values.max()) if smap.values.size else 0.0
    if peak <= 0.0:
        mask = np.zeros(smap.shape, dtype=bool)
    else:
        mask = smap.values >= tau * peak
    return PseudoMask(mask=mask, tau=float(tau), source=smap.source)


# ---------------------------------------------------------------------------
# Raster files: masks as 0/255 single-channel PNG, saliency as max-normalized
# grayscale PNG for visualization.
# ---------------------------------------------------------------------------

def write_mask_png(mask: np.ndarray, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img = Image.fromarray((np.asarray(mask, dtype=bool) * np.uint8(255)), mode="L")
    img.save(path, format="PNG")


def read_mask_png(path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("L"))
    return arr > 127


def write_saliency_png(smap: SaliencyMap, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    peak = float(smap.values.max())
    norm = smap.values / peak if peak > 0 else smap.values
    img = Image.fromarray(np.round(norm * 255).astype(np.uint8), mode="L")
    img.save(path, format="PNG")
