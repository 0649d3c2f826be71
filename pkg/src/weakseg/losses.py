"""Training objectives: label cross-entropy, rotation-equivariance regularizer,
their weighted combination, and a finite-difference gradient verifier.

Rotations are axis-aligned quarter turns acting by pixel permutation, so the
group laws hold exactly and the regularizer needs no interpolation. The
regularizer compares the class map of an image against the back-rotated class
map of the rotated image: per-sample Frobenius norm (not squared), summed over
the rotation set, averaged over the batch by default.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .classifier import ClassifierModel, batch_to_tensor
from .datamodel import ImageSample, TrainConfig, VALID_ROTATIONS


@dataclass(frozen=True)
class RotationOp:
    """Clockwise rotation by a multiple of 90 degrees (pixel permutation)."""

    degrees: int

    def __post_init__(self):
        if self.degrees not in VALID_ROTATIONS:
            raise ValueError(f"rotation {self.degrees} not in {{0,90,180,270}}")

    def apply(self, raster, axes: tuple[int, int] = (0, 1)):
        """Rotate the given spatial axes clockwise; works on ndarray or Tensor."""
        k = (4 - self.degrees // 90) % 4  # clockwise = k counter-clockwise quarter turns
        if isinstance(raster, torch.Tensor):
            return torch.rot90(raster, k, dims=axes)
        return np.rot90(np.asarray(raster), k, axes=axes)

    def inverse(self) -> "RotationOp":
        return RotationOp((360 - self.degrees) % 360)


def rotation_ops(rotations: Iterable) -> tuple[RotationOp, ...]:
    """Coerce an iterable of degrees and/or RotationOps."""
    ops = []
    for r in rotations:
        ops.append(r if isinstance(r, RotationOp) else RotationOp(int(r)))
    return tuple(ops)


@dataclass(frozen=True)
class LossReport:
    """One joint-loss evaluation: total = l_ce + lambda_reg * l_reg."""

    l_ce: float
    l_reg: float
    total: float
    lambda_reg: float

    def __post_init__(self):
        if self.l_ce < 0 or self.l_reg < 0:
            raise ValueError(f"loss terms must be >= 0, got l_ce={self.l_ce:g} l_reg={self.l_reg:g}")
        expected = self.l_ce + self.lambda_reg * self.l_reg
        if abs(self.total - expected) > 1e-9:
            raise ValueError(f"total {self.total!r} != l_ce + lambda*l_reg = {expected!r}")

    def log_line(self, epoch: int) -> str:
        """Tab-separated log record: epoch, l_ce, l_reg, total, lambda."""
        return f"{epoch}\t{self.l_ce!r}\t{self.l_reg!r}\t{self.total!r}\t{self.lambda_reg!r}"


def parse_log_line(line: str) -> tuple[int, LossReport]:
    epoch, l_ce, l_reg, total, lam = line.strip().split("\t")
    return int(epoch), LossReport(float(l_ce), float(l_reg), float(total), float(lam))


def _bce_logits(scores: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return F.binary_cross_entropy_with_logits(scores, labels)


def label_ce_loss(scores, labels) -> float:
    """Mean binary cross-entropy of pre-sigmoid logits against 0/1 labels.

    Uses the numerically stabilized formulation, so the result is finite for
    any finite logit.
    """
    s = torch.as_tensor(np.asarray(scores, dtype=np.float64))
    l = torch.as_tensor(np.asarray(labels, dtype=np.float64))
    if s.shape != l.shape:
        raise ValueError(f"scores shape {tuple(s.shape)} != labels shape {tuple(l.shape)}")
    return float(_bce_logits(s, l))


def _safe_frobenius(diff: torch.Tensor) -> torch.Tensor:
    """Per-sample Frobenius norm of (N, ...) with clean gradients at zero."""
    ssq = diff.pow(2).flatten(1).sum(dim=1)
    tiny = torch.finfo(ssq.dtype).tiny
    # where() keeps exact zeros exact and avoids the inf sqrt-gradient at 0.
    return torch.where(ssq > 0, torch.sqrt(ssq.clamp(min=tiny)), ssq)


def _as_square_batch(batch) -> torch.Tensor:
    """Accept ImageSample lists or raw (N, C, H, W) arrays/tensors."""
    if isinstance(batch, torch.Tensor):
        x = batch.to(torch.float64)
    elif isinstance(batch, np.ndarray):
        x = torch.as_tensor(batch, dtype=torch.float64)
    else:
        x, _ = batch_to_tensor(list(batch))
    if x.ndim != 4:
        raise ValueError(f"expected (N, C, H, W) batch, got shape {tuple(x.shape)}")
    if x.shape[-1] != x.shape[-2]:
        raise ValueError(f"equivariance loss needs square inputs, got {x.shape[-2]}x{x.shape[-1]}")
    return x


def _tap(model, x: torch.Tensor, tap: str) -> torch.Tensor:
    feats, cmap, _ = model.class_maps(x)
    return feats if tap == "features" else cmap


def _equivariance_terms(
    model,
    x: torch.Tensor,
    rot_ops: Sequence[RotationOp],
    tap: str,
    base_map: torch.Tensor | None = None,
) -> torch.Tensor:
    """Per-sample sum over rotations of ||map(x) - back-rotated map(rot x)||_F.

    The 0-degree term is identically zero as a function of the parameters and
    is skipped; the remaining rotated copies run through the model as one
    batch. `model` only needs a class_maps(x) -> (features, map, scores)
    method, so permutation stubs can stand in for real networks.
    """
    if base_map is None:
        base_map = _tap(model, x, tap)
    if base_map.shape[-1] != base_map.shape[-2]:
        raise ValueError(
            f"equivariance loss needs square maps, got {base_map.shape[-2]}x{base_map.shape[-1]}"
        )
    nonzero = [op for op in rot_ops if op.degrees != 0]
    n = x.shape[0]
    terms = x.new_zeros(n)
    if not nonzero:
        return terms
    stacked = torch.cat([op.apply(x, axes=(-2, -1)).contiguous() for op in nonzero])
    mapped = _tap(model, stacked, tap)
    for j, op in enumerate(nonzero):
        back = op.inverse().apply(mapped[j * n : (j + 1) * n], axes=(-2, -1))
        terms = terms + _safe_frobenius(base_map - back)
    return terms


def _reduce(terms: torch.Tensor, reduction: str) -> torch.Tensor:
    if reduction == "sum":
        return terms.sum()
    return terms.mean()


def equivariance_loss(
    model,
    batch,
    rotations: Iterable,
    tap: str = "classmap",
    reduction: str = "mean",
) -> float:
    """Rotation-consistency penalty on the last-layer class map.

    batch may be a list of ImageSamples or a raw (N, C, H, W) array; rotations
    may be degrees or RotationOps (empty contributions from 0 degrees).
    """
    ops = rotation_ops(rotations)
    if not ops:
        raise ValueError("rotations must be nonempty")
    x = _as_square_batch(batch)
    with torch.no_grad():
        terms = _equivariance_terms(model, x, ops, tap)
        return float(_reduce(terms, reduction))


def joint_loss_terms(
    model,
    x: torch.Tensor,
    labels: torch.Tensor,
    rot_ops: Sequence[RotationOp],
    tap: str = "classmap",
    reduction: str = "mean",
) -> tuple[torch.Tensor, torch.Tensor]:
    """Differentiable (l_ce, l_reg) sharing one forward pass of the base batch."""
    feats, cmap, scores = model.class_maps(x)
    l_ce = _bce_logits(scores[:, 0], labels)
    base = feats if tap == "features" else cmap
    terms = _equivariance_terms(model, x, rot_ops, tap, base_map=base)
    return l_ce, _reduce(terms, reduction)


def total_loss(model: ClassifierModel, batch: Sequence[ImageSample], cfg: TrainConfig) -> LossReport:
    """Joint objective l_ce + lambda * l_reg evaluated on one batch."""
    x, labels = batch_to_tensor(batch, model.input_size)
    with torch.no_grad():
        l_ce_t, l_reg_t = joint_loss_terms(
            model, x, labels, rotation_ops(cfg.rotations), cfg.reg_tap, cfg.reg_batch_reduction
        )
    l_ce = float(l_ce_t)
    l_reg = float(l_reg_t)
    return LossReport(l_ce, l_reg, l_ce + cfg.lambda_reg * l_reg, cfg.lambda_reg)


def gradcheck_equivariance(
    model,
    batch,
    rotations: Iterable,
    epsilon: float = 1e-3,
    lambda_reg: float = 0.6,
    tap: str = "classmap",
    reduction: str = "mean",
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Checks d(l_ce + lambda * l_reg)/dtheta over every trainable parameter.
    Relative error is |a - n| / max(|a|, |n|, 1e-8). Returns 0.0 for a fully
    frozen model (both gradient vectors are empty).
    """
    if isinstance(batch, ImageSample):
        batch = [batch]
    batch = list(batch)
    ops = rotation_ops(rotations)
    x = _as_square_batch(batch)
    labels = torch.tensor([float(s.label) for s in batch], dtype=torch.float64)

    def loss_value() -> torch.Tensor:
        l_ce, l_reg = joint_loss_terms(model, x, labels, ops, tap, reduction)
        return l_ce + lambda_reg * l_reg

    params = [p for p in model.parameters() if p.requires_grad]
    if not params:
        return 0.0

    model.zero_grad(set_to_none=True)
    loss_value().backward()
    analytic = torch.cat(
        [
            (p.grad if p.grad is not None else torch.zeros_like(p)).flatten()
            for p in params
        ]
    ).clone()
    model.zero_grad(set_to_none=True)

    numeric = torch.empty_like(analytic)
    offset = 0
    threads = torch.get_num_threads()
    torch.set_num_threads(1)  # the per-parameter loop is latency-bound
    try:
        with torch.no_grad():
            for p in params:
                flat = p.data.view(-1)
                for j in range(flat.numel()):
                    orig = flat[j].item()
                    flat[j] = orig + epsilon
                    f_plus = float(loss_value())
                    flat[j] = orig - epsilon
                    f_minus = float(loss_value())
                    flat[j] = orig
                    numeric[offset + j] = (f_plus - f_minus) / (2.0 * epsilon)
                offset += flat.numel()
    finally:
        torch.set_num_threads(threads)

    denom = torch.clamp(torch.maximum(analytic.abs(), numeric.abs()), min=1e-8)
    return float(((analytic - numeric).abs() / denom).max())
