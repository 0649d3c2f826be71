"""Two-stage training orchestration.

Stage 1 trains the classifier on image labels with the joint objective
(cross-entropy + lambda * rotation-equivariance). Stage 2 thresholds saliency
into pseudo-masks and trains a pixel-supervised segmentation network on them.
Ground-truth masks are never read on either training path; the entry points
run inside an audit that hard-fails the run if anything slips through.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import load_arrays, save_arrays
from .classifier import (
    ClassifierModel,
    _init_conv,
    batch_to_tensor,
    default_small_backbone,
    forward,
    predict_labels,
    save_classifier,
)
from .datamodel import (
    CheckpointError,
    DatasetError,
    ImageSample,
    MaskLeakError,
    MaskSource,
    PseudoMask,
    TrainConfig,
    audit_gt_reads,
)
from .evalkit import iou
from .losses import LossReport, joint_loss_terms, rotation_ops
from .saliency import (
    binarize,
    cam_map,
    midlayer_map,
    read_mask_png,
    resize_image,
    upsample,
    write_mask_png,
)


class SegNetwork(Protocol):
    """Any pixel classifier mapping images to same-shape foreground probabilities."""

    def predict_proba(self, samples: Sequence[ImageSample]) -> list[np.ndarray]:
        """Per-sample (H, W) float maps with values in [0, 1]."""
        ...


@dataclass(frozen=True)
class StageReport:
    epochs_run: int
    final_losses: LossReport | float | None
    checkpoint_path: str
    wall_time_s: float


class EncoderDecoderSegNet(nn.Module):
    """Small encoder-decoder with skip connections; the default SegNetwork."""

    def __init__(self, channels: tuple[int, int, int] = (16, 32, 48)):
        super().__init__()
        c0, c1, c2 = channels
        self.channels = channels
        self.enc0 = nn.Conv2d(3, c0, 3, padding=1).double()
        self.enc1 = nn.Conv2d(c0, c1, 3, stride=2, padding=1).double()
        self.enc2 = nn.Conv2d(c1, c2, 3, stride=2, padding=1).double()
        self.mid = nn.Conv2d(c2, c2, 3, padding=1).double()
        self.dec1 = nn.Conv2d(c2 + c1, c1, 3, padding=1).double()
        self.dec0 = nn.Conv2d(c1 + c0, c0, 3, padding=1).double()
        self.out = nn.Conv2d(c0, 1, 1).double()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Per-pixel foreground logits, (N, H, W). H and W must be multiples of 4."""
        if x.shape[-2] % 4 or x.shape[-1] % 4:
            raise ValueError(f"segnet input sides must be multiples of 4, got {tuple(x.shape[-2:])}")
        e0 = F.relu(self.enc0(x))
        e1 = F.relu(self.enc1(e0))
        e2 = F.relu(self.enc2(e1))
        m = F.relu(self.mid(e2))
        up1 = F.interpolate(m, scale_factor=2, mode="bilinear", align_corners=False)
        d1 = F.relu(self.dec1(torch.cat([up1, e1], dim=1)))
        up0 = F.interpolate(d1, scale_factor=2, mode="bilinear", align_corners=False)
        d0 = F.relu(self.dec0(torch.cat([up0, e0], dim=1)))
        return self.out(d0)[:, 0]

    def predict_proba(self, samples: Sequence[ImageSample]) -> list[np.ndarray]:
        out = []
        with torch.no_grad():
            for chunk in _chunks(list(samples), 32):
                x, _ = batch_to_tensor(chunk)
                probs = torch.sigmoid(self.forward(x))
                out.extend(p.numpy().copy() for p in probs)
        return out


def default_segnet(seed: int) -> EncoderDecoderSegNet:
    net = EncoderDecoderSegNet()
    gen = torch.Generator().manual_seed(int(seed))
    for module in net.modules():
        if isinstance(module, nn.Conv2d):
            _init_conv(module, gen)
    return net


def _chunks(items: list, size: int):
    for i in range(0, len(items), size):
        yield items[i : i + size]


def _stage_dir(run_dir, name: str) -> Path | None:
    if run_dir is None:
        return None
    d = Path(run_dir) / name
    d.mkdir(parents=True, exist_ok=True)
    return d


def _training_pixels(samples: Sequence[ImageSample], input_size: tuple[int, int]) -> torch.Tensor:
    """Stack sample pixels, resizing to the classifier input size when needed."""
    arrays = []
    for s in samples:
        px = s.pixels
        if px.shape[:2] != tuple(input_size):
            px = resize_image(px, input_size)
        arrays.append(np.moveaxis(px, 2, 0))
    return torch.from_numpy(np.ascontiguousarray(np.stack(arrays)))


def label_accuracy(model: ClassifierModel, samples: Sequence[ImageSample]) -> float:
    preds = predict_labels(model, list(samples))
    truth = np.array([s.label for s in samples])
    return float((preds == truth).mean())


def train_stage1(
    samples: Sequence[ImageSample], cfg: TrainConfig, run_dir=None
) -> tuple[ClassifierModel, StageReport]:
    """Train the classifier on image labels with the joint objective.

    Deterministic for a given config: seeded init, seeded epoch shuffles,
    fixed batch boundaries. Refuses single-class datasets.
    """
    samples = list(samples)
    if {s.label for s in samples} != {0, 1}:
        raise DatasetError("stage-1 training needs both positive and negative labels")
    model = default_small_backbone(cfg.seed)
    rot_ops = rotation_ops(cfg.rotations)
    out_dir = _stage_dir(run_dir, "stage1")
    start = time.perf_counter()
    final: LossReport | None = None
    with audit_gt_reads() as leaks:
        x_all = _training_pixels(samples, model.input_size)
        y_all = torch.tensor([float(s.label) for s in samples], dtype=torch.float64)
        opt = torch.optim.Adam(model.parameters(), lr=cfg.lr_stage1, weight_decay=cfg.weight_decay)
        order = np.random.default_rng(cfg.seed)
        log_lines = []
        for epoch in range(1, cfg.epochs_stage1 + 1):
            perm = order.permutation(len(samples))
            ce_sum = reg_sum = 0.0
            for idx in _chunks(list(perm), cfg.batch_size):
                sel = torch.as_tensor(np.asarray(idx))
                l_ce, l_reg = joint_loss_terms(
                    model, x_all[sel], y_all[sel], rot_ops, cfg.reg_tap, cfg.reg_batch_reduction
                )
                loss = l_ce + cfg.lambda_reg * l_reg
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                ce_sum += float(l_ce.detach()) * len(idx)
                reg_sum += float(l_reg.detach()) * len(idx)
            ce_mean = ce_sum / len(samples)
            reg_mean = reg_sum / len(samples)
            final = LossReport(
                ce_mean, reg_mean, ce_mean + cfg.lambda_reg * reg_mean, cfg.lambda_reg
            )
            log_lines.append(final.log_line(epoch))
    if leaks:
        raise MaskLeakError(f"gt_mask read during stage-1 training: {sorted(set(leaks))}")
    ckpt = ""
    if out_dir is not None:
        ckpt = save_classifier(model, out_dir / "classifier.ckpt")
        with open(out_dir / "train_log.txt", "a") as fh:
            for line in log_lines:
                fh.write(line + "\n")
    return model, StageReport(cfg.epochs_stage1, final, ckpt, time.perf_counter() - start)


def generate_pseudomasks(
    model: ClassifierModel,
    samples: Sequence[ImageSample],
    source: MaskSource,
    tau: float,
) -> list[PseudoMask]:
    """Saliency -> upsample -> threshold per positive; zero masks for negatives."""
    source = MaskSource(source)
    samples = list(samples)
    out: list[PseudoMask | None] = [None] * len(samples)
    with audit_gt_reads() as leaks:
        positives = [(i, s) for i, s in enumerate(samples) if s.label == 1]
        for chunk in _chunks(positives, 32):
            idx, subset = zip(*chunk)
            resized = [
                s
                if s.pixels.shape[:2] == model.input_size
                else ImageSample(s.sample_id, resize_image(s.pixels, model.input_size), s.label)
                for s in subset
            ]
            for i, s, stack in zip(idx, subset, forward(model, list(resized))):
                smap = midlayer_map(stack) if source is MaskSource.MIDLAYER else cam_map(stack)
                smap = upsample(smap, s.pixels.shape[:2])
                out[i] = binarize(smap, tau)
        for i, s in enumerate(samples):
            if s.label == 0:
                out[i] = PseudoMask(np.zeros(s.pixels.shape[:2], dtype=bool), tau, source)
    if leaks:
        raise MaskLeakError(f"gt_mask read during pseudo-mask generation: {sorted(set(leaks))}")
    return out  # type: ignore[return-value]


def calibrate_tau(
    model: ClassifierModel,
    valset: Sequence[ImageSample],
    source: MaskSource,
    grid: Sequence[float],
) -> tuple[float, float]:
    """Pick the threshold with the best mean IoU on the evaluation split.

    Exhaustive over the grid; ties go to the smallest tau. Returns
    (best_tau, best_mean_iou) with IoU as a fraction in [0, 1].
    """
    if not len(grid):
        raise ValueError("tau grid is empty")
    source = MaskSource(source)
    positives = [s for s in valset if s.label == 1]
    if not positives:
        raise DatasetError("calibration needs positive samples")
    gts = []
    for s in positives:
        gt = s.gt_mask
        if gt is None:
            raise DatasetError(f"sample {s.sample_id!r} has no gt_mask for calibration")
        gts.append(gt)
    maps = []
    for chunk in _chunks(positives, 32):
        resized = [
            s
            if s.pixels.shape[:2] == model.input_size
            else ImageSample(s.sample_id, resize_image(s.pixels, model.input_size), s.label)
            for s in chunk
        ]
        for s, stack in zip(chunk, forward(model, resized)):
            smap = midlayer_map(stack) if source is MaskSource.MIDLAYER else cam_map(stack)
            maps.append(upsample(smap, s.pixels.shape[:2]))
    best_tau = best_iou = None
    for tau in grid:
        mean_iou = float(
            np.mean([iou(binarize(m, tau).mask, gt) for m, gt in zip(maps, gts)])
        )
        if best_iou is None or mean_iou > best_iou or (mean_iou == best_iou and tau < best_tau):
            best_tau, best_iou = float(tau), mean_iou
    return best_tau, best_iou


def train_stage2(
    masks: Sequence[PseudoMask], samples: Sequence[ImageSample], cfg: TrainConfig, run_dir=None
) -> tuple[EncoderDecoderSegNet, StageReport]:
    """Train the segmentation network on pseudo-masks.

    Pixel loss: beta * CE(pred, pseudo) + (1 - beta) * CE(pred, stopgrad
    binarize(pred, 0.5)); beta = 1 is plain pseudo-mask supervision.
    """
    samples = list(samples)
    masks = list(masks)
    if len(masks) != len(samples):
        raise DatasetError(f"{len(masks)} pseudo-masks for {len(samples)} samples")
    for m, s in zip(masks, samples):
        if m.shape != s.pixels.shape[:2]:
            raise DatasetError(
                f"pseudo-mask shape {m.shape} != image shape for sample {s.sample_id!r}"
            )
    net = default_segnet(cfg.seed)
    out_dir = _stage_dir(run_dir, "stage2")
    start = time.perf_counter()
    final: float | None = None
    beta = cfg.beta_stage2
    with audit_gt_reads() as leaks:
        x_all, _ = batch_to_tensor(samples)
        m_all = torch.from_numpy(np.stack([m.mask for m in masks]).astype(np.float64))
        opt = torch.optim.Adam(net.parameters(), lr=cfg.lr_stage2, weight_decay=cfg.weight_decay)
        order = np.random.default_rng(cfg.seed)
        log_lines = []
        for epoch in range(1, cfg.epochs_stage2 + 1):
            perm = order.permutation(len(samples))
            loss_sum = 0.0
            for idx in _chunks(list(perm), cfg.batch_size):
                sel = torch.as_tensor(np.asarray(idx))
                logits = net(x_all[sel])
                loss = beta * F.binary_cross_entropy_with_logits(logits, m_all[sel])
                if beta < 1.0:
                    self_target = (logits.detach() >= 0.0).double()
                    loss = loss + (1.0 - beta) * F.binary_cross_entropy_with_logits(
                        logits, self_target
                    )
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                loss_sum += float(loss.detach()) * len(idx)
            final = loss_sum / len(samples)
            log_lines.append(f"{epoch}\t{final!r}")
    if leaks:
        raise MaskLeakError(f"gt_mask read during stage-2 training: {sorted(set(leaks))}")
    ckpt = ""
    if out_dir is not None:
        ckpt = save_segnet(net, out_dir / "segnet.ckpt")
        with open(out_dir / "train_log.txt", "a") as fh:
            for line in log_lines:
                fh.write(line + "\n")
    return net, StageReport(cfg.epochs_stage2, final, ckpt, time.perf_counter() - start)


def segnet_masks(net: SegNetwork, samples: Sequence[ImageSample]) -> list[np.ndarray]:
    """Binary masks from the segmentation network's probabilities at 0.5."""
    return [p >= 0.5 for p in net.predict_proba(list(samples))]


# ---------------------------------------------------------------------------
# Mask directories and segnet checkpoints
# ---------------------------------------------------------------------------

def write_masks(masks: Sequence[PseudoMask], samples: Sequence[ImageSample], out_dir) -> int:
    """One 0/255 PNG per sample id; returns the number written."""
    out_dir = Path(out_dir)
    for mask, sample in zip(masks, samples):
        write_mask_png(mask.mask, out_dir / f"{sample.sample_id}.png")
    return len(list(masks))


def load_masks(mask_dir, samples: Sequence[ImageSample], tau: float, source: MaskSource) -> list[PseudoMask]:
    """Read one mask PNG per sample id from a directory."""
    mask_dir = Path(mask_dir)
    missing = [s.sample_id for s in samples if not (mask_dir / f"{s.sample_id}.png").is_file()]
    if missing:
        raise DatasetError(f"missing pseudo-masks for ids: {', '.join(sorted(missing))}")
    return [
        PseudoMask(read_mask_png(mask_dir / f"{s.sample_id}.png"), tau, source) for s in samples
    ]


def save_segnet(net: EncoderDecoderSegNet, path) -> str:
    meta = {"kind": "segnet", "format": 1, "channels": list(net.channels)}
    save_arrays(path, meta, {k: v.detach().numpy() for k, v in net.state_dict().items()})
    return str(path)


def load_segnet(path) -> EncoderDecoderSegNet:
    meta, arrays = load_arrays(path)
    if meta.get("kind") != "segnet":
        raise CheckpointError(f"checkpoint kind {meta.get('kind')!r} is not a segnet: {path}")
    net = EncoderDecoderSegNet(tuple(meta["channels"]))
    state = net.state_dict()
    if set(arrays) != set(state):
        raise CheckpointError(f"checkpoint parameter names do not match architecture: {path}")
    for name, tensor in state.items():
        if tuple(arrays[name].shape) != tuple(tensor.shape):
            raise CheckpointError(f"metadata mismatch for {name}: {path}")
    net.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in arrays.items()})
    return net
