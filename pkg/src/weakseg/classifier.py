"""Image-label classifier in the rearranged form used for visualization.

backbone -> penultimate features (the B tap) -> 1x1 conv -> per-class score
map (the A tap) -> global average pooling -> scores. Keeping the 1x1 conv
before pooling makes the class map available at feature resolution while the
pooled scores stay identical to the classic pool-then-linear formulation.

Models run in float64 on CPU: desk-scale sizes, exact reproducibility, and
finite-difference gradient checks all want the extra precision.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .checkpoint import load_arrays, save_arrays
from .datamodel import ActivationStack, CheckpointError, ImageSample

DEFAULT_INPUT_SIZE = (64, 64)
DEFAULT_BLOCK_CHANNELS = (8, 12, 16, 64)
DEFAULT_BLOCK_STRIDES = (2, 2, 2, 1)
DEFAULT_NORM_MEAN = (0.5, 0.5, 0.5)
DEFAULT_NORM_STD = (0.25, 0.25, 0.25)

# Initial downward shift of the final block's bias. Starts the feature tap
# sparse (softplus of a negative pre-activation is near zero), which keeps the
# channel-mean visualization from riding on a tall background plateau.
TAP_BIAS_SHIFT = 3.0


class ClassifierModel(nn.Module):
    """Backbone + 1x1 head with feature taps exposed.

    The backbone is pluggable: any module mapping a normalized (N, 3, H, W)
    float64 tensor to non-negative features (N, K, H_m, W_m) works. The
    default is a small softplus conv stack; softplus keeps the feature tap
    strictly non-negative and the whole loss surface smooth, which the
    finite-difference gradient verification relies on.
    """

    def __init__(
        self,
        backbone: nn.Module,
        feature_channels: int,
        input_size: tuple[int, int] = DEFAULT_INPUT_SIZE,
        num_classes: int = 1,
        norm_mean: Sequence[float] = DEFAULT_NORM_MEAN,
        norm_std: Sequence[float] = DEFAULT_NORM_STD,
        arch_meta: dict | None = None,
    ):
        super().__init__()
        self.backbone = backbone
        self.head = nn.Conv2d(feature_channels, num_classes, kernel_size=1).double()
        self.input_size = (int(input_size[0]), int(input_size[1]))
        self.feature_channels = int(feature_channels)
        self.num_classes = int(num_classes)
        self.arch_meta = dict(arch_meta) if arch_meta else {}
        self.register_buffer("norm_mean", torch.tensor(norm_mean, dtype=torch.float64).view(1, 3, 1, 1))
        self.register_buffer("norm_std", torch.tensor(norm_std, dtype=torch.float64).view(1, 3, 1, 1))

    def normalize(self, x: torch.Tensor) -> torch.Tensor:
        return (x - self.norm_mean) / self.norm_std

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """Penultimate-block feature tap (post-nonlinearity), (N, K, H_m, W_m)."""
        return self.backbone(self.normalize(x))

    def class_maps(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Return (features, class_map, scores) for a raw-pixel batch tensor."""
        feats = self.features(x)
        cmap = self.head(feats)
        scores = cmap.mean(dim=(-2, -1))
        return feats, cmap, scores

    def forward(self, x: torch.Tensor) -> torch.Tensor:  # scores only
        return self.class_maps(x)[2]


def _seeded_uniform_(tensor: torch.Tensor, bound: float, gen: torch.Generator) -> None:
    with torch.no_grad():
        tensor.uniform_(-bound, bound, generator=gen)


def _init_conv(conv: nn.Conv2d, gen: torch.Generator) -> None:
    # He-style uniform bound: keeps signal variance through the conv stack,
    # which a 4-layer from-scratch net on small data needs to train at all.
    fan_in = conv.in_channels * conv.kernel_size[0] * conv.kernel_size[1]
    bound = math.sqrt(6.0 / fan_in)
    _seeded_uniform_(conv.weight, bound, gen)
    if conv.bias is not None:
        _seeded_uniform_(conv.bias, 1.0 / math.sqrt(fan_in), gen)


def _build_backbone(block_channels: Sequence[int], block_strides: Sequence[int]) -> nn.Sequential:
    layers: list[nn.Module] = []
    in_ch = 3
    for ch, stride in zip(block_channels, block_strides):
        layers.append(nn.Conv2d(in_ch, ch, kernel_size=3, stride=stride, padding=1).double())
        layers.append(nn.Softplus())
        in_ch = ch
    return nn.Sequential(*layers)


def build_small_classifier(
    seed: int,
    block_channels: Sequence[int] = DEFAULT_BLOCK_CHANNELS,
    block_strides: Sequence[int] = DEFAULT_BLOCK_STRIDES,
    input_size: tuple[int, int] = DEFAULT_INPUT_SIZE,
    tap_bias_shift: float = TAP_BIAS_SHIFT,
) -> ClassifierModel:
    """Build a small conv classifier with seed-deterministic parameters."""
    backbone = _build_backbone(block_channels, block_strides)
    model = ClassifierModel(
        backbone,
        feature_channels=block_channels[-1],
        input_size=input_size,
        arch_meta={
            "block_channels": list(block_channels),
            "block_strides": list(block_strides),
        },
    )
    gen = torch.Generator().manual_seed(int(seed))
    convs = [m for m in backbone if isinstance(m, nn.Conv2d)]
    for conv in convs:
        _init_conv(conv, gen)
    with torch.no_grad():
        convs[-1].bias -= tap_bias_shift
    _init_conv(model.head, gen)
    return model


def default_small_backbone(seed: int) -> ClassifierModel:
    """Desk-scale default: 4 conv blocks, strides (2,2,2,1), K=64, 64x64 input.

    A 64x64 image yields an 8x8x64 feature tap. Same seed gives bitwise
    identical parameters.
    """
    return build_small_classifier(seed)


def batch_to_tensor(
    batch: Sequence[ImageSample], input_size: tuple[int, int] | None = None
) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack samples into (N, 3, H, W) float64 pixels and (N,) float64 labels."""
    if not batch:
        raise ValueError("empty batch")
    arrays = []
    labels = []
    for s in batch:
        h, w = s.pixels.shape[:2]
        if input_size is not None and (h, w) != tuple(input_size):
            raise ValueError(
                f"sample {s.sample_id!r} is {h}x{w}, model expects "
                f"{input_size[0]}x{input_size[1]}; resize before forward"
            )
        arrays.append(np.moveaxis(s.pixels, 2, 0))
        labels.append(float(s.label))
    x = torch.from_numpy(np.ascontiguousarray(np.stack(arrays)))
    y = torch.tensor(labels, dtype=torch.float64)
    return x, y


def forward(model: ClassifierModel, batch: Sequence[ImageSample]) -> list[ActivationStack]:
    """Run the classifier and return one ActivationStack per sample."""
    x, _ = batch_to_tensor(batch, model.input_size)
    with torch.no_grad():
        feats, cmap, scores = model.class_maps(x)
    stacks = []
    for i, sample in enumerate(batch):
        stacks.append(
            ActivationStack(
                features=feats[i].permute(1, 2, 0).numpy().copy(),
                class_map=cmap[i].permute(1, 2, 0).numpy().copy(),
                scores=scores[i].numpy().copy(),
                sample_id=sample.sample_id,
            )
        )
    return stacks


def cam_equivalence_check(model: ClassifierModel, batch: Sequence[ImageSample]) -> float:
    """Max |score| discrepancy between pool-then-weight and conv-then-pool.

    Path one pools the feature tap per channel and applies the head weights
    as a plain weighted sum; path two is the model's own 1x1-conv-then-pool.
    Both run on the same parameters, so the gap is pure accumulation error.
    """
    x, _ = batch_to_tensor(batch, model.input_size)
    with torch.no_grad():
        feats, _, scores_conv = model.class_maps(x)
        pooled = feats.mean(dim=(-2, -1))  # (N, K)
        weight = model.head.weight.reshape(model.num_classes, model.feature_channels)
        scores_pool = pooled @ weight.T + model.head.bias
        return float((scores_pool - scores_conv).abs().max())


def predict_labels(model: ClassifierModel, batch: Sequence[ImageSample]) -> np.ndarray:
    """Hard labels from the sigmoid score of the single-logit head."""
    x, _ = batch_to_tensor(batch, model.input_size)
    with torch.no_grad():
        scores = model.class_maps(x)[2][:, 0]
    return (scores > 0).long().numpy()


# ---------------------------------------------------------------------------
# Checkpointing (standard small architecture only)
# ---------------------------------------------------------------------------

def save_classifier(model: ClassifierModel, path) -> str:
    if "block_channels" not in model.arch_meta:
        raise CheckpointError("only the standard small-backbone architecture is serializable")
    meta = {
        "kind": "classifier",
        "format": 1,
        "input_size": list(model.input_size),
        "num_classes": model.num_classes,
        "feature_channels": model.feature_channels,
        "block_channels": model.arch_meta["block_channels"],
        "block_strides": model.arch_meta["block_strides"],
        "norm_mean": model.norm_mean.flatten().tolist(),
        "norm_std": model.norm_std.flatten().tolist(),
    }
    arrays = {k: v.detach().numpy() for k, v in model.state_dict().items()}
    save_arrays(path, meta, arrays)
    return str(path)


def load_classifier(path) -> ClassifierModel:
    meta, arrays = load_arrays(path)
    if meta.get("kind") != "classifier":
        raise CheckpointError(f"checkpoint kind {meta.get('kind')!r} is not a classifier: {path}")
    channels = meta.get("block_channels")
    strides = meta.get("block_strides")
    if not channels or not strides or len(channels) != len(strides):
        raise CheckpointError(f"checkpoint metadata incomplete: {path}")
    if int(meta.get("feature_channels", -1)) != int(channels[-1]):
        raise CheckpointError(
            f"metadata mismatch: feature_channels={meta.get('feature_channels')} "
            f"but final block has {channels[-1]} channels"
        )
    model = ClassifierModel(
        _build_backbone(channels, strides),
        feature_channels=channels[-1],
        input_size=tuple(meta["input_size"]),
        num_classes=int(meta["num_classes"]),
        norm_mean=meta["norm_mean"],
        norm_std=meta["norm_std"],
        arch_meta={"block_channels": list(channels), "block_strides": list(strides)},
    )
    state = model.state_dict()
    if set(arrays) != set(state):
        raise CheckpointError(f"checkpoint parameter names do not match architecture: {path}")
    for name, tensor in state.items():
        arr = arrays[name]
        if tuple(arr.shape) != tuple(tensor.shape):
            raise CheckpointError(
                f"metadata mismatch for {name}: checkpoint {arr.shape} vs architecture "
                f"{tuple(tensor.shape)}"
            )
    model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in arrays.items()})
    return model
