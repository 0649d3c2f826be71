"""Weakly-supervised binary fire segmentation from image-level labels.

A classifier with a 1x1-conv head exposes its class map and penultimate
features; saliency from either tap is thresholded into pseudo-masks that
supervise a second-stage segmentation network. A rotation-equivariance
regularizer sharpens the maps during classifier training.
"""

from .datamodel import (
    ActivationStack,
    ImageSample,
    MaskSource,
    PseudoMask,
    SaliencyMap,
    TrainConfig,
    audit_gt_reads,
    load_config,
    save_config,
    validate_config,
)
from .classifier import (
    ClassifierModel,
    cam_equivalence_check,
    default_small_backbone,
    forward,
    load_classifier,
    save_classifier,
)
from .saliency import binarize, cam_map, midlayer_map, upsample
from .losses import (
    LossReport,
    RotationOp,
    equivariance_loss,
    gradcheck_equivariance,
    label_ce_loss,
    total_loss,
)
from .pipeline import (
    EncoderDecoderSegNet,
    SegNetwork,
    StageReport,
    calibrate_tau,
    generate_pseudomasks,
    train_stage1,
    train_stage2,
)
from .evalkit import EvalRow, ablation_table, evaluate_masks, iou, render_overlay
from .datasets import DatasetManifest, ingest_directory, load_samples, split, synth_dataset

__version__ = "0.1.0"
