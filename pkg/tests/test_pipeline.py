import numpy as np
import pytest
import torch

from weakseg.classifier import default_small_backbone, forward
from weakseg.datamodel import (
    DatasetError,
    ImageSample,
    MaskSource,
    PseudoMask,
    TrainConfig,
    audit_gt_reads,
)
from weakseg.datasets import load_samples, split, synth_dataset
from weakseg.evalkit import evaluate_masks, iou
from weakseg.losses import parse_log_line
from weakseg.pipeline import (
    calibrate_tau,
    default_segnet,
    generate_pseudomasks,
    label_accuracy,
    load_masks,
    load_segnet,
    save_segnet,
    segnet_masks,
    train_stage1,
    train_stage2,
    write_masks,
)
from weakseg.saliency import midlayer_map, upsample

# Deterministic desk fixture: hot enough to reach a useful model on 24
# training images within a couple of seconds.
FAST = TrainConfig(
    lambda_reg=0.02,
    lr_stage1=5e-3,
    lr_stage2=5e-3,
    epochs_stage1=12,
    epochs_stage2=4,
    seed=0,
    batch_size=8,
)


@pytest.fixture(scope="module")
def tiny_data():
    manifest = split(synth_dataset(40, 64, seed=0), (0.6, 0.2, 0.2), seed=0)
    train = load_samples(manifest, "train", with_masks=True)
    val = load_samples(manifest, "val", with_masks=True)
    return train, val


@pytest.fixture(scope="module")
def trained(tiny_data):
    train, _ = tiny_data
    model, report = train_stage1(train, FAST)
    return model, report


class TestTrainStage1:
    def test_loss_descends(self, tmp_path, tiny_data):
        train, _ = tiny_data
        cfg = FAST.replace(epochs_stage1=8)
        _, report = train_stage1(train, cfg, run_dir=tmp_path)
        lines = (tmp_path / "stage1" / "train_log.txt").read_text().splitlines()
        assert len(lines) == 8
        first = parse_log_line(lines[0])[1]
        last = parse_log_line(lines[-1])[1]
        assert last.l_ce < first.l_ce

    def test_single_class_refused(self):
        rng = np.random.default_rng(0)
        only_pos = [ImageSample(f"p{i}", rng.uniform(size=(64, 64, 3)), 1) for i in range(4)]
        with pytest.raises(DatasetError, match="both"):
            train_stage1(only_pos, FAST)

    def test_zero_epochs_returns_init_bitwise(self, tiny_data):
        train, _ = tiny_data
        model, report = train_stage1(train, FAST.replace(epochs_stage1=0))
        init = default_small_backbone(FAST.seed)
        for key, val in init.state_dict().items():
            assert torch.equal(val, model.state_dict()[key])
        assert report.epochs_run == 0 and report.final_losses is None

    def test_lambda_changes_trajectory(self, tiny_data):
        train, _ = tiny_data
        cfg_a = FAST.replace(epochs_stage1=1, lambda_reg=0.0)
        cfg_b = FAST.replace(epochs_stage1=1, lambda_reg=0.6)
        model_a, _ = train_stage1(train, cfg_a)
        model_b, _ = train_stage1(train, cfg_b)
        diffs = [
            not torch.equal(a, b)
            for (_, a), (_, b) in zip(model_a.state_dict().items(), model_b.state_dict().items())
        ]
        assert any(diffs)

    def test_deterministic_for_seed(self, tiny_data):
        train, _ = tiny_data
        cfg = FAST.replace(epochs_stage1=2)
        model_a, _ = train_stage1(train, cfg)
        model_b, _ = train_stage1(train, cfg)
        for key, val in model_a.state_dict().items():
            assert torch.equal(val, model_b.state_dict()[key])

    def test_no_gt_reads_even_with_masks_attached(self, tiny_data):
        train, _ = tiny_data
        assert any(s.has_gt_mask for s in train)
        with audit_gt_reads() as reads:
            train_stage1(train, FAST.replace(epochs_stage1=1))
        assert reads == []

    def test_checkpoint_written(self, tmp_path, tiny_data):
        train, _ = tiny_data
        _, report = train_stage1(train, FAST.replace(epochs_stage1=1), run_dir=tmp_path)
        assert report.checkpoint_path.endswith("classifier.ckpt")
        assert (tmp_path / "stage1" / "classifier.ckpt").is_file()

    def test_report_loss_consistency(self, trained):
        _, report = trained
        rep = report.final_losses
        assert rep.total == pytest.approx(rep.l_ce + rep.lambda_reg * rep.l_reg, abs=1e-9)


class TestGeneratePseudomasks:
    def test_negative_samples_get_zero_masks(self, trained, tiny_data):
        model, _ = trained
        _, val = tiny_data
        masks = generate_pseudomasks(model, val, MaskSource.MIDLAYER, 0.55)
        for mask, sample in zip(masks, val):
            if sample.label == 0:
                assert not mask.mask.any()

    def test_masks_at_image_resolution(self, trained, tiny_data):
        model, _ = trained
        _, val = tiny_data
        for mask, sample in zip(generate_pseudomasks(model, val, MaskSource.CAM, 0.45), val):
            assert mask.shape == sample.pixels.shape[:2]
            assert mask.tau == 0.45 and mask.source is MaskSource.CAM

    def test_tau_one_keeps_argmax_only(self, trained, tiny_data):
        model, _ = trained
        _, val = tiny_data
        positives = [s for s in val if s.label == 1]
        masks = generate_pseudomasks(model, positives, MaskSource.MIDLAYER, 1.0)
        stacks = forward(model, positives)
        for mask, sample, stack in zip(masks, positives, stacks):
            up = upsample(midlayer_map(stack), sample.pixels.shape[:2])
            assert np.array_equal(mask.mask, up.values == up.values.max())

    def test_trained_model_overlaps_gt(self, trained, tiny_data):
        model, _ = trained
        _, val = tiny_data
        positives = [s for s in val if s.label == 1]
        masks = generate_pseudomasks(model, positives, MaskSource.MIDLAYER, 0.5)
        scores = [iou(m.mask, s.gt_mask) for m, s in zip(masks, positives)]
        assert np.mean(scores) > 0.0

    def test_no_gt_reads(self, trained, tiny_data):
        model, _ = trained
        _, val = tiny_data
        with audit_gt_reads() as reads:
            generate_pseudomasks(model, val, MaskSource.MIDLAYER, 0.5)
        assert reads == []

    def test_deterministic(self, trained, tiny_data):
        model, _ = trained
        _, val = tiny_data
        a = generate_pseudomasks(model, val, MaskSource.MIDLAYER, 0.5)
        b = generate_pseudomasks(model, val, MaskSource.MIDLAYER, 0.5)
        for ma, mb in zip(a, b):
            assert np.array_equal(ma.mask, mb.mask)


class TestCalibrateTau:
    def test_singleton_grid(self, trained, tiny_data):
        model, _ = trained
        _, val = tiny_data
        tau, best = calibrate_tau(model, val, MaskSource.CAM, [0.45])
        assert tau == 0.45 and 0.0 <= best <= 1.0

    def test_perfect_masks_found(self, trained, tiny_data):
        # Ground truth built from the pipeline's own masks at tau=0.5 must be
        # recovered with IoU exactly 1 at tau=0.5.
        model, _ = trained
        _, val = tiny_data
        positives = [s for s in val if s.label == 1][:4]
        engineered = []
        reference = generate_pseudomasks(model, positives, MaskSource.MIDLAYER, 0.5)
        for s, m in zip(positives, reference):
            engineered.append(ImageSample(s.sample_id, s.pixels, 1, gt_mask=m.mask))
        grid = [0.2, 0.5, 0.9]
        masks_differ = [
            generate_pseudomasks(model, positives, MaskSource.MIDLAYER, t) for t in (0.2, 0.9)
        ]
        assert not np.array_equal(masks_differ[0][0].mask, reference[0].mask)
        tau, best = calibrate_tau(model, engineered, MaskSource.MIDLAYER, grid)
        assert tau == 0.5 and best == 1.0

    def test_returned_iou_is_grid_maximum(self, trained, tiny_data):
        model, _ = trained
        _, val = tiny_data
        grid = [round(0.1 * i, 1) for i in range(1, 10)]
        tau, best = calibrate_tau(model, val, MaskSource.MIDLAYER, grid)
        positives = [s for s in val if s.label == 1]
        sweep = []
        for t in grid:
            masks = generate_pseudomasks(model, positives, MaskSource.MIDLAYER, t)
            sweep.append(np.mean([iou(m.mask, s.gt_mask) for m, s in zip(masks, positives)]))
        assert best == pytest.approx(max(sweep), abs=1e-12)
        assert tau == grid[int(np.argmax(sweep))]

    def test_tie_goes_to_smallest_tau(self, trained, tiny_data):
        model, _ = trained
        _, val = tiny_data
        tau, _ = calibrate_tau(model, val, MaskSource.CAM, [0.450000001, 0.45])
        assert tau == 0.45

    def test_empty_grid_rejected(self, trained, tiny_data):
        model, _ = trained
        _, val = tiny_data
        with pytest.raises(ValueError, match="empty"):
            calibrate_tau(model, val, MaskSource.CAM, [])

    def test_missing_gt_rejected(self, trained):
        model, _ = trained
        rng = np.random.default_rng(0)
        bare = [ImageSample("nogt", rng.uniform(size=(64, 64, 3)), 1)]
        with pytest.raises(DatasetError, match="nogt"):
            calibrate_tau(model, bare, MaskSource.CAM, [0.5])


class TestTrainStage2:
    def test_count_mismatch(self, tiny_data):
        train, _ = tiny_data
        with pytest.raises(DatasetError, match="pseudo-masks"):
            train_stage2([], train, FAST)

    def test_zero_epochs_returns_init_bitwise(self, tiny_data):
        train, _ = tiny_data
        masks = [
            PseudoMask(np.zeros(s.pixels.shape[:2], dtype=bool), 0.5, MaskSource.MIDLAYER)
            for s in train
        ]
        net, report = train_stage2(masks, train, FAST.replace(epochs_stage2=0))
        init = default_segnet(FAST.seed)
        for key, val in init.state_dict().items():
            assert torch.equal(val, net.state_dict()[key])
        assert report.final_losses is None

    def test_all_zero_masks_drive_background(self, tiny_data):
        train, _ = tiny_data
        subset = train[:16]
        masks = [
            PseudoMask(np.zeros(s.pixels.shape[:2], dtype=bool), 0.5, MaskSource.MIDLAYER)
            for s in subset
        ]
        net, _ = train_stage2(masks, subset, FAST.replace(epochs_stage2=6))
        probs = net.predict_proba(subset)
        assert float(np.mean([p.mean() for p in probs])) < 0.1

    def test_predictions_in_unit_interval(self, tiny_data):
        train, _ = tiny_data
        subset = train[:8]
        masks = generate_masks_like(subset)
        net, _ = train_stage2(masks, subset, FAST.replace(epochs_stage2=1))
        for p in net.predict_proba(subset):
            assert p.shape == subset[0].pixels.shape[:2]
            assert p.min() >= 0.0 and p.max() <= 1.0

    def test_beta_blend_changes_training(self, tiny_data):
        train, _ = tiny_data
        subset = train[:8]
        masks = generate_masks_like(subset)
        cfg_a = FAST.replace(epochs_stage2=1, beta_stage2=1.0)
        cfg_b = FAST.replace(epochs_stage2=1, beta_stage2=0.5)
        net_a, _ = train_stage2(masks, subset, cfg_a)
        net_b, _ = train_stage2(masks, subset, cfg_b)
        assert any(
            not torch.equal(a, b)
            for (_, a), (_, b) in zip(net_a.state_dict().items(), net_b.state_dict().items())
        )

    def test_no_gt_reads(self, tiny_data):
        train, _ = tiny_data
        masks = generate_masks_like(train)
        with audit_gt_reads() as reads:
            train_stage2(masks, train, FAST.replace(epochs_stage2=1))
        assert reads == []

    def test_deterministic(self, tiny_data):
        train, _ = tiny_data
        subset = train[:8]
        masks = generate_masks_like(subset)
        cfg = FAST.replace(epochs_stage2=2)
        net_a, _ = train_stage2(masks, subset, cfg)
        net_b, _ = train_stage2(masks, subset, cfg)
        for key, val in net_a.state_dict().items():
            assert torch.equal(val, net_b.state_dict()[key])


def generate_masks_like(samples):
    """Deterministic center-square pseudo-masks for plumbing tests."""
    masks = []
    for s in samples:
        h, w = s.pixels.shape[:2]
        m = np.zeros((h, w), dtype=bool)
        m[h // 4 : 3 * h // 4, w // 4 : 3 * w // 4] = s.label == 1
        masks.append(PseudoMask(m, 0.5, MaskSource.MIDLAYER))
    return masks


class TestMaskFilesAndCheckpoints:
    def test_mask_dir_round_trip(self, tmp_path, tiny_data):
        train, _ = tiny_data
        subset = train[:6]
        masks = generate_masks_like(subset)
        count = write_masks(masks, subset, tmp_path)
        assert count == 6
        back = load_masks(tmp_path, subset, 0.5, MaskSource.MIDLAYER)
        for a, b in zip(masks, back):
            assert np.array_equal(a.mask, b.mask)

    def test_missing_ids_listed(self, tmp_path, tiny_data):
        train, _ = tiny_data
        subset = train[:3]
        write_masks(generate_masks_like(subset[:1]), subset[:1], tmp_path)
        with pytest.raises(DatasetError) as err:
            load_masks(tmp_path, subset, 0.5, MaskSource.MIDLAYER)
        for s in subset[1:]:
            assert s.sample_id in str(err.value)

    def test_segnet_checkpoint_round_trip(self, tmp_path, tiny_data):
        train, _ = tiny_data
        net = default_segnet(3)
        path = tmp_path / "seg.ckpt"
        save_segnet(net, path)
        loaded = load_segnet(path)
        for key, val in net.state_dict().items():
            assert torch.equal(val, loaded.state_dict()[key])
        a = net.predict_proba(train[:2])
        b = loaded.predict_proba(train[:2])
        for x, y in zip(a, b):
            assert np.array_equal(x, y)


class TestEndToEndSmoke:
    def test_stage2_tracks_pseudo_masks(self, trained, tiny_data):
        model, _ = trained
        train, val = tiny_data
        tau, _ = calibrate_tau(model, val, MaskSource.MIDLAYER, [0.3, 0.5, 0.7])
        masks = generate_pseudomasks(model, train, MaskSource.MIDLAYER, tau)
        net, _ = train_stage2(masks, train, FAST.replace(epochs_stage2=3))
        row = evaluate_masks(segnet_masks(net, val), val, "stage2")
        assert 0.0 <= row.mean_iou <= 100.0

    def test_label_accuracy_above_chance(self, trained, tiny_data):
        model, _ = trained
        _, val = tiny_data
        assert label_accuracy(model, val) > 0.5
