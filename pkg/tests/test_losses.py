import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from weakseg.classifier import build_small_classifier, forward
from weakseg.datamodel import ImageSample, TrainConfig
from weakseg.losses import (
    LossReport,
    RotationOp,
    equivariance_loss,
    gradcheck_equivariance,
    label_ce_loss,
    parse_log_line,
    rotation_ops,
    total_loss,
)


class MapStub:
    """Fake model whose class map is an arbitrary function of the input.

    Satisfies the class_maps contract used by the equivariance loss, so the
    loss can be checked against hand-enumerated pixel permutations.
    """

    def __init__(self, fn):
        self.fn = fn

    def class_maps(self, x):
        cmap = self.fn(x)
        return x.clamp(min=0), cmap, cmap.mean(dim=(-2, -1))


def _tiny_model(seed=0):
    return build_small_classifier(seed, block_channels=(4, 6, 8, 8), input_size=(32, 32))


def _tiny_samples(n=2, seed=0):
    rng = np.random.default_rng(seed)
    return [ImageSample(f"t{i}", rng.uniform(size=(32, 32, 3)), i % 2) for i in range(n)]


class TestLabelCeLoss:
    def test_zero_logit_positive_label_is_ln2(self):
        assert label_ce_loss([0.0], [1.0]) == pytest.approx(math.log(2), abs=1e-12)

    def test_saturated_logit_finite_and_small(self):
        loss = label_ce_loss([100.0], [1.0])
        assert math.isfinite(loss) and loss < 1e-6

    def test_extreme_logits_never_overflow(self):
        assert math.isfinite(label_ce_loss([1000.0], [0.0]))
        assert math.isfinite(label_ce_loss([-1000.0], [1.0]))

    def test_batch_mean(self):
        assert label_ce_loss([0.0, 0.0], [1.0, 0.0]) == pytest.approx(math.log(2), abs=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            label_ce_loss([0.0, 1.0], [1.0])

    @given(st.lists(st.floats(-30, 30), min_size=1, max_size=8), st.integers(0, 2**16))
    @settings(max_examples=40, deadline=None)
    def test_matches_logaddexp_oracle(self, logits, seed):
        # -log sigmoid(x) = logaddexp(0, -x); precision-safe independent route.
        rng = np.random.default_rng(seed)
        labels = rng.integers(0, 2, size=len(logits)).astype(float)
        expect = np.mean(
            [np.logaddexp(0.0, -x) if y == 1 else np.logaddexp(0.0, x)
             for y, x in zip(labels, logits)]
        )
        assert label_ce_loss(logits, labels) == pytest.approx(expect, abs=1e-9)


class TestRotationOps:
    def test_clockwise_quarter_turn(self):
        x = np.array([[1, 2], [3, 4]])
        assert RotationOp(90).apply(x).tolist() == [[3, 1], [4, 2]]

    def test_group_composition_exact(self):
        rng = np.random.default_rng(0)
        x = rng.integers(0, 255, size=(7, 7))
        r90 = RotationOp(90)
        twice = r90.apply(r90.apply(x))
        assert np.array_equal(twice, RotationOp(180).apply(x))
        four = r90.apply(r90.apply(r90.apply(r90.apply(x))))
        assert np.array_equal(four, x)

    def test_inverse_law_all_elements(self):
        rng = np.random.default_rng(1)
        x = rng.integers(0, 255, size=(5, 5))
        for deg in (0, 90, 180, 270):
            op = RotationOp(deg)
            assert op.inverse().degrees == (360 - deg) % 360
            assert np.array_equal(op.inverse().apply(op.apply(x)), x)

    def test_closure_under_composition(self):
        rng = np.random.default_rng(2)
        x = rng.integers(0, 99, size=(4, 4))
        for a in (0, 90, 180, 270):
            for b in (0, 90, 180, 270):
                combined = RotationOp(b).apply(RotationOp(a).apply(x))
                assert np.array_equal(combined, RotationOp((a + b) % 360).apply(x))

    def test_invalid_degrees_rejected(self):
        with pytest.raises(ValueError, match="not in"):
            RotationOp(45)

    def test_tensor_and_array_agree(self):
        x = np.arange(16.0).reshape(4, 4)
        t = torch.as_tensor(x)
        for deg in (90, 180, 270):
            a = RotationOp(deg).apply(x)
            b = RotationOp(deg).apply(t).numpy()
            assert np.array_equal(a, b)


class TestEquivarianceLoss:
    def test_identity_rotation_only_gives_zero(self):
        model = _tiny_model()
        assert equivariance_loss(model, _tiny_samples(), (0,)) == 0.0

    def test_constant_map_model_gives_zero(self):
        stub = MapStub(lambda x: torch.ones(x.shape[0], 1, x.shape[2], x.shape[3], dtype=x.dtype))
        batch = np.random.default_rng(0).uniform(size=(2, 3, 8, 8))
        assert equivariance_loss(stub, batch, (0, 90, 180, 270)) == 0.0

    def test_identity_map_is_exactly_equivariant(self):
        stub = MapStub(lambda x: x[:, :1])
        batch = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
        assert equivariance_loss(stub, batch, (90,)) == 0.0

    def test_hflip_map_matches_hand_enumeration(self):
        # x = [[1,2],[3,4]], A = horizontal flip, R = {90}:
        #   A(x)                = [[2,1],[4,3]]
        #   T90(x)              = [[3,1],[4,2]]
        #   A(T90 x)            = [[1,3],[2,4]]
        #   T90^-1(A(T90 x))    = [[3,4],[1,2]]
        #   diff                = [[-1,-3],[3,1]], Frobenius = sqrt(20)
        stub = MapStub(lambda x: torch.flip(x[:, :1], dims=(-1,)))
        batch = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
        loss = equivariance_loss(stub, batch, (90,))
        assert loss == pytest.approx(math.sqrt(20.0), abs=1e-9)

    def test_full_rotation_set_matches_enumeration_oracle(self):
        # Independent oracle: enumerate each rotation as an index permutation
        # on the 2x2 grid and accumulate Frobenius norms directly.
        def rot_cw(m, deg):
            out = m
            for _ in range((deg // 90) % 4):
                out = [[out[1][0], out[0][0]], [out[1][1], out[0][1]]]
            return out

        def flip_w(m):
            return [[m[0][1], m[0][0]], [m[1][1], m[1][0]]]

        x = [[1.0, 2.0], [3.0, 4.0]]
        expected = 0.0
        for deg in (0, 90, 180, 270):
            mapped = flip_w(rot_cw(x, deg))
            back = rot_cw(mapped, (360 - deg) % 360)
            base = flip_w(x)
            expected += math.sqrt(
                sum((base[i][j] - back[i][j]) ** 2 for i in range(2) for j in range(2))
            )
        stub = MapStub(lambda t: torch.flip(t[:, :1], dims=(-1,)))
        batch = np.array([[x]])
        loss = equivariance_loss(stub, batch, (0, 90, 180, 270))
        assert loss == pytest.approx(expected, abs=1e-9)

    def test_invariant_to_rotation_order(self):
        model = _tiny_model()
        batch = _tiny_samples(2)
        a = equivariance_loss(model, batch, (90, 180, 270))
        b = equivariance_loss(model, batch, (270, 90, 180))
        assert a == pytest.approx(b, abs=1e-12)

    def test_adding_identity_never_changes_value(self):
        model = _tiny_model()
        batch = _tiny_samples(2)
        assert equivariance_loss(model, batch, (90,)) == equivariance_loss(model, batch, (0, 90))

    def test_nonsquare_input_rejected(self):
        stub = MapStub(lambda x: x[:, :1])
        with pytest.raises(ValueError, match="square"):
            equivariance_loss(stub, np.zeros((1, 1, 2, 4)), (90,))

    def test_empty_rotation_set_rejected(self):
        with pytest.raises(ValueError, match="nonempty"):
            equivariance_loss(_tiny_model(), _tiny_samples(), ())

    def test_nonnegative_over_random_models(self):
        for seed in range(4):
            val = equivariance_loss(_tiny_model(seed), _tiny_samples(2, seed), (90, 180))
            assert val >= 0.0

    def test_sum_reduction_is_batch_size_times_mean(self):
        model = _tiny_model()
        batch = _tiny_samples(4)
        mean = equivariance_loss(model, batch, (90,), reduction="mean")
        total = equivariance_loss(model, batch, (90,), reduction="sum")
        assert total == pytest.approx(4 * mean, rel=1e-12)

    def test_features_tap_differs_from_classmap_tap(self):
        model = _tiny_model()
        batch = _tiny_samples(2)
        a = equivariance_loss(model, batch, (90,), tap="classmap")
        b = equivariance_loss(model, batch, (90,), tap="features")
        assert a != b


class TestLossReport:
    def test_invariant_enforced(self):
        LossReport(1.0, 0.5, 1.3, 0.6)
        with pytest.raises(ValueError, match="total"):
            LossReport(1.0, 0.5, 1.4, 0.6)

    def test_negative_terms_rejected(self):
        with pytest.raises(ValueError, match=">= 0"):
            LossReport(-0.1, 0.0, -0.1, 0.6)

    def test_log_line_round_trip(self):
        report = LossReport(0.6931471805599453, 0.123456, 0.6931471805599453 + 0.6 * 0.123456, 0.6)
        epoch, back = parse_log_line(report.log_line(17))
        assert epoch == 17 and back == report


class TestTotalLoss:
    def test_lambda_zero_equals_ce_bitwise(self):
        model = _tiny_model()
        batch = _tiny_samples(4)
        cfg = TrainConfig(lambda_reg=0.0)
        report = total_loss(model, batch, cfg)
        scores = [stack.scores[0] for stack in forward(model, batch)]
        ce = label_ce_loss(scores, [float(s.label) for s in batch])
        assert report.total == report.l_ce == ce

    def test_weighted_composition_example(self):
        report = LossReport(1.0, 0.5, 1.0 + 0.6 * 0.5, 0.6)
        assert report.total == pytest.approx(1.3, abs=1e-12)

    def test_recomposition_oracle(self):
        # total must match independently evaluated ce + lambda * reg.
        model = _tiny_model(3)
        batch = _tiny_samples(4, seed=3)
        cfg = TrainConfig(lambda_reg=0.6)
        report = total_loss(model, batch, cfg)
        scores = [stack.scores[0] for stack in forward(model, batch)]
        ce = label_ce_loss(scores, [float(s.label) for s in batch])
        reg = equivariance_loss(model, batch, cfg.rotations)
        assert report.total == pytest.approx(ce + 0.6 * reg, abs=1e-6)
        assert report.l_ce == pytest.approx(ce, abs=1e-9)
        assert report.l_reg == pytest.approx(reg, abs=1e-9)


class TestGradcheck:
    def test_joint_loss_small_model(self):
        model = _tiny_model()
        err = gradcheck_equivariance(
            model, _tiny_samples(1)[0], (0, 90, 180, 270), epsilon=1e-3, lambda_reg=0.6
        )
        assert err < 1e-3

    def test_pure_ce_small_model(self):
        model = _tiny_model(1)
        err = gradcheck_equivariance(model, _tiny_samples(1)[0], (0,), epsilon=1e-3, lambda_reg=0.0)
        assert err < 1e-3

    def test_frozen_model_returns_zero(self):
        model = _tiny_model()
        for p in model.parameters():
            p.requires_grad_(False)
        err = gradcheck_equivariance(model, _tiny_samples(1)[0], (90,), epsilon=1e-3)
        assert err == 0.0
