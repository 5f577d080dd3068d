import math

import pytest
import torch
import torch.nn.functional as F

from drn.fsm import FeatureSelectionModule, FsmConfig, select_weights
from oracles import finite_difference_check
from test_rotation_conv import generic_angles


def randomise_bn(module, seed=0):
    g = torch.Generator().manual_seed(seed)
    for m in module.modules():
        if isinstance(m, torch.nn.BatchNorm2d):
            m.running_mean.copy_(torch.randn(m.num_features, generator=g) * 0.1)
            m.running_var.copy_(torch.rand(m.num_features, generator=g) + 0.5)
            m.weight.data.copy_(torch.rand(m.num_features, generator=g) + 0.5)
            m.bias.data.copy_(torch.randn(m.num_features, generator=g) * 0.1)


def make_fsm(c=8, ratio=2, seed=0):
    torch.manual_seed(seed)
    fsm = FeatureSelectionModule(FsmConfig(c, ratio)).double()
    randomise_bn(fsm, seed)
    return fsm.eval()


class TestConfig:
    def test_defaults(self):
        cfg = FsmConfig(64)
        assert cfg.compressed_channels == 16
        assert cfg.branches == [(3, 3), (1, 3), (3, 1)]

    def test_invalid(self):
        with pytest.raises(ValueError):
            FsmConfig(2, compression_ratio=4)
        with pytest.raises(ValueError):
            FsmConfig(8, branches=[])


class TestSelectWeights:
    def test_equal_logits(self):
        w = select_weights(torch.zeros(1, 3, 2, 2))
        torch.testing.assert_close(w, torch.full((1, 3, 2, 2), 1 / 3))

    def test_log_two(self):
        logits = torch.tensor([math.log(2), 0.0, 0.0], dtype=torch.float64).view(1, 3, 1, 1)
        assert select_weights(logits).flatten().tolist() == pytest.approx([0.5, 0.25, 0.25])

    def test_shift_invariant(self):
        logits = torch.randn(2, 3, 4, 4, dtype=torch.float64)
        torch.testing.assert_close(select_weights(logits), select_weights(logits + 7.5))

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            select_weights(torch.tensor([[[[math.nan]], [[0.0]]]]))

    def test_needs_two_branches(self):
        with pytest.raises(ValueError):
            select_weights(torch.zeros(1, 1, 2, 2))


class TestCompress:
    def test_shape(self):
        fsm = FeatureSelectionModule(FsmConfig(64, 4)).eval()
        assert fsm.compress_features(torch.randn(1, 64, 8, 8)).shape == (1, 16, 8, 8)

    def test_non_negative(self):
        fsm = make_fsm()
        assert fsm.compress_features(torch.randn(2, 8, 6, 6, dtype=torch.float64)).min() >= 0

    def test_zero_input(self):
        fsm = FeatureSelectionModule(FsmConfig(8, 2)).double().eval()  # fresh BN: zero shift
        assert fsm.compress_features(torch.zeros(1, 8, 4, 4, dtype=torch.float64)).abs().sum() == 0

    def test_channel_mismatch(self):
        with pytest.raises(ValueError):
            make_fsm().compress_features(torch.zeros(1, 5, 4, 4, dtype=torch.float64))


class TestForward:
    def test_shape(self):
        fsm = FeatureSelectionModule(FsmConfig(64)).eval()
        assert fsm(torch.randn(1, 64, 8, 8), torch.zeros(1, 1, 8, 8)).shape == (1, 64, 8, 8)

    def test_angle_shape_mismatch(self):
        with pytest.raises(ValueError):
            make_fsm()(torch.zeros(1, 8, 6, 6, dtype=torch.float64), torch.zeros(1, 5, 6, dtype=torch.float64))

    def test_weights_sum_to_one(self):
        fsm = make_fsm()
        xc = fsm.compress_features(torch.randn(3, 8, 6, 6, dtype=torch.float64))
        _, _, weights = fsm.fuse(xc, generic_angles(3, 6, 6))
        assert (weights.sum(dim=1) - 1).abs().max() <= 1e-6
        assert weights.min() > 0 and weights.max() < 1

    def test_convex_combination_bound(self):
        fsm = make_fsm(seed=1)
        xc = fsm.compress_features(torch.randn(2, 8, 6, 6, dtype=torch.float64))
        fused, feats, _ = fsm.fuse(xc, generic_angles(2, 6, 6))
        stacked = torch.stack(feats)
        assert (fused - stacked.max(0).values).max() <= 1e-6
        assert (stacked.min(0).values - fused).max() <= 1e-6

    def test_identical_branches(self):
        # constant input, equal summed weights: every branch gives the same interior value
        fsm = make_fsm(seed=2)
        for br in fsm.branches:
            with torch.no_grad():
                br.weight.fill_(0.1)
                br.bias.fill_(0.05)
        for br in fsm.branches[1:]:
            with torch.no_grad():
                br.weight.fill_(0.3)  # 3 taps * 0.3 == 9 taps * 0.1
        xc = torch.full((1, 4, 9, 9), 0.5, dtype=torch.float64)
        fused, feats, _ = fsm.fuse(xc, generic_angles(1, 9, 9))
        inner = (slice(None), slice(None), slice(2, -2), slice(2, -2))
        torch.testing.assert_close(fused[inner], feats[0][inner], atol=1e-12, rtol=0)

    def test_one_hot_attention(self):
        fsm = make_fsm(seed=3)
        for i, att in enumerate(fsm.attention):
            with torch.no_grad():
                att[0].weight.zero_()
                att[0].bias.fill_(1e4 if i == 1 else -1e4)
        xc = fsm.compress_features(torch.randn(1, 8, 6, 6, dtype=torch.float64))
        fused, feats, _ = fsm.fuse(xc, generic_angles(1, 6, 6))
        assert (fused - feats[1]).abs().max() <= 1e-6

    def test_square_branch_is_plain_conv_at_zero_angle(self):
        fsm = make_fsm(seed=4)
        xc = torch.randn(1, 4, 6, 6, dtype=torch.float64)
        br = fsm.branches[0]
        out = br(xc, torch.zeros(1, 6, 6, dtype=torch.float64))
        ref = F.conv2d(xc, br.weight, br.bias, padding=1)
        assert (out - ref).abs().max() <= 1e-6

    def test_gradients(self):
        fsm = make_fsm(seed=5)
        x = torch.randn(1, 8, 6, 6, dtype=torch.float64, requires_grad=True)
        ang = generic_angles(1, 6, 6, seed=9).requires_grad_(True)
        r = torch.randn(1, 8, 6, 6, dtype=torch.float64)
        params = [p for p in fsm.parameters()]
        err = finite_difference_check(lambda: (fsm(x, ang) * r).sum(), [x, ang] + params, n_coords=40)
        assert err <= 1e-4

    def test_training_mode_runs(self):
        fsm = make_fsm().train()
        out = fsm(torch.randn(2, 8, 6, 6, dtype=torch.float64), generic_angles(2, 6, 6))
        assert torch.isfinite(out).all()
