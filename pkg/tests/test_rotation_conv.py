import math

import pytest
import torch
import torch.nn.functional as F

from drn.rotation_conv import RotationConv2d, bilinear_sample, make_grid, rcl_forward, rotation_offsets
from oracles import finite_difference_check


def generic_angles(n, h, w, seed=0):
    # angles away from multiples of pi/2 so taps land between cells
    g = torch.Generator().manual_seed(seed)
    return (0.2 + 1.1 * torch.rand(n, h, w, generator=g, dtype=torch.float64)) * torch.where(
        torch.rand(n, h, w, generator=g, dtype=torch.float64) < 0.5, -1.0, 1.0)


class TestGrid:
    def test_square(self):
        assert make_grid((3, 3)) == [(-1, -1), (0, -1), (1, -1), (-1, 0), (0, 0), (1, 0), (-1, 1), (0, 1), (1, 1)]

    def test_flat(self):
        assert make_grid((1, 3)) == [(-1, 0), (0, 0), (1, 0)]

    def test_slender(self):
        assert make_grid((3, 1)) == [(0, -1), (0, 0), (0, 1)]

    def test_unsupported(self):
        with pytest.raises(ValueError):
            make_grid((5, 5))


class TestOffsets:
    def test_zero_angle(self):
        assert rotation_offsets(0.0, make_grid((3, 3))) == [(0.0, 0.0)] * 9

    def test_quarter_turn(self):
        (d,) = rotation_offsets(math.pi / 2, [(1, 0)])
        assert d == pytest.approx((-1, 1))

    def test_half_turn(self):
        (d,) = rotation_offsets(math.pi, [(1, 1)])
        assert d == pytest.approx((-2, -2))

    @pytest.mark.parametrize("theta", [0.3, -1.2, 2.5])
    def test_center_fixed(self, theta):
        grid = make_grid((3, 3))
        assert rotation_offsets(theta, grid)[grid.index((0, 0))] == (0.0, 0.0)


class TestBilinear:
    def fm(self):
        return torch.arange(2 * 4 * 5, dtype=torch.float64).view(1, 2, 4, 5)

    def test_integer_point(self):
        x = self.fm()
        out = bilinear_sample(x, torch.tensor([[3.0]], dtype=x.dtype), torch.tensor([[2.0]], dtype=x.dtype))
        assert out[0, :, 0].tolist() == x[0, :, 2, 3].tolist()

    def test_midpoint(self):
        x = torch.zeros(1, 1, 3, 3, dtype=torch.float64)
        x[0, 0, 1, 2] = 1.0
        out = bilinear_sample(x, torch.tensor([[1.5]], dtype=x.dtype), torch.tensor([[1.0]], dtype=x.dtype))
        assert out.item() == pytest.approx(0.5)

    def test_outside_is_zero(self):
        x = self.fm() + 1
        out = bilinear_sample(x, torch.tensor([[-5.0]], dtype=x.dtype), torch.tensor([[-5.0]], dtype=x.dtype))
        assert out.abs().sum().item() == 0

    def test_border_blends_with_zero(self):
        x = torch.ones(1, 1, 3, 3, dtype=torch.float64)
        out = bilinear_sample(x, torch.tensor([[-0.25]], dtype=x.dtype), torch.tensor([[1.0]], dtype=x.dtype))
        assert out.item() == pytest.approx(0.75)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            bilinear_sample(self.fm(), torch.zeros(1, 3), torch.zeros(1, 2))


class TestRclForward:
    @pytest.mark.parametrize("shape", [(3, 3), (1, 3), (3, 1)])
    def test_zero_angle_is_plain_conv(self, shape):
        torch.manual_seed(0)
        x = torch.randn(2, 4, 7, 6, dtype=torch.float64)
        w = torch.randn(5, 4, *shape, dtype=torch.float64)
        b = torch.randn(5, dtype=torch.float64)
        out = rcl_forward(x, w, b, torch.zeros(2, 7, 6, dtype=torch.float64), make_grid(shape))
        ref = F.conv2d(x, w, b, padding=(shape[0] // 2, shape[1] // 2))
        assert (out - ref).abs().max().item() <= 1e-6

    def test_center_tap_ignores_angles(self):
        torch.manual_seed(1)
        x = torch.randn(1, 3, 6, 6, dtype=torch.float64)
        w = torch.zeros(2, 3, 3, 3, dtype=torch.float64)
        w[:, :, 1, 1] = torch.randn(2, 3, dtype=torch.float64)
        grid = make_grid((3, 3))
        a = rcl_forward(x, w, None, generic_angles(1, 6, 6), grid)
        b = rcl_forward(x, w, None, torch.zeros(1, 6, 6, dtype=torch.float64), grid)
        torch.testing.assert_close(a, b, atol=1e-12, rtol=0)

    def test_constant_input_interior(self):
        torch.manual_seed(2)
        x = torch.full((1, 3, 9, 9), 0.7, dtype=torch.float64)
        w = torch.randn(4, 3, 3, 3, dtype=torch.float64)
        b = torch.randn(4, dtype=torch.float64)
        out = rcl_forward(x, w, b, generic_angles(1, 9, 9, seed=3), make_grid((3, 3)))
        expected = w.sum(dim=(1, 2, 3)) * 0.7 + b
        # taps reach at most sqrt(2) away, so a 2-cell margin avoids the padding
        interior = out[0, :, 2:-2, 2:-2]
        torch.testing.assert_close(interior, expected.view(-1, 1, 1).expand_as(interior), atol=1e-12, rtol=0)

    def test_periodic_in_angle(self):
        torch.manual_seed(4)
        x = torch.randn(1, 2, 6, 6, dtype=torch.float64)
        w = torch.randn(3, 2, 3, 3, dtype=torch.float64)
        ang = generic_angles(1, 6, 6)
        a = rcl_forward(x, w, None, ang, make_grid((3, 3)))
        b = rcl_forward(x, w, None, ang + 2 * math.pi, make_grid((3, 3)))
        assert (a - b).abs().max().item() <= 1e-9

    def test_rotation_by_quarter_turn_permutes_taps(self):
        # at theta = pi/2 the tap (1, 0) reads the pixel below: p0 + (0, 1)
        x = torch.zeros(1, 1, 5, 5, dtype=torch.float64)
        x[0, 0, 3, 2] = 1.0
        w = torch.zeros(1, 1, 3, 3, dtype=torch.float64)
        w[0, 0, 1, 2] = 1.0  # tap (dx, dy) = (1, 0)
        out = rcl_forward(x, w, None, torch.full((1, 5, 5), math.pi / 2, dtype=torch.float64), make_grid((3, 3)))
        assert out[0, 0, 2, 2].item() == pytest.approx(1.0)
        assert out.sum().item() == pytest.approx(1.0)

    def test_shape_errors(self):
        x = torch.zeros(1, 2, 4, 4)
        with pytest.raises(ValueError):
            rcl_forward(x, torch.zeros(1, 2, 3, 3), None, torch.zeros(1, 5, 4), make_grid((3, 3)))
        with pytest.raises(ValueError):
            rcl_forward(x, torch.zeros(1, 3, 3, 3), None, torch.zeros(1, 4, 4), make_grid((3, 3)))
        with pytest.raises(ValueError):
            rcl_forward(x, torch.zeros(1, 2, 1, 3), None, torch.zeros(1, 4, 4), make_grid((3, 3)))

    def test_gradients(self):
        torch.manual_seed(5)
        x = torch.randn(1, 4, 6, 6, dtype=torch.float64, requires_grad=True)
        w = torch.randn(3, 4, 3, 3, dtype=torch.float64, requires_grad=True)
        b = torch.randn(3, dtype=torch.float64, requires_grad=True)
        ang = generic_angles(1, 6, 6).requires_grad_(True)
        r = torch.randn(1, 3, 6, 6, dtype=torch.float64)
        grid = make_grid((3, 3))
        err = finite_difference_check(lambda: (rcl_forward(x, w, b, ang, grid) * r).sum(), [w, b, x, ang])
        assert err <= 1e-4


class TestModule:
    def test_target_source_blocks_angle_gradient(self):
        conv = RotationConv2d(2, 2, angle_source="target").double()
        ang = generic_angles(1, 5, 5).requires_grad_(True)
        conv(torch.randn(1, 2, 5, 5, dtype=torch.float64), ang).sum().backward()
        assert ang.grad is None

    def test_predicted_source_passes_angle_gradient(self):
        conv = RotationConv2d(2, 2, angle_source="predicted").double()
        ang = generic_angles(1, 5, 5).requires_grad_(True)
        conv(torch.randn(1, 2, 5, 5, dtype=torch.float64), ang).sum().backward()
        assert ang.grad is not None and ang.grad.abs().sum() > 0

    def test_bad_source(self):
        with pytest.raises(ValueError):
            RotationConv2d(2, 2, angle_source="oracle")

    def test_accepts_channel_angle_field(self):
        conv = RotationConv2d(2, 3, (1, 3))
        out = conv(torch.randn(2, 2, 4, 5), torch.zeros(2, 1, 4, 5))
        assert out.shape == (2, 3, 4, 5)
