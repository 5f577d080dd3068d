"""Rotation Convolution Layer.

A convolution whose kernel taps are rotated, per output location, by the
angle predicted (or annotated) for that location. Sampling positions are
fractional and read with bilinear interpolation and zero padding.

Tensors are NCHW; points are ``(x, y)`` = ``(column, row)``.
"""
import math

import torch
import torch.nn as nn

SUPPORTED_SHAPES = ((3, 3), (1, 3), (3, 1))


def make_grid(kernel_shape):
    """Centered integer tap offsets ``(dx, dy)`` in row-major order."""
    kernel_shape = tuple(kernel_shape)
    if kernel_shape not in SUPPORTED_SHAPES:
        raise ValueError(f"unsupported kernel shape {kernel_shape}; expected one of {SUPPORTED_SHAPES}")
    rows, cols = kernel_shape
    return [(c - cols // 2, r - rows // 2) for r in range(rows) for c in range(cols)]


def rotation_offsets(theta, grid):
    """Offsets moving each regular tap ``p`` to its rotated position: ``R(theta) p - p``."""
    c, s = math.cos(theta), math.sin(theta)
    return [(c * dx - s * dy - dx, s * dx + c * dy - dy) for dx, dy in grid]


def bilinear_sample(x, px, py):
    """Sample ``x`` (N, C, H, W) at fractional points.

    ``px``/``py`` have shape (N, *S) and hold column/row coordinates; the
    result has shape (N, C, *S). Points outside the map read zeros.
    Differentiable with respect to ``x`` and the coordinates.
    """
    n, c, h, w = x.shape
    if px.shape != py.shape or px.shape[0] != n:
        raise ValueError(f"coordinate shapes {tuple(px.shape)} / {tuple(py.shape)} do not match batch {n}")
    sample_shape = px.shape[1:]
    px = px.reshape(n, -1)
    py = py.reshape(n, -1)
    x0 = torch.floor(px.detach())
    y0 = torch.floor(py.detach())
    fx = px - x0
    fy = py - y0
    x0 = x0.long()
    y0 = y0.long()
    flat = x.reshape(n, c, h * w)
    out = 0
    for ox, oy, wgt in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)),
                        (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
        xi = x0 + ox
        yi = y0 + oy
        valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        idx = (yi.clamp(0, h - 1) * w + xi.clamp(0, w - 1)).unsqueeze(1).expand(n, c, -1)
        vals = torch.gather(flat, 2, idx)
        out = out + vals * (wgt * valid).unsqueeze(1)
    return out.reshape(n, c, *sample_shape)


def rcl_forward(xc, weight, bias, angles, grid):
    """Rotated convolution, stride 1, output size equal to input size.

    Args:
        xc: input features (N, C_in, H, W).
        weight: kernel (C_out, C_in, rows, cols), the ``nn.Conv2d`` layout.
        bias: (C_out,) or None.
        angles: per-location angle in radians, (N, H, W) or (N, 1, H, W).
        grid: tap offsets from :func:`make_grid`, matching ``weight``.
    """
    n, cin, h, w = xc.shape
    if angles.dim() == 4:
        if angles.shape[1] != 1:
            raise ValueError(f"angle field must have one channel, got {tuple(angles.shape)}")
        angles = angles[:, 0]
    if tuple(angles.shape) != (n, h, w):
        raise ValueError(f"angle field {tuple(angles.shape)} does not match features {(n, h, w)}")
    cout, wcin, rows, cols = weight.shape
    if wcin != cin or rows * cols != len(grid):
        raise ValueError(f"weight {tuple(weight.shape)} does not fit input channels {cin} and grid of {len(grid)}")

    taps = torch.tensor(grid, dtype=xc.dtype, device=xc.device)  # (K, 2)
    cos = torch.cos(angles).unsqueeze(1)  # (N, 1, H, W)
    sin = torch.sin(angles).unsqueeze(1)
    ys, xs = torch.meshgrid(torch.arange(h, dtype=xc.dtype, device=xc.device),
                            torch.arange(w, dtype=xc.dtype, device=xc.device), indexing="ij")
    tdx = taps[:, 0].view(1, -1, 1, 1)
    tdy = taps[:, 1].view(1, -1, 1, 1)
    # p0 + p_n + dp_n == p0 + R(theta) p_n
    px = xs + cos * tdx - sin * tdy  # (N, K, H, W)
    py = ys + sin * tdx + cos * tdy
    sampled = bilinear_sample(xc, px, py)  # (N, C_in, K, H, W)
    out = torch.einsum("nckhw,ock->nohw", sampled, weight.reshape(cout, cin, -1))
    if bias is not None:
        out = out + bias.view(1, -1, 1, 1)
    return out


class RotationConv2d(nn.Module):
    """Convolution with per-location rotated sampling grid.

    ``angle_source`` records where the angle field comes from. With
    ``"target"`` the field is treated as data and no gradient flows into it;
    with ``"predicted"`` gradients reach the angle head.
    """

    def __init__(self, in_channels, out_channels, kernel_shape=(3, 3), bias=True, angle_source="predicted"):
        super().__init__()
        if angle_source not in ("predicted", "target"):
            raise ValueError(f"angle_source must be 'predicted' or 'target', got {angle_source!r}")
        self.kernel_shape = tuple(kernel_shape)
        self.grid = make_grid(self.kernel_shape)
        self.angle_source = angle_source
        self.weight = nn.Parameter(torch.empty(out_channels, in_channels, *self.kernel_shape))
        self.bias = nn.Parameter(torch.zeros(out_channels)) if bias else None
        nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))

    def forward(self, x, angles):
        if self.angle_source == "target":
            angles = angles.detach()
        return rcl_forward(x, self.weight, self.bias, angles, self.grid)

    def extra_repr(self):
        return f"{self.weight.shape[1]}, {self.weight.shape[0]}, kernel_shape={self.kernel_shape}, angle_source={self.angle_source}"
