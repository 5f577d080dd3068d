"""Prediction heads: plain CenterNet-style heads and the dynamic refinement heads.

DRH-C refines the classification feature with a unit-length, example-wise
filtered direction; DRH-R rescales the regression output by a bounded
example-wise factor.
"""
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .fsm import conv_bn


@dataclass
class HeadConfig:
    mid_channels: int = 64
    kernel_size: int = 3
    groups: int = 16
    eps_cls: float = 0.1
    eps_reg: float = 0.1
    zero_norm_tolerance: float = 1e-8

    def __post_init__(self):
        if self.eps_cls < 0 or self.eps_reg < 0:
            raise ValueError("refinement factors must be non-negative")
        if self.kernel_size % 2 != 1:
            raise ValueError(f"dynamic kernel size must be odd, got {self.kernel_size}")

    @property
    def effective_groups(self):
        g = min(self.groups, self.mid_channels)
        if self.mid_channels % g:
            raise ValueError(f"{self.mid_channels} channels cannot be split into {g} groups")
        return g


class FilterGenerator(nn.Module):
    """Global average pool followed by one affine map to a grouped k x k kernel.

    Every channel of group ``g`` is filtered with kernel ``g`` (depthwise).
    """

    def __init__(self, in_channels, groups, kernel_size=3):
        super().__init__()
        self.in_channels = in_channels
        self.groups = groups
        self.kernel_size = kernel_size
        self.fc = nn.Linear(in_channels, groups * kernel_size * kernel_size)
        nn.init.normal_(self.fc.weight, std=0.01)
        nn.init.zeros_(self.fc.bias)

    def forward(self, f_in):
        return generate_filter(f_in, self.fc.weight, self.fc.bias, self.groups, self.kernel_size)


def generate_filter(f_in, weight, bias, groups, kernel_size):
    """Example-wise kernel (N, groups, k, k) from pooled input features."""
    if f_in.dim() != 4 or f_in.shape[1] != weight.shape[1]:
        raise ValueError(f"features {tuple(f_in.shape)} do not match generator input {weight.shape[1]}")
    pooled = f_in.mean(dim=(2, 3))
    return F.linear(pooled, weight, bias).view(-1, groups, kernel_size, kernel_size)


def refine_feature(f_mid, kernel):
    """Convolve each example with its own grouped depthwise kernel (stride 1, zero padding)."""
    n, c, h, w = f_mid.shape
    kn, groups, k, k2 = kernel.shape
    if kn != n or k != k2 or c % groups:
        raise ValueError(f"kernel {tuple(kernel.shape)} does not fit features {tuple(f_mid.shape)}")
    weight = kernel.repeat_interleave(c // groups, dim=1).reshape(n * c, 1, k, k)
    out = F.conv2d(f_mid.reshape(1, n * c, h, w), weight, padding=k // 2, groups=n * c)
    return out.view(n, c, h, w)


def unit_refinement(f_delta, tol):
    """Per-location channel-wise L2 normalisation; zero where the norm is below ``tol``."""
    norm = f_delta.norm(dim=1, keepdim=True)
    ok = norm >= tol
    return torch.where(ok, f_delta / torch.where(ok, norm, torch.ones_like(norm)), torch.zeros_like(f_delta))


class PlainHead(nn.Module):
    """3x3 Conv-BN-ReLU followed by a 1x1 output conv."""

    def __init__(self, in_channels, out_channels, config: HeadConfig, bias_init=0.0):
        super().__init__()
        self.base = conv_bn(in_channels, config.mid_channels, kernel=3)
        self.out = nn.Conv2d(config.mid_channels, out_channels, 1)
        nn.init.constant_(self.out.bias, bias_init)

    def forward(self, f_in):
        return self.out(self.base(f_in))


class DRHC(nn.Module):
    """Classification head with dynamic feature refinement."""

    def __init__(self, in_channels, num_classes, config: HeadConfig, bias_init=-2.19):
        super().__init__()
        self.config = config
        self.base = conv_bn(in_channels, config.mid_channels, kernel=3)
        self.generator = FilterGenerator(in_channels, config.effective_groups, config.kernel_size)
        self.classifier = nn.Conv2d(config.mid_channels, num_classes, 1)
        nn.init.constant_(self.classifier.bias, bias_init)

    def refined(self, f_in):
        f_mid = self.base(f_in)
        f_delta = refine_feature(f_mid, self.generator(f_in))
        unit = unit_refinement(f_delta, self.config.zero_norm_tolerance)
        return (1 + self.config.eps_cls * unit) * f_mid, f_mid, f_delta

    def forward(self, f_in):
        refined, _, _ = self.refined(f_in)
        return self.classifier(refined)


class DRHR(nn.Module):
    """Regression head whose base output is scaled by ``1 + eps * tanh(refinement)``."""

    def __init__(self, in_channels, out_channels, config: HeadConfig, bias_init=0.0):
        super().__init__()
        self.config = config
        self.base = conv_bn(in_channels, config.mid_channels, kernel=3)
        self.regressor = nn.Conv2d(config.mid_channels, out_channels, 1)
        nn.init.constant_(self.regressor.bias, bias_init)
        self.generator = FilterGenerator(in_channels, config.effective_groups, config.kernel_size)
        self.project = nn.Conv2d(config.mid_channels, out_channels, 1)

    def parts(self, f_in):
        """Return (base prediction, refinement logits)."""
        f_mid = self.base(f_in)
        h_base = self.regressor(f_mid)
        h_delta = self.project(refine_feature(f_mid, self.generator(f_in)))
        return h_base, h_delta

    def forward(self, f_in):
        h_base, h_delta = self.parts(f_in)
        return (1 + self.config.eps_reg * torch.tanh(h_delta)) * h_base
