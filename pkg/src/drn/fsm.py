"""Feature Selection Module: rotated multi-kernel branches fused by per-pixel attention."""
from dataclasses import dataclass, field
from typing import List, Tuple

import torch
import torch.nn as nn

from .rotation_conv import RotationConv2d

DEFAULT_BRANCHES = ((3, 3), (1, 3), (3, 1))


@dataclass
class FsmConfig:
    in_channels: int
    compression_ratio: int = 4
    branches: List[Tuple[int, int]] = field(default_factory=lambda: list(DEFAULT_BRANCHES))

    def __post_init__(self):
        if not self.branches:
            raise ValueError("FSM needs at least one branch")
        self.branches = [tuple(b) for b in self.branches]
        if self.compressed_channels < 1:
            raise ValueError(f"compression ratio {self.compression_ratio} leaves no channels out of {self.in_channels}")

    @property
    def compressed_channels(self):
        return self.in_channels // self.compression_ratio


def conv_bn(cin, cout, kernel=1, relu=True):
    layers = [nn.Conv2d(cin, cout, kernel, padding=kernel // 2, bias=False), nn.BatchNorm2d(cout)]
    if relu:
        layers.append(nn.ReLU(inplace=True))
    return nn.Sequential(*layers)


def select_weights(logits, dim=1):
    """Softmax over the branch axis, independently at every location."""
    if not torch.isfinite(logits).all():
        raise ValueError("attention logits must be finite")
    if logits.shape[dim] < 2:
        raise ValueError("need at least two branches to select between")
    return torch.softmax(logits, dim=dim)


class FeatureSelectionModule(nn.Module):
    def __init__(self, config: FsmConfig, angle_source="predicted"):
        super().__init__()
        self.config = config
        c, cc = config.in_channels, config.compressed_channels
        self.compress = conv_bn(c, cc)
        self.branches = nn.ModuleList(
            RotationConv2d(cc, cc, shape, angle_source=angle_source) for shape in config.branches
        )
        # attention block: 1x1 conv, BN, ReLU -> one logit map per branch
        self.attention = nn.ModuleList(
            nn.Sequential(nn.Conv2d(cc, 1, 1), nn.BatchNorm2d(1), nn.ReLU()) for _ in config.branches
        )
        self.expand = conv_bn(cc, c, relu=False)

    def compress_features(self, x):
        if x.shape[1] != self.config.in_channels:
            raise ValueError(f"expected {self.config.in_channels} channels, got {x.shape[1]}")
        return self.compress(x)

    def fuse(self, xc, angles):
        """Return (fused features before expansion, branch outputs, normalized weights)."""
        feats = [branch(xc, angles) for branch in self.branches]
        if len(feats) == 1:
            weights = torch.ones_like(feats[0][:, :1]).unsqueeze(1)
        else:
            logits = torch.cat([att(f) for att, f in zip(self.attention, feats)], dim=1)
            weights = select_weights(logits).unsqueeze(2)  # (N, B, 1, H, W)
        stacked = torch.stack(feats, dim=1)  # (N, B, C', H, W)
        return (weights * stacked).sum(dim=1), feats, weights[:, :, 0]

    def forward(self, x, angles):
        xc = self.compress_features(x)
        if tuple(angles.shape[-2:]) != tuple(x.shape[-2:]):
            raise ValueError(f"angle field {tuple(angles.shape)} does not match features {tuple(x.shape)}")
        fused, _, _ = self.fuse(xc, angles)
        return self.expand(fused)
