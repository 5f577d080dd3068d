"""A small single-stack hourglass producing features at 1/stride resolution."""
import math

import torch.nn as nn
import torch.nn.functional as F


class Residual(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.skip = None
        if stride != 1 or cin != cout:
            self.skip = nn.Sequential(nn.Conv2d(cin, cout, 1, stride=stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        y = F.relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        return F.relu(y + (x if self.skip is None else self.skip(x)))


class Hourglass(nn.Module):
    def __init__(self, levels, channels):
        super().__init__()
        self.up1 = Residual(channels, channels)
        self.low1 = Residual(channels, channels, stride=2)
        self.low2 = Hourglass(levels - 1, channels) if levels > 1 else Residual(channels, channels)
        self.low3 = Residual(channels, channels)

    def forward(self, x):
        low = self.low3(self.low2(self.low1(x)))
        return self.up1(x) + F.interpolate(low, scale_factor=2, mode="nearest")


class HourglassBackbone(nn.Module):
    def __init__(self, width=64, levels=3, stride=4, in_channels=3):
        super().__init__()
        self.stride = stride
        self.levels = levels
        stem = [nn.Conv2d(in_channels, width, 7, stride=2, padding=3, bias=False), nn.BatchNorm2d(width),
                nn.ReLU(inplace=True)]
        for _ in range(int(math.log2(stride)) - 1):
            stem.append(Residual(width, width, stride=2))
        self.stem = nn.Sequential(*stem)
        self.hourglass = Hourglass(levels, width)
        self.out = nn.Sequential(nn.Conv2d(width, width, 3, padding=1, bias=False), nn.BatchNorm2d(width),
                                 nn.ReLU(inplace=True))

    def forward(self, image):
        h, w = image.shape[-2:]
        step = self.stride * 2 ** self.levels
        if h % step or w % step:
            raise ValueError(f"image size {(h, w)} must be divisible by {step}")
        return self.out(self.hourglass(self.stem(image)))
