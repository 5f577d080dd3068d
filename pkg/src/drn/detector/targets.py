"""CenterNet-style training targets for oriented boxes."""
import math
from dataclasses import dataclass

import numpy as np
import torch

from ..geometry import canonical_angle, corners_from_septet


@dataclass
class TargetMaps:
    """Per-image targets, channel-first at output resolution.

    ``angle_field`` is a dense angle map (each cell takes the angle of the box
    covering it, 0 on background) used to steer the rotation convolutions
    while training; ``angle`` is only meaningful where ``mask`` is 1.
    """

    heatmap: np.ndarray  # (classes, H, W)
    size: np.ndarray  # (2, H, W)
    offset: np.ndarray  # (2, H, W)
    angle: np.ndarray  # (1, H, W)
    mask: np.ndarray  # (1, H, W)
    angle_field: np.ndarray  # (1, H, W)

    @property
    def num_pos(self):
        return int(self.mask.sum())


def gaussian_radius(height, width, min_overlap=0.7):
    """Radius such that a corner-shifted box keeps ``min_overlap`` IoU (CenterNet rule)."""
    b1 = height + width
    c1 = width * height * (1 - min_overlap) / (1 + min_overlap)
    r1 = (b1 + math.sqrt(b1 ** 2 - 4 * c1)) / 2
    b2 = 2 * (height + width)
    c2 = (1 - min_overlap) * width * height
    r2 = (b2 + math.sqrt(b2 ** 2 - 16 * c2)) / 2
    a3 = 4 * min_overlap
    b3 = -2 * min_overlap * (height + width)
    c3 = (min_overlap - 1) * width * height
    r3 = (b3 + math.sqrt(b3 ** 2 - 4 * a3 * c3)) / 2
    return min(r1, r2, r3)


def gaussian_2d(radius):
    d = 2 * radius + 1
    sigma = d / 6
    y, x = np.ogrid[-radius:radius + 1, -radius:radius + 1]
    g = np.exp(-(x * x + y * y) / (2 * sigma * sigma))
    g[g < np.finfo(g.dtype).eps * g.max()] = 0
    return g


def draw_gaussian(heatmap, cx, cy, radius):
    """Max-splat a Gaussian with peak exactly 1 at integer cell (cx, cy)."""
    g = gaussian_2d(radius)
    h, w = heatmap.shape
    left, right = min(cx, radius), min(w - cx, radius + 1)
    top, bottom = min(cy, radius), min(h - cy, radius + 1)
    region = heatmap[cy - top:cy + bottom, cx - left:cx + right]
    patch = g[radius - top:radius + bottom, radius - left:radius + right]
    np.maximum(region, patch, out=region)


def build_targets(annotation, num_classes, output_size, stride):
    """Build :class:`TargetMaps` for one :class:`~drn.annotations.SceneAnnotation`.

    Sizes are in output-stride units; offsets are the fractional part of the
    downsampled center.
    """
    oh, ow = (output_size, output_size) if np.isscalar(output_size) else output_size
    heat = np.zeros((num_classes, oh, ow), np.float32)
    size = np.zeros((2, oh, ow), np.float32)
    offset = np.zeros((2, oh, ow), np.float32)
    angle = np.zeros((1, oh, ow), np.float32)
    mask = np.zeros((1, oh, ow), np.float32)
    field = np.zeros((1, oh, ow), np.float32)
    nearest = np.full((oh, ow), np.inf)
    gy, gx = np.mgrid[0:oh, 0:ow]
    cell_x = (gx + 0.5) * stride
    cell_y = (gy + 0.5) * stride

    for class_id, box in annotation.objects:
        if not 0 <= class_id < num_classes:
            raise ValueError(f"class id {class_id} outside [0, {num_classes})")
        cx, cy = box.center
        sx, sy = cx / stride, cy / stride
        ix, iy = int(math.floor(sx)), int(math.floor(sy))
        if not (0 <= ix < ow and 0 <= iy < oh):
            continue
        theta = canonical_angle(box.theta)
        corners = np.array(corners_from_septet(box))
        ext_w = (corners[:, 0].max() - corners[:, 0].min()) / stride
        ext_h = (corners[:, 1].max() - corners[:, 1].min()) / stride
        radius = max(0, int(gaussian_radius(math.ceil(ext_h), math.ceil(ext_w))))
        draw_gaussian(heat[class_id], ix, iy, radius)
        size[:, iy, ix] = (box.w / stride, box.h / stride)
        offset[:, iy, ix] = (sx - ix, sy - iy)
        angle[0, iy, ix] = theta
        mask[0, iy, ix] = 1

        # dense angle field: cells whose center lies inside the box
        c, s = math.cos(theta), math.sin(theta)
        rx, ry = cell_x - cx, cell_y - cy
        u = c * rx + s * ry
        v = -s * rx + c * ry
        dist = np.hypot(rx, ry)
        inside = (np.abs(u) <= box.w / 2) & (np.abs(v) <= box.h / 2) & (dist < nearest)
        inside[iy, ix] = True
        field[0][inside] = theta
        nearest[inside] = np.minimum(dist[inside], nearest[inside])
    return TargetMaps(heat, size, offset, angle, mask, field)


def collate_targets(maps, device=None, dtype=torch.float32):
    """Stack per-image targets into a dict of batched tensors."""
    out = {}
    for name in ("heatmap", "size", "offset", "angle", "mask", "angle_field"):
        out[name] = torch.as_tensor(np.stack([getattr(m, name) for m in maps]), dtype=dtype, device=device)
    return out


def targets_as_prediction(targets, eps=1e-6):
    """Turn batched target maps into a raw prediction (heatmap as logits)."""
    p = targets["heatmap"].clamp(eps, 1 - eps)
    return {
        "heatmap": torch.log(p) - torch.log1p(-p),
        "size": targets["size"],
        "offset": targets["offset"],
        "angle": targets["angle"],
    }
