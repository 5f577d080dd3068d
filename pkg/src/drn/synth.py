"""Synthetic densely packed oriented scenes and rotation augmentation."""
import math
from dataclasses import asdict, dataclass, fields
from typing import Tuple

import numpy as np
from scipy import ndimage

from .annotations import SceneAnnotation
from .geometry import Septet, canonical_angle, corners_from_septet, iou_matrix, rotate_septet, rotated_iou

GENERATOR_VERSION = "drn-synth/1"
DEFAULT_ROTATIONS_DEG = (-45.0, -30.0, -15.0, 15.0, 30.0, 45.0)

# well separated hues, one per class (cycled when there are more classes)
PALETTE = np.array([
    (214, 96, 77), (67, 147, 195), (90, 174, 97), (240, 190, 60), (153, 112, 171),
    (230, 130, 190), (120, 200, 200), (170, 140, 90),
], dtype=np.float64)


class PlacementError(RuntimeError):
    pass


@dataclass
class SceneConfig:
    image_size: int = 256
    count_range: Tuple[int, int] = (30, 80)
    size_range: Tuple[float, float] = (10.0, 28.0)
    angle_range_deg: Tuple[float, float] = (-45.0, 45.0)
    max_iou: float = 0.05
    num_classes: int = 1
    style: str = "striped"
    noise: float = 12.0
    seed: int = 0
    max_attempts: int = 2000

    def __post_init__(self):
        self.count_range = tuple(int(v) for v in self.count_range)
        self.size_range = tuple(float(v) for v in self.size_range)
        self.angle_range_deg = tuple(float(v) for v in self.angle_range_deg)
        lo, hi = self.count_range
        if lo < 0 or hi < lo:
            raise ValueError(f"invalid count range {self.count_range}")
        if not 0 < self.size_range[0] <= self.size_range[1]:
            raise ValueError(f"invalid size range {self.size_range}")
        if self.angle_range_deg[1] < self.angle_range_deg[0]:
            raise ValueError(f"invalid angle range {self.angle_range_deg}")
        if not 0 <= self.max_iou < 1:
            raise ValueError(f"max_iou must lie in [0, 1), got {self.max_iou}")
        if self.num_classes < 1 or self.image_size < 8:
            raise ValueError("need at least one class and an image of at least 8 pixels")
        if self.style not in ("striped", "flat"):
            raise ValueError(f"unknown style {self.style!r}")

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown scene config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        for k in ("count_range", "size_range", "angle_range_deg"):
            d[k] = list(d[k])
        return d


def box_mask(box: Septet, height, width):
    """Pixels whose centers fall inside ``box`` (pixel (x, y) is centred at (x + .5, y + .5))."""
    corners = np.array(corners_from_septet(box))
    x0 = max(0, int(math.floor(corners[:, 0].min())))
    x1 = min(width, int(math.ceil(corners[:, 0].max())) + 1)
    y0 = max(0, int(math.floor(corners[:, 1].min())))
    y1 = min(height, int(math.ceil(corners[:, 1].max())) + 1)
    mask = np.zeros((height, width), bool)
    if x1 <= x0 or y1 <= y0:
        return mask
    u, v = _box_frame(box, np.arange(x0, x1) + 0.5, np.arange(y0, y1) + 0.5)
    mask[y0:y1, x0:x1] = (np.abs(u) <= box.w / 2) & (np.abs(v) <= box.h / 2)
    return mask


def _box_frame(box, xs, ys):
    cx, cy = box.center
    c, s = math.cos(box.theta), math.sin(box.theta)
    rx = xs[None, :] - cx
    ry = ys[:, None] - cy
    return c * rx + s * ry, -s * rx + c * ry


def _background(rng, size, noise):
    base = rng.uniform(90, 140, size=3)
    coarse = rng.normal(0, 1, size=(size // 16 + 2, size // 16 + 2, 3))
    smooth = ndimage.zoom(coarse, (16, 16, 1), order=1)[:size, :size] * 10
    return base + smooth + rng.normal(0, noise, size=(size, size, 3))


def _inside(box: Septet, size):
    c = np.array(corners_from_septet(box))
    return c.min() >= 0 and c.max() <= size


def _sample_boxes(rng, config: SceneConfig):
    lo, hi = config.count_range
    n = int(rng.integers(lo, hi + 1))
    a0, a1 = (math.radians(v) for v in config.angle_range_deg)
    placed = []
    for k in range(n):
        for _ in range(config.max_attempts):
            w, h = rng.uniform(*config.size_range, size=2)
            theta = rng.uniform(a0, a1)
            half = 0.5 * math.hypot(w, h)
            cx, cy = rng.uniform(half * 0.5, config.image_size - half * 0.5, size=2)
            box = Septet(float(cx), float(cy), float(w), float(h), float(theta))
            if not _inside(box, config.image_size):
                continue
            if all(rotated_iou(box, other) <= config.max_iou for _, other in placed):
                placed.append((int(rng.integers(config.num_classes)), box))
                break
        else:
            raise PlacementError(
                f"could not place object {k + 1} of {n} with max pairwise IoU <= {config.max_iou} "
                f"inside a {config.image_size}px image after {config.max_attempts} attempts")
    return placed


def _paint(image, rng, class_id, box, style):
    size = image.shape[0]
    mask = box_mask(box, size, size)
    ys, xs = np.nonzero(mask)
    if not len(ys):
        return
    color = PALETTE[class_id % len(PALETTE)] * rng.uniform(0.8, 1.15) + rng.normal(0, 8, size=3)
    u, v = _box_frame(box, np.arange(size) + 0.5, np.arange(size) + 0.5)
    u, v = u[ys, xs], v[ys, xs]
    shade = np.ones(len(ys))
    if style == "striped":
        period = rng.uniform(3.0, 6.0)
        shade += 0.12 * np.sin(2 * math.pi * v / period)
    edge = np.minimum(box.w / 2 - np.abs(u), box.h / 2 - np.abs(v))
    shade = np.where(edge < 1.2, 0.45, shade)
    image[ys, xs] = color[None, :] * shade[:, None]


def generate_scene(config: SceneConfig, index=0):
    """Render one scene; returns ``(uint8 image HxWx3, SceneAnnotation)``.

    The scene is a pure function of ``(config, index)``.
    """
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, index]))
    image = _background(rng, config.image_size, config.noise)
    objects = _sample_boxes(rng, config)
    for class_id, box in objects:
        _paint(image, rng, class_id, box, config.style)
    image = np.clip(np.rint(image), 0, 255).astype(np.uint8)
    ann = SceneAnnotation(
        f"scene_s{config.seed}_{index:05d}", config.image_size, config.image_size, objects,
        {"seed": config.seed, "index": index, "generator": GENERATOR_VERSION, "rotation_deg": 0.0})
    return image, ann


def background_color(image, ann: SceneAnnotation):
    covered = np.zeros(image.shape[:2], bool)
    for _, box in ann.objects:
        covered |= box_mask(box, *image.shape[:2])
    pixels = image[~covered] if (~covered).any() else image.reshape(-1, image.shape[-1])
    return pixels.reshape(-1, image.shape[-1]).mean(axis=0)


def rotated_canvas_size(width, height, angle):
    c, s = abs(math.cos(angle)), abs(math.sin(angle))
    return (int(math.ceil(width * c + height * s - 1e-6)), int(math.ceil(width * s + height * c - 1e-6)))


def rotate_scene(image, ann: SceneAnnotation, angle_deg):
    """Rotate image and boxes about the image center onto an expanded canvas.

    Positive angles turn clockwise on screen (image y axis points down),
    matching the box angle convention, so box angles shift by ``+angle``.
    """
    phi = math.radians(angle_deg)
    h, w = image.shape[:2]
    nw, nh = rotated_canvas_size(w, h, phi)
    fill = background_color(image, ann)
    c_old = np.array([w / 2, h / 2])
    c_new = np.array([nw / 2, nh / 2])
    qy, qx = np.mgrid[0:nh, 0:nw].astype(np.float64)
    rx, ry = qx + 0.5 - c_new[0], qy + 0.5 - c_new[1]
    cos, sin = math.cos(phi), math.sin(phi)
    # inverse rotation maps output pixel centers back to the source image
    sx = cos * rx + sin * ry + c_old[0] - 0.5
    sy = -sin * rx + cos * ry + c_old[1] - 0.5
    out = np.empty((nh, nw, image.shape[2]), np.float64)
    for ch in range(image.shape[2]):
        out[..., ch] = ndimage.map_coordinates(image[..., ch].astype(np.float64), [sy, sx], order=1,
                                               mode="constant", cval=float(fill[ch]))
    rotated = np.clip(np.rint(out), 0, 255).astype(image.dtype)

    objects = []
    for class_id, box in ann.objects:
        nb = rotate_septet(box, phi, about=tuple(c_old), new_about=tuple(c_new))
        corners = np.array(corners_from_septet(nb))
        tol = 1e-6 * max(nw, nh)
        if corners[:, 0].min() < -tol or corners[:, 0].max() > nw + tol or corners[:, 1].min() < -tol \
                or corners[:, 1].max() > nh + tol:
            raise AssertionError(f"rotated box {nb} leaves the {nw}x{nh} canvas")
        objects.append((class_id, nb))
    prov = dict(ann.provenance)
    prov["rotation_deg"] = float(prov.get("rotation_deg", 0.0)) + float(angle_deg)
    suffix = f"_r{angle_deg:+g}".replace("+", "p").replace("-", "m").replace(".", "_")
    return rotated, SceneAnnotation(ann.image_id + suffix, nw, nh, objects, prov)


def rotate_dataset(items, angles_deg=DEFAULT_ROTATIONS_DEG, include_originals=False):
    """Rotation augmentation: every ``(image, annotation)`` at every angle."""
    out = []
    for image, ann in items:
        if include_originals:
            out.append((image, ann))
        for a in angles_deg:
            if not math.isfinite(a):
                raise ValueError(f"rotation angle must be finite, got {a}")
            out.append(rotate_scene(image, ann, a))
    return out


def max_pairwise_iou(ann: SceneAnnotation):
    boxes = ann.boxes
    m = iou_matrix(boxes, boxes)
    np.fill_diagonal(m, 0)
    return float(m.max()) if len(boxes) > 1 else 0.0


__all__ = [
    "DEFAULT_ROTATIONS_DEG", "PlacementError", "SceneConfig", "background_color", "box_mask", "canonical_angle",
    "generate_scene", "max_pairwise_iou", "rotate_dataset", "rotate_scene", "rotated_canvas_size",
]
