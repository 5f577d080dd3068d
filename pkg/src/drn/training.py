"""Datasets on disk, augmentation, the training loop and checkpoints."""
import json
import os
from dataclasses import asdict, dataclass, fields, replace
from typing import List, Optional, Tuple

import numpy as np
import torch
from PIL import Image

from .annotations import SceneAnnotation, read_annotations
from .detector import ModelConfig, OrientedCenterNet, build_targets, collate_targets, decode, loss_total
from .geometry import Septet, angle_soft_nms, canonical_angle

CHECKPOINT_FORMAT = "drn-checkpoint/1"
PIXEL_MEAN = 0.5
PIXEL_STD = 0.25


class NonFiniteLossError(RuntimeError):
    def __init__(self, term, step, value):
        super().__init__(f"loss term '{term}' became {value} at step {step}")
        self.term, self.step, self.value = term, step, value


class CheckpointMismatchError(ValueError):
    pass


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 4
    lr: float = 4e-4
    # lr drops 10x at these fractions of the run (90/140 and 120/140 epochs at full scale)
    lr_milestones: Tuple[float, float] = (90 / 140, 120 / 140)
    augment: bool = True
    scale_range: Tuple[float, float] = (0.7, 1.3)
    flip: bool = True
    color_jitter: float = 0.2
    seed: int = 0
    checkpoint_every: int = 500
    log_every: int = 1
    threads: int = 0

    def __post_init__(self):
        self.lr_milestones = tuple(self.lr_milestones)
        self.scale_range = tuple(self.scale_range)
        if self.steps < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("steps, batch_size and lr must be positive")

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        d["lr_milestones"] = list(self.lr_milestones)
        d["scale_range"] = list(self.scale_range)
        return d


@dataclass
class SceneDataset:
    images: List[np.ndarray]
    annotations: List[SceneAnnotation]

    def __len__(self):
        return len(self.images)

    def __getitem__(self, i):
        return self.images[i], self.annotations[i]


def load_dataset(root, limit=None) -> SceneDataset:
    root = os.fspath(root)
    ann_path = os.path.join(root, "annotations.jsonl")
    if not os.path.exists(ann_path):
        raise FileNotFoundError(f"no annotations.jsonl in {root}")
    anns = read_annotations(ann_path)[:limit]
    images = []
    for a in anns:
        path = os.path.join(root, "images", a.image_id + ".png")
        img = np.asarray(Image.open(path).convert("RGB"))
        if img.shape[:2] != (a.height, a.width):
            raise ValueError(f"{path}: image is {img.shape[1]}x{img.shape[0]}, annotation says {a.width}x{a.height}")
        images.append(img)
    return SceneDataset(images, anns)


def _affine_boxes(ann: SceneAnnotation, scale, shift, flip_width=None, size=None):
    objs = []
    for c, b in ann.objects:
        cx, cy = b.center
        cx, cy = cx * scale + shift[0], cy * scale + shift[1]
        theta = b.theta
        if flip_width is not None:
            cx = flip_width - cx
            theta = -theta
        nb = Septet(cx, cy, b.w * scale, b.h * scale, canonical_angle(theta))
        if size is not None and not (0 <= cx < size and 0 <= cy < size):
            continue
        objs.append((c, nb))
    return objs


def fit_to_input(image, ann: SceneAnnotation, size, scale=1.0, fill=None):
    """Scale the longer side to ``size * scale`` and center it on a ``size`` canvas."""
    h, w = image.shape[:2]
    s = size / max(h, w) * scale
    nw, nh = max(1, int(round(w * s))), max(1, int(round(h * s)))
    if fill is None:
        fill = image.reshape(-1, image.shape[-1]).mean(axis=0)
    resized = np.asarray(Image.fromarray(image).resize((nw, nh), Image.BILINEAR)) if (nw, nh) != (w, h) else image
    canvas = np.empty((size, size, image.shape[2]), np.uint8)
    canvas[:] = np.asarray(fill, dtype=np.float64).round().astype(np.uint8)
    ox, oy = (size - nw) // 2, (size - nh) // 2
    sx0, sy0 = max(0, -ox), max(0, -oy)
    dx0, dy0 = max(0, ox), max(0, oy)
    cw, ch = min(nw - sx0, size - dx0), min(nh - sy0, size - dy0)
    canvas[dy0:dy0 + ch, dx0:dx0 + cw] = resized[sy0:sy0 + ch, sx0:sx0 + cw]
    sx_, sy_ = nw / w, nh / h
    objs = []
    for c, b in ann.objects:
        cx, cy = b.center
        nb = Septet(cx * sx_ + ox, cy * sy_ + oy, b.w * sx_, b.h * sy_, b.theta)
        if 0 <= nb.cx < size and 0 <= nb.cy < size:
            objs.append((c, nb))
    return canvas, SceneAnnotation(ann.image_id, size, size, objs, ann.provenance)


def augment(image, ann, rng: np.random.Generator, cfg: TrainConfig, size):
    scale = float(rng.uniform(*cfg.scale_range)) if cfg.augment else 1.0
    image, ann = fit_to_input(image, ann, size, scale)
    if cfg.augment and cfg.flip and rng.random() < 0.5:
        image = image[:, ::-1].copy()
        ann = SceneAnnotation(ann.image_id, size, size, _affine_boxes(ann, 1.0, (0, 0), flip_width=size),
                              ann.provenance)
    if cfg.augment and cfg.color_jitter > 0:
        j = cfg.color_jitter
        gain = rng.uniform(1 - j, 1 + j, size=3)
        bias = rng.uniform(-j, j) * 64
        image = np.clip(image.astype(np.float64) * gain + bias, 0, 255).astype(np.uint8)
    return image, ann


def to_tensor(images, dtype=torch.float32):
    arr = np.stack(images).astype(np.float32) / 255.0
    t = torch.from_numpy(arr).permute(0, 3, 1, 2).to(dtype)
    return (t - PIXEL_MEAN) / PIXEL_STD


def make_batch(dataset, indices, rng, train_cfg, model_cfg, train=True):
    images, anns = [], []
    for i in indices:
        img, ann = dataset[i]
        if train:
            img, ann = augment(img, ann, rng, train_cfg, model_cfg.input_size)
        else:
            img, ann = fit_to_input(img, ann, model_cfg.input_size)
        images.append(img)
        anns.append(ann)
    targets = collate_targets([build_targets(a, model_cfg.num_classes, model_cfg.output_size, model_cfg.stride)
                               for a in anns])
    return to_tensor(images), targets, anns


def epoch_indices(n, batch, step, seed):
    """Sample indices for ``step`` (1-based) from a stream of per-epoch shuffles.

    Each epoch's order depends only on ``(seed, epoch)``, so resuming needs no
    sampler state.
    """
    out = []
    for p in range((step - 1) * batch, step * batch):
        epoch, pos = divmod(p, n)
        out.append(int(np.random.default_rng([seed, epoch]).permutation(n)[pos]))
    return out


def make_optimizer(model, cfg: TrainConfig):
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    milestones = sorted({max(1, int(round(f * cfg.steps))) for f in cfg.lr_milestones})
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, milestones=milestones, gamma=0.1)
    return opt, sched


def save_checkpoint(path, model, model_cfg, train_cfg, optimizer, scheduler, step, rng):
    state = {
        "format": CHECKPOINT_FORMAT,
        "model_config": model_cfg.to_dict(),
        "train_config": train_cfg.to_dict() if train_cfg is not None else None,
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "scheduler": scheduler.state_dict() if scheduler is not None else None,
        "step": step,
        "rng": {"numpy": rng.bit_generator.state if rng is not None else None,
                "torch": torch.get_rng_state()},
    }
    tmp = f"{path}.tmp"
    torch.save(state, tmp)
    os.replace(tmp, path)


def load_checkpoint(path, model_cfg: Optional[ModelConfig] = None):
    """Load a checkpoint; returns ``(model, state)``. The model is in eval mode."""
    state = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(state, dict) or state.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointMismatchError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    saved = ModelConfig.from_dict(state["model_config"])
    if model_cfg is not None and model_cfg.to_dict() != saved.to_dict():
        diff = {k: (v, saved.to_dict()[k]) for k, v in model_cfg.to_dict().items() if saved.to_dict()[k] != v}
        raise CheckpointMismatchError(f"checkpoint config differs from requested config: {diff}")
    model = OrientedCenterNet(saved)
    try:
        model.load_state_dict(state["model"])
    except RuntimeError as e:
        raise CheckpointMismatchError(f"checkpoint parameters do not fit the model: {e}") from None
    model.eval()
    return model, state


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, dataset: SceneDataset, out_dir=None, resume=None,
          callback=None):
    """Optimise the detector; returns ``(model, history)``.

    ``history`` holds one dict per step with every loss term and the learning
    rate; it is also appended to ``out_dir/train_log.jsonl`` when given.
    """
    if len(dataset) == 0:
        raise ValueError("empty training set")
    if train_cfg.threads:
        torch.set_num_threads(train_cfg.threads)
    torch.manual_seed(train_cfg.seed)
    rng = np.random.default_rng(train_cfg.seed)
    model = OrientedCenterNet(model_cfg)
    opt, sched = make_optimizer(model, train_cfg)
    start = 0
    if resume is not None:
        loaded, state = load_checkpoint(resume, model_cfg)
        model.load_state_dict(loaded.state_dict())
        opt.load_state_dict(state["optimizer"])
        sched.load_state_dict(state["scheduler"])
        rng.bit_generator.state = state["rng"]["numpy"]
        torch.set_rng_state(state["rng"]["torch"])
        start = state["step"]
    log_file = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_file = open(os.path.join(out_dir, "train_log.jsonl"), "a" if resume else "w")
    history = []
    model.train()
    batch = min(train_cfg.batch_size, len(dataset))
    try:
        for step in range(start + 1, train_cfg.steps + 1):
            idx = epoch_indices(len(dataset), batch, step, train_cfg.seed)
            images, targets, _ = make_batch(dataset, idx, rng, train_cfg, model_cfg)
            pred = model(images, targets)
            total, terms = loss_total(pred, targets, model_cfg)
            for name, value in list(terms.items()) + [("total", total)]:
                if not torch.isfinite(value):
                    raise NonFiniteLossError(name, step, value.item())
            opt.zero_grad()
            total.backward()
            opt.step()
            lr = opt.param_groups[0]["lr"]
            sched.step()
            rec = {"step": step, "total": total.item(), **{k: v.item() for k, v in terms.items()}, "lr": lr}
            history.append(rec)
            if log_file is not None and step % train_cfg.log_every == 0:
                log_file.write(json.dumps(rec) + "\n")
            if callback is not None:
                callback(rec)
            if out_dir is not None and (step % train_cfg.checkpoint_every == 0 or step == train_cfg.steps):
                save_checkpoint(os.path.join(out_dir, f"checkpoint_{step:07d}.pt"), model, model_cfg, train_cfg,
                                opt, sched, step, rng)
                save_checkpoint(os.path.join(out_dir, "checkpoint_last.pt"), model, model_cfg, train_cfg,
                                opt, sched, step, rng)
    finally:
        if log_file is not None:
            log_file.close()
    model.eval()
    return model, history


@torch.no_grad()
def predict(model, dataset, model_cfg=None, nms=True, iou_threshold=0.5, suppress_threshold=0.03, batch_size=8):
    """Detections per image in the dataset's original coordinates."""
    model_cfg = model_cfg or model.config
    model.eval()
    out = []
    for start in range(0, len(dataset), batch_size):
        idx = range(start, min(len(dataset), start + batch_size))
        images = []
        scales = []
        for i in idx:
            img, ann = dataset[i]
            fitted, _ = fit_to_input(img, SceneAnnotation(ann.image_id, ann.width, ann.height), model_cfg.input_size)
            images.append(fitted)
            scales.append(_inverse_fit(img.shape[:2], model_cfg.input_size))
        pred = model(to_tensor(images))
        for dets, inv in zip(decode(pred, model_cfg.stride, model_cfg.top_k, model_cfg.score_floor), scales):
            dets = [_unfit(d, *inv) for d in dets]
            if nms:
                dets = angle_soft_nms(dets, iou_threshold, suppress_threshold)
            out.append(dets)
    return out


def _inverse_fit(shape, size):
    h, w = shape
    s = size / max(h, w)
    nw, nh = max(1, int(round(w * s))), max(1, int(round(h * s)))
    return w / nw, h / nh, (size - nw) // 2, (size - nh) // 2


def _unfit(det, sx, sy, ox, oy):
    if sx == 1 and sy == 1 and ox == 0 and oy == 0:
        return det
    cx, cy = det.box.center
    box = Septet((cx - ox) * sx, (cy - oy) * sy, det.box.w * sx, det.box.h * sy, det.box.theta)
    return replace(det, box=box)
