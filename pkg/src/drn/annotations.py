"""Scene annotations and their JSON-lines file format.

One record per line::

    {"image": "scene_0000.png", "width": 256, "height": 256,
     "objects": [{"class": 0, "cx": 10.5, "cy": 20.0, "w": 12.0, "h": 8.0, "theta_deg": 15.0}],
     "provenance": {...}}

Angles are stored in degrees and loaded as radians in [-pi/2, pi/2).
Detection dumps use the same layout with an extra ``score`` per object.
"""
import json
import math
import os
import tempfile
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

from .geometry import Detection, Septet, canonical_angle


class AnnotationError(ValueError):
    """Malformed or invalid annotation file content."""


@dataclass
class SceneAnnotation:
    image_id: str
    width: int
    height: int
    objects: List[Tuple[int, Septet]] = field(default_factory=list)
    provenance: Dict = field(default_factory=dict)

    @property
    def boxes(self):
        return [b for _, b in self.objects]


def _object_record(class_id, box: Septet, score=None):
    cx, cy = box.center
    rec = {"class": int(class_id), "cx": float(cx), "cy": float(cy), "w": float(box.w), "h": float(box.h),
           "theta_deg": math.degrees(box.theta)}
    if score is not None:
        rec["score"] = float(score)
    return rec


def annotation_to_record(ann: SceneAnnotation):
    return {"image": ann.image_id, "width": int(ann.width), "height": int(ann.height),
            "objects": [_object_record(c, b) for c, b in ann.objects], "provenance": ann.provenance}


def _atomic_write(path, text):
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_annotations(path, dataset):
    lines = [json.dumps(annotation_to_record(a), sort_keys=True) for a in dataset]
    _atomic_write(path, "".join(line + "\n" for line in lines))


def write_detections(path, image_ids, detections):
    """Dump per-image detection lists in the annotation layout plus scores."""
    lines = []
    for image_id, dets in zip(image_ids, detections):
        lines.append(json.dumps({"image": image_id,
                                 "objects": [_object_record(d.class_id, d.box, d.score) for d in dets]},
                                sort_keys=True))
    _atomic_write(path, "".join(line + "\n" for line in lines))


def _number(obj, key, where, positive=False):
    if key not in obj:
        raise AnnotationError(f"{where}: missing field '{key}'")
    v = obj[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise AnnotationError(f"{where}.{key}: expected a finite number, got {v!r}")
    if positive and v <= 0:
        raise AnnotationError(f"{where}.{key}: must be > 0, got {v!r}")
    return float(v)


def _parse_object(obj, where):
    if not isinstance(obj, dict):
        raise AnnotationError(f"{where}: expected an object record")
    cls = obj.get("class")
    if isinstance(cls, bool) or not isinstance(cls, int) or cls < 0:
        raise AnnotationError(f"{where}.class: expected a non-negative integer, got {cls!r}")
    cx = _number(obj, "cx", where)
    cy = _number(obj, "cy", where)
    w = _number(obj, "w", where, positive=True)
    h = _number(obj, "h", where, positive=True)
    deg = _number(obj, "theta_deg", where)
    theta = math.radians(deg)
    if not -90.0 <= deg < 90.0:
        theta = canonical_angle(theta)
        warnings.warn(f"{where}.theta_deg: {deg} outside [-90, 90), canonicalised to {math.degrees(theta):.6g}")
    return cls, Septet(cx, cy, w, h, theta), obj.get("score")


def _parse_lines(path):
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise AnnotationError(f"{path}:{lineno}: invalid JSON ({e.msg} at column {e.colno})") from None
            if not isinstance(rec, dict):
                raise AnnotationError(f"{path}:{lineno}: expected a JSON object per line")
            yield lineno, rec


def read_annotations(path) -> List[SceneAnnotation]:
    out = []
    for lineno, rec in _parse_lines(path):
        where = f"{path}:{lineno}"
        for key in ("image", "width", "height", "objects"):
            if key not in rec:
                raise AnnotationError(f"{where}: missing field '{key}'")
        width, height = rec["width"], rec["height"]
        if not all(isinstance(v, int) and not isinstance(v, bool) and v > 0 for v in (width, height)):
            raise AnnotationError(f"{where}: width/height must be positive integers")
        if not isinstance(rec["objects"], list):
            raise AnnotationError(f"{where}.objects: expected a list")
        objs = []
        for i, obj in enumerate(rec["objects"]):
            cls, box, _ = _parse_object(obj, f"{where}: objects[{i}]")
            objs.append((cls, box))
        out.append(SceneAnnotation(str(rec["image"]), width, height, objs, rec.get("provenance", {})))
    return out


def read_detections(path):
    """Return ``{image_id: [Detection, ...]}`` from a detection dump."""
    out = {}
    for lineno, rec in _parse_lines(path):
        where = f"{path}:{lineno}"
        dets = []
        for i, obj in enumerate(rec.get("objects", [])):
            cls, box, score = _parse_object(obj, f"{where}: objects[{i}]")
            if score is None:
                raise AnnotationError(f"{where}: objects[{i}]: missing field 'score'")
            dets.append(Detection(box, cls, float(score)))
        out[str(rec["image"])] = dets
    return out
