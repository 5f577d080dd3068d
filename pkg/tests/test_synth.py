import json
import math
import warnings

import numpy as np
import pytest
from matplotlib.path import Path

from drn.annotations import AnnotationError, SceneAnnotation, read_annotations, read_detections, write_annotations, \
    write_detections
from drn.geometry import Detection, Septet, corners_from_septet, rotated_iou, septet_from_corners
from drn.synth import (DEFAULT_ROTATIONS_DEG, PlacementError, SceneConfig, box_mask, generate_scene, max_pairwise_iou,
                       rotate_dataset, rotate_scene)

SMALL = SceneConfig(image_size=96, count_range=(8, 12), size_range=(8, 16), seed=3)


def polygon_mask(box, h, w):
    # independent rasterisation: point-in-polygon on pixel centers
    ys, xs = np.mgrid[0:h, 0:w]
    pts = np.stack([xs.ravel() + 0.5, ys.ravel() + 0.5], axis=1)
    return Path(np.array(corners_from_septet(box).polygon())).contains_points(pts).reshape(h, w)


def angle_diff(a, b):
    d = (a - b) % math.pi
    return min(d, math.pi - d)


class TestGenerate:
    def test_deterministic(self):
        a_img, a_ann = generate_scene(SMALL, 4)
        b_img, b_ann = generate_scene(SMALL, 4)
        assert np.array_equal(a_img, b_img) and a_ann == b_ann

    def test_index_varies(self):
        assert not np.array_equal(generate_scene(SMALL, 0)[0], generate_scene(SMALL, 1)[0])

    def test_count_and_angles(self):
        cfg = SceneConfig(count_range=(40, 40), angle_range_deg=(-45, 45), seed=1)
        img, ann = generate_scene(cfg)
        assert img.shape == (256, 256, 3) and img.dtype == np.uint8
        assert len(ann.objects) == 40
        assert all(-math.pi / 4 <= b.theta <= math.pi / 4 for b in ann.boxes)

    def test_boxes_inside(self):
        _, ann = generate_scene(SceneConfig(seed=2))
        for b in ann.boxes:
            c = np.array(corners_from_septet(b))
            assert c.min() >= 0 and c.max() <= 256

    def test_iou_cap(self):
        _, ann = generate_scene(SceneConfig(seed=0))
        boxes = ann.boxes
        worst = max(rotated_iou(a, b) for i, a in enumerate(boxes) for b in boxes[i + 1:])
        assert worst <= 0.05
        assert max_pairwise_iou(ann) == pytest.approx(worst)

    def test_provenance(self):
        _, ann = generate_scene(SMALL, 2)
        assert ann.provenance["seed"] == 3 and ann.provenance["index"] == 2
        assert ann.provenance["rotation_deg"] == 0

    def test_placement_failure(self):
        cfg = SceneConfig(image_size=32, count_range=(50, 50), size_range=(20, 20), max_attempts=20)
        with pytest.raises(PlacementError, match="IoU"):
            generate_scene(cfg)

    @pytest.mark.parametrize("kw", [dict(count_range=(5, 2)), dict(size_range=(0, 3)), dict(max_iou=1.0),
                                    dict(style="plaid"), dict(angle_range_deg=(10, -10))])
    def test_invalid_config(self, kw):
        with pytest.raises(ValueError):
            SceneConfig(**kw)

    def test_multiple_classes(self):
        _, ann = generate_scene(SceneConfig(num_classes=3, seed=4))
        assert {c for c, _ in ann.objects} == {0, 1, 2}


class TestFidelity:
    def test_mask_matches_polygon_oracle(self):
        _, ann = generate_scene(SceneConfig(seed=6))
        for box in ann.boxes:
            a, b = box_mask(box, 256, 256), polygon_mask(box, 256, 256)
            assert (a & b).sum() / (a | b).sum() >= 0.99

    def test_painted_pixels_follow_mask(self):
        cfg = SceneConfig(image_size=96, count_range=(1, 1), style="flat", noise=0, seed=7)
        img, ann = generate_scene(cfg)
        (box,) = ann.boxes
        inner = polygon_mask(Septet(*box.center, box.w - 4, box.h - 4, box.theta), 96, 96)
        outer = ~polygon_mask(Septet(*box.center, box.w + 4, box.h + 4, box.theta), 96, 96)
        # object interior is uniformly coloured, distinct from the background
        assert np.ptp(img[inner].astype(int), axis=0).max() <= 1
        gap = np.abs(img[inner].mean(0) - img[outer].mean(0)).max()
        assert gap > 5


class TestRotate:
    def test_zero_is_identity(self):
        img, ann = generate_scene(SMALL)
        out, rot = rotate_scene(img, ann, 0.0)
        assert np.array_equal(out, img)
        for (c0, a), (c1, b) in zip(ann.objects, rot.objects):
            assert c0 == c1
            assert b.center == pytest.approx(a.center, abs=1e-9)
            assert (b.w, b.h, b.theta) == pytest.approx((a.w, a.h, a.theta), abs=1e-12)

    def test_six_angles(self):
        items = [generate_scene(SMALL, i) for i in range(2)]
        out = rotate_dataset(items, DEFAULT_ROTATIONS_DEG)
        assert len(out) == 12
        with_orig = rotate_dataset(items, DEFAULT_ROTATIONS_DEG, include_originals=True)
        assert len(with_orig) == 14
        assert sum(len(a.objects) for _, a in out) == 6 * sum(len(a.objects) for _, a in items)
        for img, ann in out:
            assert img.shape[:2] == (ann.height, ann.width)
            for b in ann.boxes:
                c = np.array(corners_from_septet(b))
                assert c[:, 0].min() >= -1e-6 and c[:, 0].max() <= ann.width + 1e-6
                assert c[:, 1].min() >= -1e-6 and c[:, 1].max() <= ann.height + 1e-6
        assert len({a.image_id for _, a in with_orig}) == 14

    @pytest.mark.parametrize("angle", [-45, 15, 30, 73.5])
    def test_center_fixed_point(self, angle):
        box = Septet(48, 48, 20, 10, 0.3)
        img = np.full((96, 96, 3), 100, np.uint8)
        _, rot = rotate_scene(img, SceneAnnotation("c", 96, 96, [(0, box)]), angle)
        (nb,) = rot.boxes
        assert nb.center == pytest.approx((rot.width / 2, rot.height / 2), abs=1e-9)

    @pytest.mark.parametrize("angle", DEFAULT_ROTATIONS_DEG)
    def test_corners_consistency(self, angle):
        img, ann = generate_scene(SMALL)
        _, rot = rotate_scene(img, ann, angle)
        phi = math.radians(angle)
        c, s = math.cos(phi), math.sin(phi)
        for a, b in zip(ann.boxes, rot.boxes):
            pts = np.array(corners_from_septet(a)) - [ann.width / 2, ann.height / 2]
            moved = pts @ np.array([[c, s], [-s, c]]) + [rot.width / 2, rot.height / 2]
            derived = septet_from_corners(tuple(map(tuple, moved)))
            assert derived.center == pytest.approx(b.center, abs=1e-4)
            assert (derived.w, derived.h) == pytest.approx((b.w, b.h), abs=1e-4)
            assert angle_diff(derived.theta, b.theta) <= 1e-4

    def test_image_content_moves_with_box(self):
        cfg = SceneConfig(image_size=96, count_range=(1, 1), style="flat", noise=0, seed=7)
        img, ann = generate_scene(cfg)
        out, rot = rotate_scene(img, ann, 30)
        (b0,), (b1,) = ann.boxes, rot.boxes
        x0, y0 = (int(v) for v in b0.center)
        x1, y1 = (int(v) for v in b1.center)
        assert np.abs(out[y1, x1].astype(int) - img[y0, x0].astype(int)).max() <= 2

    def test_non_finite_angle(self):
        with pytest.raises(ValueError):
            rotate_dataset([generate_scene(SMALL)], [math.nan])


class TestAnnotationFiles:
    def test_round_trip(self, tmp_path):
        anns = [generate_scene(SceneConfig(count_range=(40, 40), seed=s))[1] for s in range(2)]
        path = tmp_path / "a.jsonl"
        write_annotations(path, anns)
        back = read_annotations(path)
        assert [a.image_id for a in back] == [a.image_id for a in anns]
        for a, b in zip(anns, back):
            assert (a.width, a.height, a.provenance) == (b.width, b.height, b.provenance)
            for (ca, x), (cb, y) in zip(a.objects, b.objects):
                assert ca == cb
                np.testing.assert_allclose([*x.center, x.w, x.h, x.theta], [*y.center, y.w, y.h, y.theta],
                                           rtol=1e-9, atol=1e-12)

    def test_write_is_deterministic(self, tmp_path):
        _, ann = generate_scene(SMALL)
        write_annotations(tmp_path / "a", [ann])
        write_annotations(tmp_path / "b", [ann])
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def record(self, **obj):
        base = {"class": 0, "cx": 10, "cy": 10, "w": 4, "h": 2, "theta_deg": 0}
        base.update(obj)
        return json.dumps({"image": "x", "width": 32, "height": 32, "objects": [base]}) + "\n"

    def test_negative_width(self, tmp_path):
        p = tmp_path / "bad.jsonl"
        p.write_text(self.record() + self.record(w=-1))
        with pytest.raises(AnnotationError, match=r"bad.jsonl:2: objects\[0\].w"):
            read_annotations(p)

    def test_angle_canonicalised(self, tmp_path):
        p = tmp_path / "a.jsonl"
        p.write_text(self.record(theta_deg=100))
        with pytest.warns(UserWarning, match="canonicalised"):
            (ann,) = read_annotations(p)
        assert math.degrees(ann.boxes[0].theta) == pytest.approx(-80)

    def test_in_range_angle_silent(self, tmp_path):
        p = tmp_path / "a.jsonl"
        p.write_text(self.record(theta_deg=-90))
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            read_annotations(p)

    @pytest.mark.parametrize("line,needle", [
        ("{not json", "invalid JSON"),
        ('{"image": "x", "width": 3, "height": 3}', "objects"),
        ('{"image": "x", "width": 0, "height": 3, "objects": []}', "width/height"),
        ('{"image": "x", "width": 3, "height": 3, "objects": [{"class": 0, "cx": 1, "cy": 1, "w": 1, "h": 1}]}',
         "theta_deg"),
        ('{"image": "x", "width": 3, "height": 3, "objects": [{"class": -1, "cx": 1, "cy": 1, "w": 1, "h": 1, '
         '"theta_deg": 0}]}', "class"),
    ])
    def test_malformed(self, tmp_path, line, needle):
        p = tmp_path / "a.jsonl"
        p.write_text(line + "\n")
        with pytest.raises(AnnotationError, match=needle):
            read_annotations(p)

    def test_detection_dump(self, tmp_path):
        dets = [[Detection(Septet(5, 6, 3, 2, 0.25), 1, 0.75)], []]
        write_detections(tmp_path / "d.jsonl", ["a", "b"], dets)
        back = read_detections(tmp_path / "d.jsonl")
        assert list(back) == ["a", "b"] and back["b"] == []
        (d,) = back["a"]
        assert (d.class_id, d.score) == (1, 0.75)
        assert (d.box.cx, d.box.cy, d.box.w, d.box.h) == (5, 6, 3, 2)
        assert d.box.theta == pytest.approx(0.25, abs=1e-12)
