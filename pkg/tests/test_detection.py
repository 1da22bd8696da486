"""Pyramid, head, decoding, IoU, NMS, assignment and loss."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emf.detection import (
    BBox,
    Detection,
    LevelPrediction,
    RawPrediction,
    assign_targets,
    compute_loss,
    decode,
    detection_from_dict,
    detection_to_dict,
    encode_box,
    fpn_forward,
    head_forward,
    iou,
    iou_matrix,
    nms,
)
from emf.errors import ShapeError
from emf.events import LabeledBox
from emf.tensor_core import conv2d


def scalar_iou(a, b):
    """Plain-float IoU used by the brute-force NMS oracle."""
    ax0, ax1 = a.cx - a.w / 2, a.cx + a.w / 2
    ay0, ay1 = a.cy - a.h / 2, a.cy + a.h / 2
    bx0, bx1 = b.cx - b.w / 2, b.cx + b.w / 2
    by0, by1 = b.cy - b.h / 2, b.cy + b.h / 2
    inter = max(0.0, min(ax1, bx1) - max(ax0, bx0)) * max(0.0, min(ay1, by1) - max(ay0, by0))
    return inter / (a.w * a.h + b.w * b.h - inter)


def brute_force_nms(dets, iou_thr, score_thr=0.0):
    ranked = sorted((d for d in dets if d.score > score_thr),
                    key=lambda d: (-d.score, d.box.cx, d.box.cy, d.box.w, d.box.h, d.class_id))
    kept = []
    for d in ranked:
        if all(k.class_id != d.class_id or scalar_iou(k.box, d.box) <= iou_thr for k in kept):
            kept.append(d)
    return kept


def random_dets(rng, n, num_classes=3, extent=200.0):
    out = []
    for _ in range(n):
        w, h = rng.uniform(5, 60, 2)
        out.append(Detection(BBox(*rng.uniform(0, extent, 2), w, h), int(rng.integers(num_classes)),
                             float(rng.choice([rng.random(), 0.5]))))
    return out


def _level(h, w, stride, num_classes=2, obj=-40.0, cls=-40.0):
    return LevelPrediction(
        cls=np.full((num_classes, h, w), cls, np.float32),
        obj=np.full((1, h, w), obj, np.float32),
        reg=np.zeros((4, h, w), np.float32),
        stride=stride,
    )


class TestPyramidAndHead:
    def test_widths_and_crop(self, tiny_model, rng):
        feats = [rng.standard_normal(s).astype(np.float32) for s in [(16, 30, 38), (16, 15, 19), (24, 8, 10)]]
        out = fpn_forward(feats, tiny_model)
        assert [o.shape for o in out] == [(16, 30, 38), (16, 15, 19), (16, 8, 10)]

    def test_default_width(self, default_model):
        for l in (2, 3, 4):
            assert default_model.params[f"fpn.smooth{l}.weight"].shape[0] == 192

    def test_single_level(self, tiny_model, rng):
        f = rng.standard_normal((24, 5, 6)).astype(np.float32)
        out = fpn_forward([f], tiny_model, levels=[4])
        ref = conv2d(conv2d(f, tiny_model.conv("fpn.lateral4")), tiny_model.conv("fpn.smooth4"))
        assert np.array_equal(out[0], ref)

    def test_level_count_mismatch(self, tiny_model):
        with pytest.raises(ShapeError):
            fpn_forward([np.zeros((16, 4, 4), np.float32)], tiny_model)

    def test_head_shapes(self, tiny_model, rng):
        raw = head_forward([rng.standard_normal((16, 30, 38)).astype(np.float32)], tiny_model, [8])
        lvl = raw.levels[0]
        assert lvl.cls.shape == (2, 30, 38) and lvl.reg.shape == (4, 30, 38) and lvl.obj.shape == (1, 30, 38)

    def test_head_weights_shared(self, tiny_model, rng):
        f = rng.standard_normal((16, 6, 7)).astype(np.float32)
        a, b = head_forward([f, f], tiny_model, [8, 16]).levels
        assert np.array_equal(a.cls, b.cls) and np.array_equal(a.reg, b.reg) and np.array_equal(a.obj, b.obj)

    def test_prior_bias(self, tiny_model):
        prior = -math.log((1 - 0.01) / 0.01)
        assert np.allclose(tiny_model.params["head.obj_pred.bias"], prior)


class TestDecode:
    def test_zero_regression(self):
        lvl = _level(4, 5, 8, obj=40.0, cls=40.0)
        dets = [d for d in decode(RawPrediction([lvl]), 0.5) if d.class_id == 0]
        box = next(d.box for d in dets if d.box.cx == 24 and d.box.cy == 16)
        assert (box.w, box.h) == (8.0, 8.0)

    def test_cell_anchor(self):
        lvl = _level(3, 4, 8, obj=40.0, cls=40.0)
        lvl.reg[:, 2, 3] = [0.5, 0.25, 0.0, 0.0]
        d = [d for d in decode(RawPrediction([lvl]), 0.5) if d.class_id == 0][2 * 4 + 3]
        assert (d.box.cx, d.box.cy) == ((3 + 0.5) * 8, (2 + 0.25) * 8)

    def test_log_two_doubles_width(self):
        lvl = _level(1, 1, 16, obj=40.0, cls=40.0)
        lvl.reg[2] = math.log(2.0)
        d = decode(RawPrediction([lvl]), 0.5)[0]
        assert d.box.w == pytest.approx(32.0, rel=1e-6) and d.box.h == 16.0

    def test_low_objectness_filtered(self):
        lvl = _level(2, 2, 8, obj=-40.0, cls=40.0)
        assert decode(RawPrediction([lvl]), 1e-9) == []

    def test_score_is_product(self):
        lvl = _level(1, 1, 8, obj=0.0, cls=0.0)
        assert decode(RawPrediction([lvl]))[0].score == pytest.approx(0.25)

    def test_non_finite_names_cell(self):
        lvl = _level(3, 3, 8)
        lvl.reg[1, 2, 1] = np.nan
        with pytest.raises(ValueError, match=r"gx=1, gy=2"):
            decode(RawPrediction([lvl]))

    @settings(max_examples=100, deadline=None)
    @given(gx=st.integers(0, 40), gy=st.integers(0, 30), w=st.floats(1, 300), h=st.floats(1, 300),
           s=st.sampled_from([8, 16, 32]))
    def test_encode_decode_round_trip(self, gx, gy, w, h, s):
        box = BBox(gx * s, gy * s, w, h)
        lvl = _level(gy + 1, gx + 1, s, num_classes=1, obj=40.0, cls=40.0)
        lvl.reg = lvl.reg.astype(np.float64)
        lvl.reg[:, gy, gx] = encode_box(box, gx, gy, s)
        d = decode(RawPrediction([lvl]), 0.5)[-1]
        assert d.box.cx == pytest.approx(box.cx, abs=1e-9) and d.box.cy == pytest.approx(box.cy, abs=1e-9)
        assert d.box.w == pytest.approx(w, rel=1e-12) and d.box.h == pytest.approx(h, rel=1e-12)


class TestIou:
    def test_examples(self):
        a = BBox(0, 0, 1, 1)
        assert iou(a, a) == 1.0
        assert iou(a, BBox(5, 5, 1, 1)) == 0.0
        assert iou(a, BBox(0.5, 0, 1, 1)) == pytest.approx(1 / 3)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=2, max_size=2), st.lists(st.floats(0.1, 40), min_size=2, max_size=2),
           st.lists(st.floats(-50, 50), min_size=2, max_size=2), st.lists(st.floats(0.1, 40), min_size=2, max_size=2))
    def test_symmetric_and_bounded(self, c1, s1, c2, s2):
        a, b = BBox(*c1, *s1), BBox(*c2, *s2)
        v = iou(a, b)
        assert v == iou(b, a)
        assert 0.0 <= v <= 1.0
        assert iou_matrix([[*c1, *s1]], [[*c2, *s2]])[0, 0] == pytest.approx(v, abs=1e-12)

    def test_one_only_for_identical(self):
        assert iou(BBox(1, 1, 2, 2), BBox(1, 1, 2, 2.0001)) < 1.0


class TestNms:
    def test_greedy_example(self):
        # two 10x10 boxes offset so IoU = 0.6: overlap 7.5 -> 75 / 125
        a = Detection(BBox(0, 0, 10, 10), 0, 0.9)
        b = Detection(BBox(2.5, 0, 10, 10), 0, 0.8)
        assert iou(a.box, b.box) == pytest.approx(0.6)
        assert nms([b, a], 0.45) == [a]

    def test_classes_are_separate(self):
        a = Detection(BBox(0, 0, 10, 10), 0, 0.9)
        b = Detection(BBox(0, 0, 10, 10), 1, 0.9)
        assert set(nms([a, b], 0.45)) == {a, b}

    def test_empty(self):
        assert nms([], 0.45) == []

    def test_score_threshold(self):
        a = Detection(BBox(0, 0, 10, 10), 0, 0.05)
        assert nms([a], 0.45, 0.1) == []

    def test_tie_break_is_order_independent(self, rng):
        dets = [Detection(BBox(float(x), 0, 10, 10), 0, 0.5) for x in (3, 1, 2)]
        assert nms(dets, 0.1) == nms(dets[::-1], 0.1)
        assert nms(dets, 0.1)[0].box.cx == 1.0

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        dets = random_dets(rng, 300)
        out = nms(dets, 0.45)
        assert out == brute_force_nms(dets, 0.45)
        for i, a in enumerate(out):
            for b in out[i + 1:]:
                assert a.class_id != b.class_id or iou(a.box, b.box) <= 0.45


class TestAssignment:
    def test_whole_frame_gt(self):
        gt = (BBox(32, 24, 64, 48), 0)
        a = assign_targets([gt], [(6, 8)], [8])[0]
        gy, gx = np.mgrid[0:6, 0:8]
        expected = (np.abs(gx * 8 - 32) <= 12) & (np.abs(gy * 8 - 24) <= 12)
        assert np.array_equal(a.positive, expected)

    def test_no_gts(self):
        a = assign_targets([], [(4, 4)], [8])[0]
        assert not a.positive.any() and np.all(a.matched == -1)

    def test_contested_cell_nearest_center(self):
        g0 = (BBox(20, 16, 40, 40), 0)
        g1 = (BBox(30, 16, 40, 40), 1)
        a = assign_targets([g0, g1], [(5, 6)], [8])[0]
        # cell gx=3 (x=24): distance 4 to g0, 6 to g1
        assert a.matched[2, 3] == 0
        # cell gx=4 (x=32): distance 12 to g0 (outside radius), 2 to g1
        assert a.matched[2, 4] == 1

    def test_tie_goes_to_smaller_area(self):
        big = (BBox(24, 16, 40, 40), 0)
        small = (BBox(24, 16, 20, 20), 1)
        a = assign_targets([big, small], [(4, 5)], [8])[0]
        assert a.matched[2, 3] == 1

    def test_labeled_boxes_accepted(self):
        a = assign_targets([LabeledBox(0, 20, 12, 8, 8, 0)], [(4, 4)], [8])[0]
        assert a.positive[2, 3] and a.positive.sum() == 1


def perfect_prediction(gts, shape, stride, num_classes=2):
    h, w = shape
    lvl = _level(h, w, stride, num_classes)
    lvl.reg = lvl.reg.astype(np.float64)
    asg = assign_targets(gts, [shape], [stride])[0]
    for gy, gx in zip(*np.nonzero(asg.positive)):
        box, cls = gts[asg.matched[gy, gx]]
        lvl.reg[:, gy, gx] = encode_box(box, gx, gy, stride)
        lvl.obj[0, gy, gx] = 40.0
        lvl.cls[cls, gy, gx] = 40.0
    return RawPrediction([lvl])


class TestLoss:
    GTS = [(BBox(40, 40, 30, 20), 0), (BBox(100, 60, 24, 36), 1)]

    def test_perfect_prediction_near_zero(self):
        out = compute_loss(perfect_prediction(self.GTS, (12, 16), 8), self.GTS)
        assert out.num_positive > 0 and out.L < 1e-3

    def test_identity(self):
        rng = np.random.default_rng(0)
        raw = perfect_prediction(self.GTS, (12, 16), 8)
        raw.levels[0].reg += rng.normal(0, 0.3, raw.levels[0].reg.shape)
        out = compute_loss(raw, self.GTS, lam=5.0)
        assert out.L == out.L_cls + 5.0 * out.L_reg

    def test_lambda_zero(self):
        raw = perfect_prediction(self.GTS, (12, 16), 8)
        raw.levels[0].reg[2] += 0.4
        out = compute_loss(raw, self.GTS, lam=0.0)
        assert out.L == out.L_cls and out.L_reg > 0

    def test_single_positive_half_iou(self):
        gts = [(BBox(24, 16, 8, 8), 0)]
        raw = RawPrediction([_level(6, 6, 8)])
        raw.levels[0].reg[2, 2, 3] = math.log(2.0)
        out = compute_loss(raw, gts)
        assert out.num_positive == 1
        assert out.L_reg == pytest.approx(0.5, abs=1e-6)

    def test_no_positives(self):
        out = compute_loss(RawPrediction([_level(4, 4, 8)]), [])
        assert out.no_positive and out.L_reg == 0.0


class TestSerialization:
    def test_round_trip(self):
        d = Detection(BBox(1.5, 2.5, 3.0, 4.0), 1, 0.75, 50000)
        assert detection_from_dict(detection_to_dict(d)) == d
        assert set(detection_to_dict(d)) == {"window_t0", "cx", "cy", "w", "h", "class_id", "score"}
