"""Anchor-free detection: feature pyramid, decoupled head, decoding, NMS, and loss.

Coordinates are pixels of the network input. A cell ``(gx, gy)`` of a
stride-``s`` level is anchored at ``(gx * s, gy * s)``; that point is used
both by :func:`decode` (zero offsets land on it) and by
:func:`assign_targets` (as the cell center).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from emf.errors import ShapeError
from emf.events import LabeledBox
from emf.model import Model, ModelConfig, ParamInit
from emf.tensor_core import conv2d, gelu, nearest_upsample2x

PRIOR_PROB = 0.01
DEFAULT_LAMBDA = 5.0
EVAL_SCORE_THR = 0.01
OVERLAY_SCORE_THR = 0.1
IOU_THR = 0.45
CENTER_RADIUS = 1.5


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box given by its center and extent."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0) or not all(map(math.isfinite, (self.cx, self.cy, self.w, self.h))):
            raise ValueError(f"invalid box {self}")

    @property
    def area(self) -> float:
        return self.w * self.h

    def xyxy(self) -> tuple:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)

    @classmethod
    def from_label(cls, label: LabeledBox, scale: float = 1.0) -> "BBox":
        return cls((label.x + label.w / 2) * scale, (label.y + label.h / 2) * scale, label.w * scale, label.h * scale)


@dataclass(frozen=True)
class Detection:
    box: BBox
    class_id: int
    score: float
    t0: int = 0

    def sort_key(self) -> tuple:
        return (-self.score, self.box.cx, self.box.cy, self.box.w, self.box.h, self.class_id)


@dataclass
class LevelPrediction:
    cls: np.ndarray  # (num_classes, H, W) logits
    obj: np.ndarray  # (1, H, W) logits
    reg: np.ndarray  # (4, H, W): tx, ty, tw, th
    stride: int


@dataclass
class RawPrediction:
    levels: list = field(default_factory=list)

    @property
    def num_cells(self) -> int:
        return sum(l.obj.shape[1] * l.obj.shape[2] for l in self.levels)


@dataclass(frozen=True)
class LossBreakdown:
    L: float
    L_cls: float
    L_reg: float
    lam: float
    num_positive: int = 0
    no_positive: bool = False


# --------------------------------------------------------------------------
# network


def init_head_params(cfg: ModelConfig, init: ParamInit) -> None:
    w = cfg.head_width
    for level in cfg.detection_levels:
        init.conv(f"fpn.lateral{level}", cfg.stage_channels[level - 1], w, 1)
        init.conv(f"fpn.smooth{level}", w, w, 3)
    prior = -math.log((1 - PRIOR_PROB) / PRIOR_PROB)
    init.conv("head.stem", w, w, 1)
    for branch in ("cls", "reg"):
        init.conv(f"head.{branch}_conv1", w, w, 3)
        init.conv(f"head.{branch}_conv2", w, w, 3)
    init.conv("head.cls_pred", w, cfg.num_classes, 1, bias_value=prior)
    init.conv("head.reg_pred", w, 4, 1)
    init.conv("head.obj_pred", w, 1, 1, bias_value=prior)


def fpn_forward(features: Sequence[np.ndarray], model: Model, levels: Optional[Sequence[int]] = None) -> list[np.ndarray]:
    """Top-down feature pyramid over stage outputs given fine-to-coarse.

    Each coarser map is upsampled 2x and cropped to the finer lateral map, which
    keeps cell anchors aligned when sizes are odd (e.g. 8x10 -> 15x19).
    """
    levels = list(levels or model.config.detection_levels)
    if len(features) != len(levels):
        raise ShapeError(f"{len(features)} feature maps for levels {levels}")
    laterals = [conv2d(f, model.conv(f"fpn.lateral{l}")) for f, l in zip(features, levels)]
    merged = [None] * len(levels)
    merged[-1] = laterals[-1]
    for i in range(len(levels) - 2, -1, -1):
        lat = laterals[i]
        up = nearest_upsample2x(merged[i + 1])
        if up.shape[1] < lat.shape[1] or up.shape[2] < lat.shape[2] or up.shape[0] != lat.shape[0]:
            raise ShapeError(f"upsampled map {up.shape} cannot cover lateral map {lat.shape}")
        merged[i] = lat + up[:, : lat.shape[1], : lat.shape[2]]
    return [conv2d(m, model.conv(f"fpn.smooth{l}")) for m, l in zip(merged, levels)]


def head_level_forward(x: np.ndarray, model: Model, stride: int) -> LevelPrediction:
    stem = gelu(conv2d(x, model.conv("head.stem")))
    c = gelu(conv2d(stem, model.conv("head.cls_conv1")))
    c = gelu(conv2d(c, model.conv("head.cls_conv2")))
    r = gelu(conv2d(stem, model.conv("head.reg_conv1")))
    r = gelu(conv2d(r, model.conv("head.reg_conv2")))
    return LevelPrediction(
        cls=conv2d(c, model.conv("head.cls_pred")),
        obj=conv2d(r, model.conv("head.obj_pred")),
        reg=conv2d(r, model.conv("head.reg_pred")),
        stride=stride,
    )


def head_forward(features: Sequence[np.ndarray], model: Model, strides: Optional[Sequence[int]] = None) -> RawPrediction:
    """Shared-weight decoupled head on every pyramid level; raw logits only."""
    strides = list(strides or model.config.strides)
    if len(strides) != len(features):
        raise ShapeError(f"{len(features)} feature maps but {len(strides)} strides")
    return RawPrediction([head_level_forward(f, model, s) for f, s in zip(features, strides)])


# --------------------------------------------------------------------------
# decoding and post-processing


def decode_level_arrays(level: LevelPrediction):
    """Dense decode of one level: ``(boxes (N, 4) cxcywh, scores (N, num_classes))``.

    Cells are enumerated row-major; computed in float64.
    """
    reg = level.reg.astype(np.float64)
    s = level.stride
    _, h, w = reg.shape
    if not np.all(np.isfinite(reg)):
        _, gy, gx = np.argwhere(~np.isfinite(reg))[0]
        raise ValueError(f"non-finite regression at stride {s}, cell (gx={gx}, gy={gy})")
    gy, gx = np.mgrid[0:h, 0:w]
    cx = (gx + reg[0]) * s
    cy = (gy + reg[1]) * s
    with np.errstate(over="ignore"):
        bw = np.exp(reg[2]) * s
        bh = np.exp(reg[3]) * s
    if not (np.all(np.isfinite(bw)) and np.all(np.isfinite(bh))):
        _, gy_bad, gx_bad = np.argwhere(~(np.isfinite(bw) & np.isfinite(bh))[None])[0]
        raise ValueError(f"box extent overflows at stride {s}, cell (gx={gx_bad}, gy={gy_bad})")
    boxes = np.stack([cx, cy, bw, bh], axis=-1).reshape(-1, 4)
    obj = _sigmoid64(level.obj.astype(np.float64)).reshape(1, -1)
    cls = _sigmoid64(level.cls.astype(np.float64)).reshape(level.cls.shape[0], -1)
    return boxes, (obj * cls).T


def _sigmoid64(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def decode(raw: RawPrediction, score_floor: float = 0.0, t0: int = 0) -> list[Detection]:
    """Emit every (cell, class) pair whose ``sigmoid(obj) * sigmoid(cls)`` exceeds ``score_floor``.

    Box: ``cx = (gx + tx) s``, ``cy = (gy + ty) s``, ``w = exp(tw) s``, ``h = exp(th) s``.
    """
    dets = []
    for level in raw.levels:
        boxes, scores = decode_level_arrays(level)
        cells, classes = np.nonzero(scores > score_floor)
        for i, c in zip(cells.tolist(), classes.tolist()):
            b = boxes[i]
            dets.append(Detection(BBox(float(b[0]), float(b[1]), float(b[2]), float(b[3])), c, float(scores[i, c]), t0))
    return dets


def encode_box(box: BBox, gx: int, gy: int, stride: int) -> tuple:
    """Regression targets that make :func:`decode` reproduce ``box`` at cell ``(gx, gy)``."""
    return (box.cx / stride - gx, box.cy / stride - gy, math.log(box.w / stride), math.log(box.h / stride))


def iou(a: BBox, b: BBox) -> float:
    ax0, ay0, ax1, ay1 = a.xyxy()
    bx0, by0, bx1, by1 = b.xyxy()
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a.area + b.area - inter
    return min(1.0, max(0.0, inter / union))


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of ``(n, 4)`` and ``(m, 4)`` cxcywh arrays."""
    a = np.asarray(a, np.float64).reshape(-1, 4)
    b = np.asarray(b, np.float64).reshape(-1, 4)
    ax0, ay0 = a[:, 0] - a[:, 2] / 2, a[:, 1] - a[:, 3] / 2
    ax1, ay1 = a[:, 0] + a[:, 2] / 2, a[:, 1] + a[:, 3] / 2
    bx0, by0 = b[:, 0] - b[:, 2] / 2, b[:, 1] - b[:, 3] / 2
    bx1, by1 = b[:, 0] + b[:, 2] / 2, b[:, 1] + b[:, 3] / 2
    iw = np.clip(np.minimum(ax1[:, None], bx1[None]) - np.maximum(ax0[:, None], bx0[None]), 0, None)
    ih = np.clip(np.minimum(ay1[:, None], by1[None]) - np.maximum(ay0[:, None], by0[None]), 0, None)
    inter = iw * ih
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None] - inter
    return np.clip(inter / union, 0.0, 1.0)


def boxes_array(dets: Sequence[Detection]) -> np.ndarray:
    return np.array([(d.box.cx, d.box.cy, d.box.w, d.box.h) for d in dets], np.float64).reshape(-1, 4)


def rank_order(dets: Sequence[Detection]) -> np.ndarray:
    """Indices sorting by (score desc, cx, cy, w, h, class_id)."""
    if not dets:
        return np.zeros(0, np.int64)
    b = boxes_array(dets)
    score = np.array([d.score for d in dets])
    cls = np.array([d.class_id for d in dets])
    return np.lexsort((cls, b[:, 3], b[:, 2], b[:, 1], b[:, 0], -score))


def nms(dets: Sequence[Detection], iou_thr: float = IOU_THR, score_thr: float = 0.0) -> list[Detection]:
    """Greedy per-class non-maximum suppression.

    Boxes at or below ``score_thr`` are dropped; a box is suppressed when its
    IoU with an already-kept box of the same class exceeds ``iou_thr``.
    Output is in rank order.
    """
    dets = [d for d in dets if d.score > score_thr]
    if not dets:
        return []
    boxes = boxes_array(dets)
    order = rank_order(dets)
    classes = np.array([d.class_id for d in dets])
    keep = []
    for c in np.unique(classes):
        idx = order[classes[order] == c]
        while idx.size:
            i = idx[0]
            keep.append(i)
            rest = idx[1:]
            if rest.size == 0:
                break
            ov = iou_matrix(boxes[i:i + 1], boxes[rest])[0]
            idx = rest[ov <= iou_thr]
    kept = [dets[i] for i in keep]
    return [kept[i] for i in rank_order(kept)]


# --------------------------------------------------------------------------
# training-side: assignment and loss


@dataclass
class LevelAssignment:
    positive: np.ndarray  # (H, W) bool
    matched: np.ndarray  # (H, W) int, index into gts or -1


def _gt_arrays(gts: Iterable) -> tuple[np.ndarray, np.ndarray]:
    boxes, classes = [], []
    for g in gts:
        if isinstance(g, LabeledBox):
            b, c = BBox.from_label(g), g.class_id
        else:
            b, c = g
        boxes.append((b.cx, b.cy, b.w, b.h))
        classes.append(int(c))
    return np.array(boxes, np.float64).reshape(-1, 4), np.array(classes, np.int64)


def assign_targets(gts: Sequence, shapes: Sequence[tuple], strides: Sequence[int],
                   radius: float = CENTER_RADIUS) -> list[LevelAssignment]:
    """Center-radius assignment.

    A cell is positive when its anchor point lies inside a gt box (borders
    inclusive) and within ``radius * stride`` of that box's center along both
    axes. Contested cells take the gt with the nearest center, ties going to
    the smaller box, then the lower index.

    Args:
        gts: ``LabeledBox`` items or ``(BBox, class_id)`` pairs.
        shapes: ``(H, W)`` of every level.
        strides: Stride of every level.
    """
    boxes, _ = _gt_arrays(gts)
    out = []
    for (h, w), s in zip(shapes, strides):
        if boxes.shape[0] == 0:
            out.append(LevelAssignment(np.zeros((h, w), bool), np.full((h, w), -1, np.int64)))
            continue
        gy, gx = np.mgrid[0:h, 0:w]
        px = (gx * s).reshape(-1, 1).astype(np.float64)
        py = (gy * s).reshape(-1, 1).astype(np.float64)
        cx, cy, bw, bh = (boxes[:, i][None] for i in range(4))
        inside = (np.abs(px - cx) <= bw / 2) & (np.abs(py - cy) <= bh / 2)
        near = (np.abs(px - cx) <= radius * s) & (np.abs(py - cy) <= radius * s)
        ok = inside & near
        dist = np.hypot(px - cx, py - cy)
        area = np.broadcast_to(bw * bh, dist.shape)
        n = boxes.shape[0]
        idx = np.broadcast_to(np.arange(n)[None], dist.shape)
        # lexicographic (dist, area, index) minimum over admissible gts
        big = np.where(ok, dist, np.inf)
        best_d = big.min(axis=1, keepdims=True)
        tie = ok & (big == best_d)
        area_t = np.where(tie, area, np.inf)
        best_a = area_t.min(axis=1, keepdims=True)
        tie &= area_t == best_a
        match = np.where(tie, idx, n).min(axis=1)
        positive = ok.any(axis=1)
        match = np.where(positive, match, -1)
        out.append(LevelAssignment(positive.reshape(h, w), match.reshape(h, w)))
    return out


def _bce_with_logits(x: np.ndarray, z: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0) - x * z + np.log1p(np.exp(-np.abs(x)))


def compute_loss(raw: RawPrediction, gts: Sequence, lam: float = DEFAULT_LAMBDA) -> LossBreakdown:
    """``L = L_cls + lam * L_reg`` with center-radius targets.

    ``L_cls`` is the mean objectness BCE over all cells plus the mean class BCE
    (one-hot targets) over positive cells; ``L_reg`` is the mean ``1 - IoU``
    between decoded positive boxes and their matched gts. With no positive
    cell, ``L_reg`` and the class term are 0 and ``no_positive`` is set.
    """
    boxes, classes = _gt_arrays(gts)
    shapes = [l.obj.shape[1:] for l in raw.levels]
    strides = [l.stride for l in raw.levels]
    assignment = assign_targets(list(zip([BBox(*b) for b in boxes], classes)), shapes, strides)

    obj_losses, cls_losses, ious = [], [], []
    for level, asg in zip(raw.levels, assignment):
        obj = level.obj[0].astype(np.float64)
        obj_losses.append(_bce_with_logits(obj, asg.positive.astype(np.float64)).ravel())
        if not asg.positive.any():
            continue
        gy, gx = np.nonzero(asg.positive)
        m = asg.matched[gy, gx]
        logits = level.cls[:, gy, gx].astype(np.float64).T
        onehot = np.zeros_like(logits)
        onehot[np.arange(len(m)), classes[m]] = 1.0
        cls_losses.append(_bce_with_logits(logits, onehot).ravel())
        dec, _ = decode_level_arrays(level)
        cell = gy * level.obj.shape[2] + gx
        ious.append(np.diag(iou_matrix(dec[cell], boxes[m])))

    l_obj = float(np.mean(np.concatenate(obj_losses))) if obj_losses else 0.0
    l_cls_term = float(np.mean(np.concatenate(cls_losses))) if cls_losses else 0.0
    num_pos = int(sum(len(i) for i in ious))
    l_reg = float(np.mean(1.0 - np.concatenate(ious))) if ious else 0.0
    l_cls = l_obj + l_cls_term
    total = l_cls + lam * l_reg
    return LossBreakdown(total, l_cls, l_reg, float(lam), num_pos, num_pos == 0)


# --------------------------------------------------------------------------
# serialization


def detection_to_dict(det: Detection) -> dict:
    return {
        "window_t0": int(det.t0),
        "cx": det.box.cx,
        "cy": det.box.cy,
        "w": det.box.w,
        "h": det.box.h,
        "class_id": int(det.class_id),
        "score": det.score,
    }


def detection_from_dict(d: dict) -> Detection:
    return Detection(BBox(float(d["cx"]), float(d["cy"]), float(d["w"]), float(d["h"])),
                     int(d["class_id"]), float(d["score"]), int(d.get("window_t0", 0)))
