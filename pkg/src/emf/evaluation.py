"""Size-protocol filtering and COCO-style mAP[50:95].

Matching, ranking and 101-point interpolation follow the COCO evaluation
conventions: per (frame, class) the top ``max_dets`` detections are matched
greedily in score order, each to the still-unmatched gt of highest IoU with
``IoU >= threshold``; AP is the mean over recall points 0.00..1.00 of the
best precision achieved at any recall at or above that point. Classes without
ground truth are excluded from the mean.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from emf.detection import BBox, Detection, iou_matrix
from emf.events import LabeledBox, label_window_start

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * k, 2) for k in range(10))
RECALL_STEPS = 100  # recall grid k / 100, k = 0..100
MAX_DETS = 100


@dataclass(frozen=True)
class EvalProtocol:
    name: str
    min_side: float
    min_diag: float
    spatial_divisor: int


PROTOCOLS = {
    "gen1": EvalProtocol("gen1", 10, 30, 1),
    "1mpx": EvalProtocol("1mpx", 20, 60, 2),
    "none": EvalProtocol("none", 0, 0, 1),
}
PROTOCOLS["onempx"] = PROTOCOLS["1mpx"]


def get_protocol(name: str) -> EvalProtocol:
    try:
        return PROTOCOLS[name.lower()]
    except KeyError:
        raise ValueError(f"unknown protocol {name!r}; choose from gen1, 1mpx, none") from None


@dataclass(frozen=True)
class GtBox:
    frame: int
    class_id: int
    box: BBox


def labels_to_gts(labels: Iterable[LabeledBox], dt: int, label_interval: str = "right-closed") -> list[GtBox]:
    """Attach labels to the start time of the window they are evaluated in."""
    return [GtBox(label_window_start(l.t, dt, label_interval), l.class_id, BBox.from_label(l)) for l in labels]


def _extent(b) -> tuple:
    if isinstance(b, (Detection, GtBox)):
        return b.box.w, b.box.h
    return b.w, b.h


def filter_protocol(boxes: Sequence, protocol: EvalProtocol) -> list:
    """Drop boxes with ``min(w, h) < min_side`` or diagonal ``< min_diag``."""
    out = []
    for b in boxes:
        w, h = _extent(b)
        if min(w, h) < protocol.min_side or math.hypot(w, h) < protocol.min_diag:
            continue
        out.append(b)
    return out


def _rank_key(d: Detection) -> tuple:
    return d.sort_key()


def match_detections(dets: Sequence[Detection], gts: Sequence[BBox], iou_threshold: float) -> list[tuple]:
    """Greedy matching within one frame and class.

    Returns ``(detection, gt_index)`` pairs in rank order; ``gt_index`` is -1 for
    false positives. Unmatched gts are the false negatives.
    """
    ranked = sorted(dets, key=_rank_key)
    if not ranked:
        return []
    if not gts:
        return [(d, -1) for d in ranked]
    ious = iou_matrix(
        np.array([(d.box.cx, d.box.cy, d.box.w, d.box.h) for d in ranked]),
        np.array([(g.cx, g.cy, g.w, g.h) for g in gts]),
    )
    return list(zip(ranked, _greedy(ious, iou_threshold)))


def _greedy(ious: np.ndarray, thr: float) -> list[int]:
    taken = np.zeros(ious.shape[1], bool)
    out = []
    for row in ious:
        cand = np.where(taken, -1.0, row)
        j = int(np.argmax(cand))
        if cand[j] >= thr:
            taken[j] = True
            out.append(j)
        else:
            out.append(-1)
    return out


def average_precision(matches: Sequence[tuple], num_gts: int) -> Optional[float]:
    """101-point interpolated AP of pooled ``(detection, gt_index)`` matches.

    Returns None when there is no ground truth.
    """
    if num_gts == 0:
        return None
    if not matches:
        return 0.0
    order = sorted(range(len(matches)), key=lambda i: _rank_key(matches[i][0]))
    tp = np.array([matches[i][1] >= 0 for i in order], dtype=np.int64)
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, len(tp) + 1)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    # recall >= k/100 compared exactly as integers: ctp * 100 >= k * num_gts
    grid = np.arange(RECALL_STEPS + 1, dtype=np.int64) * num_gts
    idx = np.searchsorted(ctp * RECALL_STEPS, grid, side="left")
    q = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(np.mean(q))


@dataclass
class EvalResult:
    protocol: str
    iou_thresholds: tuple = IOU_THRESHOLDS
    per_class_ap: dict = field(default_factory=dict)
    per_class_ap_50_95: dict = field(default_factory=dict)
    map: Optional[float] = None
    num_gts: int = 0
    num_dets: int = 0
    excluded_classes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol,
            "iou_thresholds": list(self.iou_thresholds),
            "per_class_ap": {str(k): v for k, v in self.per_class_ap.items()},
            "per_class_ap_50_95": {str(k): v for k, v in self.per_class_ap_50_95.items()},
            "mAP_50_95": self.map,
            "num_gts": self.num_gts,
            "num_dets": self.num_dets,
            "excluded_classes": list(self.excluded_classes),
        }

    def table(self) -> str:
        lines = [f"protocol: {self.protocol}   gts: {self.num_gts}   dets: {self.num_dets}",
                 f"{'class':>6} {'AP50':>7} {'AP75':>7} {'AP50:95':>8}"]
        for c in sorted(self.per_class_ap_50_95):
            ap = self.per_class_ap_50_95[c]
            if ap is None:
                lines.append(f"{c:>6} {'-':>7} {'-':>7} {'(no gt)':>8}")
                continue
            aps = self.per_class_ap[c]
            lines.append(f"{c:>6} {aps[0]:7.3f} {aps[5]:7.3f} {ap:8.3f}")
        m = "n/a" if self.map is None else f"{self.map:.3f}"
        lines.append(f"mAP[50:95] = {m}")
        return "\n".join(lines)


def map_50_95(
    dets: Sequence[Detection],
    gts: Sequence[GtBox],
    protocol: EvalProtocol = PROTOCOLS["none"],
    frames: Optional[Iterable[int]] = None,
    max_dets: Optional[int] = MAX_DETS,
) -> EvalResult:
    """Filter both sides by ``protocol`` and compute mAP averaged over IoU 0.50:0.95.

    Args:
        dets: Detections; ``Detection.t0`` identifies the frame.
        gts: Ground truth boxes with frame ids.
        frames: If given, detections outside these frames are ignored.
        max_dets: Per frame and class, only the top-ranked detections are kept.
    """
    gts = filter_protocol(gts, protocol)
    dets = filter_protocol(dets, protocol)
    if frames is not None:
        allowed = set(frames)
        dets = [d for d in dets if d.t0 in allowed]

    groups: dict = {}
    for g in gts:
        groups.setdefault((g.frame, g.class_id), ([], []))[1].append(g.box)
    for d in dets:
        groups.setdefault((d.t0, d.class_id), ([], []))[0].append(d)
    classes = sorted({c for _, c in groups})
    if max_dets is not None:
        for key, (ds, _) in groups.items():
            ds.sort(key=_rank_key)
            del ds[max_dets:]

    result = EvalResult(protocol.name, num_gts=len(gts), num_dets=sum(len(v[0]) for v in groups.values()))
    for c in classes:
        keys = [k for k in groups if k[1] == c]
        n_gt = sum(len(groups[k][1]) for k in keys)
        if n_gt == 0:
            result.per_class_ap[c] = None
            result.per_class_ap_50_95[c] = None
            result.excluded_classes.append(c)
            continue
        aps = []
        for thr in IOU_THRESHOLDS:
            pooled = []
            for k in keys:
                ds, gs = groups[k]
                pooled.extend(match_detections(ds, gs, thr))
            aps.append(average_precision(pooled, n_gt))
        result.per_class_ap[c] = aps
        result.per_class_ap_50_95[c] = float(np.mean(aps))
    valid = [v for v in result.per_class_ap_50_95.values() if v is not None]
    result.map = float(np.mean(valid)) if valid else None
    return result
