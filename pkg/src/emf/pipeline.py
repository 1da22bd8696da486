"""End-to-end detector: backbone -> FPN -> head, and a stateful window streamer."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional

import numpy as np

from emf.backbone import LstmStateSet, backbone_forward
from emf.detection import Detection, RawPrediction, decode, fpn_forward, head_forward, nms, IOU_THR, OVERLAY_SCORE_THR
from emf.encoder import EncoderConfig, encode_window
from emf.events import EventWindow
from emf.model import Model


def detector_forward(
    x: np.ndarray,
    states: Optional[LstmStateSet],
    model: Model,
    trace: Optional[dict] = None,
) -> tuple[RawPrediction, LstmStateSet]:
    """Input tensor to raw head output; the span timed by the benchmark."""
    cfg = model.config
    pyramid, states = backbone_forward(x, states, model, trace)
    feats = fpn_forward([pyramid[l - 1] for l in cfg.detection_levels], model)
    raw = head_forward(feats, model)
    if trace is not None:
        for l, f, lvl in zip(cfg.detection_levels, feats, raw.levels):
            trace[f"fpn.level{l}"] = f
            trace[f"head.level{l}"] = np.concatenate([lvl.cls, lvl.obj, lvl.reg])
    return raw, states


@dataclass
class StreamingDetector:
    """Processes one sequence's windows strictly in order, carrying LSTM state.

    ``scale`` maps input-tensor coordinates back to sensor pixels (the encoder's
    spatial divisor).
    """

    model: Model
    encoder: EncoderConfig
    score_thr: float = OVERLAY_SCORE_THR
    iou_thr: float = IOU_THR
    states: LstmStateSet = field(default_factory=LstmStateSet)

    def reset(self) -> None:
        self.states = LstmStateSet()

    def step(self, window: EventWindow) -> list[Detection]:
        x = encode_window(window, self.encoder)
        raw, self.states = detector_forward(x, self.states, self.model)
        dets = nms(decode(raw, self.score_thr, window.t0), self.iou_thr, self.score_thr)
        d = self.encoder.spatial_divisor
        if d != 1:
            dets = [_rescale(det, d) for det in dets]
        return dets

    def run(self, windows: Iterable[EventWindow]) -> Iterator[tuple[EventWindow, list[Detection]]]:
        self.reset()
        for w in windows:
            yield w, self.step(w)


def _rescale(det: Detection, s: float) -> Detection:
    from emf.detection import BBox

    b = det.box
    return Detection(BBox(b.cx * s, b.cy * s, b.w * s, b.h * s), det.class_id, det.score, det.t0)
