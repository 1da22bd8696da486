"""Latency measurement of the detector forward pass.

The timed span starts with an input tensor already in memory and ends when
the head returns its raw maps (batch size 1). Encoding, decoding and I/O are
excluded unless ``end_to_end`` is set. The code path is the same one the
tests exercise; nothing is specialized ahead of time.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from emf.backbone import LstmStateSet
from emf.detection import decode, nms
from emf.encoder import EncoderConfig, encode_window
from emf.model import Model
from emf.pipeline import detector_forward

logger = logging.getLogger(__name__)


@dataclass
class BenchReport:
    iterations: int
    warmup: int
    mean_ms: float
    std_ms: float
    p50_ms: float
    p95_ms: float
    form: str
    input_shape: tuple
    end_to_end: bool = False

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    def summary(self) -> str:
        c, h, w = self.input_shape
        return (
            f"{self.form} form, input ({c},{h},{w}), {self.iterations} iters after {self.warmup} warmup: "
            f"mean {self.mean_ms:.2f} ms, std {self.std_ms:.2f}, p50 {self.p50_ms:.2f}, p95 {self.p95_ms:.2f}"
        )


def summarize(samples_ms, warmup: int, form: str, shape: tuple, end_to_end: bool = False) -> BenchReport:
    s = np.asarray(samples_ms, np.float64)
    return BenchReport(
        iterations=int(s.size),
        warmup=int(warmup),
        mean_ms=float(s.mean()),
        std_ms=float(s.std(ddof=1)) if s.size > 1 else 0.0,
        p50_ms=float(np.percentile(s, 50)),
        p95_ms=float(np.percentile(s, 95)),
        form=form,
        input_shape=tuple(shape),
        end_to_end=end_to_end,
    )


def synthetic_input(model: Model, height: int, width: int, seed: int = 0) -> np.ndarray:
    """Sparse Poisson counts shaped like a stacked histogram."""
    rng = np.random.default_rng(seed)
    return rng.poisson(0.3, (model.config.input_channels, height, width)).astype(np.float32)


def time_forward(model: Model, x: np.ndarray, iters: int, warmup: int) -> list[float]:
    """Per-iteration wall time in ms; recurrent state is carried across iterations."""
    states = LstmStateSet()
    samples = []
    for i in range(warmup + iters):
        t0 = time.perf_counter_ns()
        _, states = detector_forward(x, states, model)
        t1 = time.perf_counter_ns()
        if i >= warmup:
            samples.append((t1 - t0) / 1e6)
    return samples


def run_bench(
    model: Model,
    width: int = 304,
    height: int = 240,
    iters: int = 200,
    warmup: int = 50,
    seed: int = 0,
    end_to_end: bool = False,
    encoder: Optional[EncoderConfig] = None,
    score_thr: float = 0.1,
    iou_thr: float = 0.45,
) -> BenchReport:
    if iters < 1:
        raise ValueError(f"iters must be >= 1, got {iters}")
    if warmup < 0:
        raise ValueError(f"warmup must be >= 0, got {warmup}")
    if not end_to_end:
        x = synthetic_input(model, height, width, seed)
        samples = time_forward(model, x, iters, warmup)
        return summarize(samples, warmup, model.form, x.shape)

    from emf.synthetic import synthetic_sequence
    from emf.events import window_events

    encoder = encoder or EncoderConfig()
    d = encoder.spatial_divisor
    stream, _ = synthetic_sequence(width * d, height * d, duration_us=encoder.dt, seed=seed)
    window = window_events(stream, encoder.dt)[0]
    states = LstmStateSet()
    samples = []
    for i in range(warmup + iters):
        t0 = time.perf_counter_ns()
        x = encode_window(window, encoder)
        raw, states = detector_forward(x, states, model)
        nms(decode(raw, score_thr, window.t0), iou_thr, score_thr)
        t1 = time.perf_counter_ns()
        if i >= warmup:
            samples.append((t1 - t0) / 1e6)
    return summarize(samples, warmup, model.form, (model.config.input_channels, height, width), True)
