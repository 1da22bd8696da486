"""Stacked-histogram encoding of event windows."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from emf.errors import ConfigError, ConsistencyError
from emf.events import EventWindow

POLARITIES = 2


@dataclass(frozen=True)
class EncoderConfig:
    """Stacked-histogram parameters.

    Attributes:
        bins: Number of time bins ``T`` per window.
        dt: Window duration in microseconds.
        spatial_divisor: Integer coordinate downscale (2 for 1 Mpx sensors).
        saturation: Maximum count stored in a cell.
    """

    bins: int = 10
    dt: int = 50_000
    spatial_divisor: int = 1
    saturation: int = 255

    def __post_init__(self):
        if self.bins < 1:
            raise ConfigError(f"bins must be >= 1, got {self.bins}")
        if self.dt <= 0:
            raise ConfigError(f"dt must be positive, got {self.dt}")
        if self.spatial_divisor < 1:
            raise ConfigError(f"spatial_divisor must be >= 1, got {self.spatial_divisor}")
        if self.saturation < 1:
            raise ConfigError(f"saturation must be >= 1, got {self.saturation}")

    @property
    def channels(self) -> int:
        return POLARITIES * self.bins

    def output_hw(self, height: int, width: int) -> tuple[int, int]:
        d = self.spatial_divisor
        return math.ceil(height / d), math.ceil(width / d)

    def to_dict(self) -> dict:
        return asdict(self)


def encode_stacked_histogram(window: EventWindow, cfg: EncoderConfig) -> np.ndarray:
    """Count events per (polarity, time bin, cell) into a ``(2, T, H', W')`` volume.

    Polarity -1 maps to index 0 and +1 to index 1. The bin is
    ``min(floor((t - t0) * T / dt), T - 1)``; coordinates are integer-divided by
    ``spatial_divisor``. Counts saturate at ``cfg.saturation``.
    """
    if window.dt != cfg.dt:
        raise ConsistencyError(f"window duration {window.dt} differs from encoder dt {cfg.dt}")
    ev = window.events
    h, w = cfg.output_hw(ev.height, ev.width)
    T = cfg.bins
    rel = ev.t - window.t0
    if rel.size and (rel.min() < 0 or rel.max() >= cfg.dt):
        bad = int(np.flatnonzero((rel < 0) | (rel >= cfg.dt))[0])
        raise ConsistencyError(
            f"event {bad} at t={int(ev.t[bad])} lies outside window [{window.t0}, {window.t0 + cfg.dt})"
        )
    tbin = np.minimum(rel * T // cfg.dt, T - 1)
    pol = (ev.p.astype(np.int64) + 1) // 2
    d = cfg.spatial_divisor
    flat = ((pol * T + tbin) * h + ev.y // d) * w + ev.x // d
    counts = np.bincount(flat, minlength=POLARITIES * T * h * w)
    np.minimum(counts, cfg.saturation, out=counts)
    dtype = np.uint8 if cfg.saturation <= 255 else np.uint32
    return counts.astype(dtype).reshape(POLARITIES, T, h, w)


def flatten_volume(vol: np.ndarray) -> np.ndarray:
    """Merge polarity and time axes: channel ``c = p * T + tau``, as float32."""
    P, T, H, W = vol.shape
    return vol.reshape(P * T, H, W).astype(np.float32)


def encode_window(window: EventWindow, cfg: EncoderConfig) -> np.ndarray:
    return flatten_volume(encode_stacked_histogram(window, cfg))
