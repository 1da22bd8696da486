"""Synthetic event streams of moving rectangles, with matching labels.

Used for smoke tests and demos; the statistics only loosely resemble a real
sensor. Each object emits events along its leading and trailing edges with
polarity set by the direction of motion, on top of uniform background noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from emf.events import EventStream, LabeledBox


@dataclass
class _Object:
    x: float
    y: float
    w: float
    h: float
    vx: float  # px per ms
    vy: float
    class_id: int


def _spawn(rng, width, height, n, num_classes):
    objs = []
    for _ in range(n):
        w = rng.uniform(0.1, 0.3) * width
        h = rng.uniform(0.15, 0.4) * height
        objs.append(_Object(
            x=rng.uniform(0, width - w), y=rng.uniform(0, height - h), w=w, h=h,
            vx=rng.uniform(-0.15, 0.15), vy=rng.uniform(-0.08, 0.08),
            class_id=int(rng.integers(0, num_classes)),
        ))
    return objs


def _edge_events(rng, o: _Object, n: int, width: int, height: int):
    """Sample ``n`` points on the rectangle outline; polarity follows motion."""
    side = rng.integers(0, 4, n)
    u = rng.random(n)
    x = np.where(side == 0, o.x, np.where(side == 1, o.x + o.w, o.x + u * o.w))
    y = np.where(side == 2, o.y, np.where(side == 3, o.y + o.h, o.y + u * o.h))
    lead = ((side == 1) & (o.vx > 0)) | ((side == 0) & (o.vx < 0)) | ((side == 3) & (o.vy > 0)) | ((side == 2) & (o.vy < 0))
    p = np.where(lead, 1, -1)
    xi = np.clip(np.round(x + rng.normal(0, 0.7, n)), 0, width - 1).astype(np.int64)
    yi = np.clip(np.round(y + rng.normal(0, 0.7, n)), 0, height - 1).astype(np.int64)
    return xi, yi, p


def synthetic_sequence(
    width: int = 304,
    height: int = 240,
    duration_us: int = 1_000_000,
    num_objects: int = 3,
    num_classes: int = 2,
    edge_rate: float = 40.0,
    noise_rate: float = 20.0,
    label_period_us: int = 50_000,
    seed: int = 0,
) -> tuple[EventStream, list[LabeledBox]]:
    """Generate a stream and its labels.

    Args:
        edge_rate: Mean events per object per millisecond.
        noise_rate: Mean background events per millisecond over the sensor.
        label_period_us: Labels are emitted at every multiple of this period
            (excluding ``t = 0``), one per object, clipped to the sensor.

    Returns:
        ``(stream, labels)`` with labels sorted by time.
    """
    rng = np.random.default_rng(seed)
    objs = _spawn(rng, width, height, num_objects, num_classes)
    cols = ([], [], [], [])
    labels = []
    step = 1000
    for t0 in range(0, duration_us, step):
        for o in objs:
            n = rng.poisson(edge_rate)
            x, y, p = _edge_events(rng, o, n, width, height)
            cols[0].append(t0 + rng.integers(0, step, n))
            cols[1].append(x)
            cols[2].append(y)
            cols[3].append(p)
        n = rng.poisson(noise_rate)
        cols[0].append(t0 + rng.integers(0, step, n))
        cols[1].append(rng.integers(0, width, n))
        cols[2].append(rng.integers(0, height, n))
        cols[3].append(rng.choice([-1, 1], n))
        for o in objs:
            o.x += o.vx * step / 1000
            o.y += o.vy * step / 1000
            if o.x < 0 or o.x + o.w > width:
                o.vx = -o.vx
                o.x = min(max(o.x, 0.0), width - o.w)
            if o.y < 0 or o.y + o.h > height:
                o.vy = -o.vy
                o.y = min(max(o.y, 0.0), height - o.h)
        t1 = t0 + step
        if label_period_us and t1 % label_period_us == 0:
            for k, o in enumerate(objs):
                labels.append(LabeledBox(t1, round(o.x, 2), round(o.y, 2), round(o.w, 2), round(o.h, 2), o.class_id, k))
    t, x, y, p = (np.concatenate(c) for c in cols)
    stream = EventStream.from_arrays(width, height, t, x, y, p)
    return stream, labels
