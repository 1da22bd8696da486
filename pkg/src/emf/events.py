"""Event stream and label I/O, validation, and time windowing.

Two on-disk event formats are supported:

* ``EVT1`` binary: a 20 byte header (magic, width u16, height u16, reserved u32,
  count u64) followed by ``count`` 16 byte little-endian records
  ``(t_us u64, x u16, y u16, p i8, 3 zero pad bytes)``.
* CSV with the header ``t_us,x,y,p``. CSV carries no geometry, so the sensor
  width and height must be supplied by the caller.

Labels are JSON lines with keys ``t_us, x, y, w, h, class_id`` and an optional
``track_id``; ``x, y`` is the top-left corner.
"""

from __future__ import annotations

import io
import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

from emf.errors import FormatError, ValidationError

logger = logging.getLogger(__name__)

MAGIC = b"EVT1"
HEADER = struct.Struct("<4sHHIQ")
RECORD_DTYPE = np.dtype(
    [("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1"), ("pad", "u1", (3,))]
)
assert RECORD_DTYPE.itemsize == 16
CSV_HEADER = "t_us,x,y,p"
LABEL_KEYS = ("t_us", "x", "y", "w", "h", "class_id")


@dataclass(frozen=True)
class Event:
    t: int
    x: int
    y: int
    p: int


@dataclass(frozen=True)
class LabeledBox:
    """Ground-truth box; ``(x, y)`` is the top-left corner in pixels."""

    t: int
    x: float
    y: float
    w: float
    h: float
    class_id: int
    track_id: Optional[int] = None


@dataclass(frozen=True, eq=False)
class EventStream:
    """Time-sorted events of one sensor, stored column-wise.

    ``t`` is int64 microseconds, ``x``/``y`` are int32 pixel indices and
    ``p`` is int8 polarity in {-1, +1}.
    """

    width: int
    height: int
    t: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    x: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int32))
    y: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int32))
    p: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int8))

    def __len__(self) -> int:
        return int(self.t.shape[0])

    def __getitem__(self, i: int) -> Event:
        return Event(int(self.t[i]), int(self.x[i]), int(self.y[i]), int(self.p[i]))

    def __iter__(self) -> Iterator[Event]:
        for i in range(len(self)):
            yield self[i]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EventStream):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.p, other.p)
        )

    def slice(self, start: int, stop: int) -> "EventStream":
        return EventStream(
            self.width, self.height, self.t[start:stop], self.x[start:stop],
            self.y[start:stop], self.p[start:stop],
        )

    @classmethod
    def from_arrays(cls, width, height, t, x, y, p, *, sort: bool = True) -> "EventStream":
        """Validate columns and build a stream, stably sorting by ``t`` if needed."""
        t = np.asarray(t, dtype=np.int64).reshape(-1)
        x = np.asarray(x, dtype=np.int64).reshape(-1)
        y = np.asarray(y, dtype=np.int64).reshape(-1)
        p = np.asarray(p, dtype=np.int64).reshape(-1)
        n = t.shape[0]
        if not (x.shape[0] == y.shape[0] == p.shape[0] == n):
            raise ValidationError("event columns have different lengths")
        if width <= 0 or height <= 0:
            raise ValidationError(f"invalid sensor geometry {width}x{height}")
        _check_events(t, x, y, p, width, height)
        if n > 1 and np.any(np.diff(t) < 0):
            if not sort:
                raise ValidationError("events are not sorted by timestamp")
            order = np.argsort(t, kind="stable")
            t, x, y, p = t[order], x[order], y[order], p[order]
        return cls(int(width), int(height), t, x.astype(np.int32), y.astype(np.int32), p.astype(np.int8))

    @classmethod
    def from_events(cls, events: Iterable[Event], width: int, height: int) -> "EventStream":
        events = list(events)
        cols = np.array([(e.t, e.x, e.y, e.p) for e in events], dtype=np.int64).reshape(-1, 4)
        return cls.from_arrays(width, height, cols[:, 0], cols[:, 1], cols[:, 2], cols[:, 3])


@dataclass(frozen=True)
class EventWindow:
    """Events with ``t0 <= t < t0 + dt`` and the labels attached to that window."""

    t0: int
    dt: int
    events: EventStream
    labels: tuple = ()

    @property
    def t_end(self) -> int:
        return self.t0 + self.dt


def _check_events(t, x, y, p, width, height, *, where=None) -> None:
    if where is None:
        def where(i):
            return f"record {i}"

    bad = np.flatnonzero(t < 0)
    if bad.size:
        raise ValidationError(f"negative timestamp {t[bad[0]]} at {where(bad[0])}")
    bad = np.flatnonzero((x < 0) | (x >= width))
    if bad.size:
        i = bad[0]
        raise ValidationError(f"x={x[i]} out of bounds for width {width} at {where(i)}")
    bad = np.flatnonzero((y < 0) | (y >= height))
    if bad.size:
        i = bad[0]
        raise ValidationError(f"y={y[i]} out of bounds for height {height} at {where(i)}")
    bad = np.flatnonzero((p != 1) & (p != -1))
    if bad.size:
        i = bad[0]
        raise ValidationError(f"polarity {p[i]} not in {{-1, +1}} at {where(i)}")


# --------------------------------------------------------------------------
# events


def _guess_format(path: Path) -> str:
    return "csv" if path.suffix.lower() in (".csv", ".txt") else "binary"


def read_events(
    path,
    format: Optional[str] = None,
    width: Optional[int] = None,
    height: Optional[int] = None,
) -> EventStream:
    """Read and validate an event file.

    Args:
        path: File to read.
        format: ``"binary"`` or ``"csv"``; guessed from the suffix if omitted.
        width, height: Sensor geometry. Required for CSV; for binary files they
            are checked against the header when given.

    Returns:
        A validated stream. Out-of-order events are stably sorted by time.
    """
    path = Path(path)
    fmt = format or _guess_format(path)
    if fmt == "binary":
        stream = _read_binary(path)
        if (width is not None and width != stream.width) or (
            height is not None and height != stream.height
        ):
            raise ValidationError(
                f"{path}: header geometry {stream.width}x{stream.height} "
                f"does not match expected {width}x{height}"
            )
        return stream
    if fmt == "csv":
        if width is None or height is None:
            raise ValueError("CSV event files need an explicit width and height")
        return _read_csv(path, width, height)
    raise ValueError(f"unknown event format {fmt!r}")


def _read_binary(path: Path) -> EventStream:
    data = path.read_bytes()
    if len(data) < HEADER.size:
        raise FormatError(f"{path}: truncated header ({len(data)} bytes, need {HEADER.size}) at byte offset 0")
    magic, width, height, reserved, count = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at byte offset 0")
    if reserved != 0:
        raise FormatError(f"{path}: reserved header field is {reserved}, expected 0 at byte offset 8")
    expected = HEADER.size + count * RECORD_DTYPE.itemsize
    if len(data) != expected:
        offset = min(len(data), expected)
        raise FormatError(
            f"{path}: header declares {count} records ({expected} bytes) but file has "
            f"{len(data)} bytes; mismatch at byte offset {offset}"
        )
    rec = np.frombuffer(data, dtype=RECORD_DTYPE, count=count, offset=HEADER.size)

    def offset_of(i):
        return HEADER.size + int(i) * RECORD_DTYPE.itemsize

    def where(i):
        return f"record {i} (byte offset {offset_of(i)})"

    bad = np.flatnonzero(rec["pad"].any(axis=1))
    if bad.size:
        raise FormatError(f"{path}: nonzero padding in record {bad[0]} at byte offset {offset_of(bad[0]) + 13}")
    t = rec["t"]
    if count and t.max() > np.iinfo(np.int64).max:
        i = int(np.argmax(t))
        raise FormatError(f"{path}: timestamp overflow in record {i} at byte offset {offset_of(i)}")
    t = t.astype(np.int64)
    x = rec["x"].astype(np.int64)
    y = rec["y"].astype(np.int64)
    p = rec["p"].astype(np.int64)
    try:
        _check_events(t, x, y, p, width, height, where=where)
    except ValidationError as exc:
        raise ValidationError(f"{path}: {exc}") from None
    if width == 0 or height == 0:
        raise ValidationError(f"{path}: invalid sensor geometry {width}x{height}")
    return EventStream.from_arrays(width, height, t, x, y, p)


def _read_csv(path: Path, width: int, height: int) -> EventStream:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header.replace(" ", "") != CSV_HEADER:
            raise FormatError(f"{path}: line 1: expected header {CSV_HEADER!r}, got {header!r}")
        body = fh.read()
    rows = []
    linenos = []
    for lineno, line in enumerate(body.splitlines(), start=2):
        line = line.strip()
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise FormatError(f"{path}: line {lineno}: expected 4 fields, got {len(parts)}")
        try:
            rows.append([int(v) for v in parts])
            linenos.append(lineno)
        except ValueError:
            raise FormatError(f"{path}: line {lineno}: non-integer field in {line!r}") from None
    cols = np.array(rows, dtype=np.int64).reshape(-1, 4)
    t, x, y, p = cols.T
    try:
        _check_events(t, x, y, p, width, height, where=lambda i: f"line {linenos[i]}")
    except ValidationError as exc:
        raise ValidationError(f"{path}: {exc}") from None
    return EventStream.from_arrays(width, height, t, x, y, p)


def _atomic_write(path: Path, payload: bytes) -> None:
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def write_events(stream: EventStream, path, format: Optional[str] = None) -> None:
    path = Path(path)
    fmt = format or _guess_format(path)
    if fmt == "binary":
        rec = np.zeros(len(stream), dtype=RECORD_DTYPE)
        rec["t"] = stream.t
        rec["x"] = stream.x
        rec["y"] = stream.y
        rec["p"] = stream.p
        header = HEADER.pack(MAGIC, stream.width, stream.height, 0, len(stream))
        _atomic_write(path, header + rec.tobytes())
    elif fmt == "csv":
        buf = io.StringIO()
        buf.write(CSV_HEADER + "\n")
        cols = np.stack([stream.t, stream.x, stream.y, stream.p], axis=1) if len(stream) else np.zeros((0, 4), np.int64)
        np.savetxt(buf, cols, fmt="%d", delimiter=",")
        _atomic_write(path, buf.getvalue().encode("utf-8"))
    else:
        raise ValueError(f"unknown event format {fmt!r}")


# --------------------------------------------------------------------------
# labels


def parse_label(obj: dict, where: str = "") -> LabeledBox:
    missing = [k for k in LABEL_KEYS if k not in obj]
    if missing:
        raise FormatError(f"{where}missing required key(s) {missing}")
    box = LabeledBox(
        t=int(obj["t_us"]),
        x=float(obj["x"]),
        y=float(obj["y"]),
        w=float(obj["w"]),
        h=float(obj["h"]),
        class_id=int(obj["class_id"]),
        track_id=None if obj.get("track_id") is None else int(obj["track_id"]),
    )
    if not (box.w > 0 and box.h > 0):
        raise ValidationError(f"{where}box extent must be positive, got w={box.w}, h={box.h}")
    if box.class_id < 0:
        raise ValidationError(f"{where}negative class_id {box.class_id}")
    if box.t < 0:
        raise ValidationError(f"{where}negative timestamp {box.t}")
    return box


def read_labels(path, width: Optional[int] = None, height: Optional[int] = None) -> list[LabeledBox]:
    """Parse a JSON-lines label file; unknown keys are ignored.

    When ``width``/``height`` are given, boxes that do not intersect the sensor
    frame are rejected.
    """
    path = Path(path)
    boxes = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            where = f"{path}: line {lineno}: "
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{where}invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise FormatError(f"{where}expected a JSON object")
            box = parse_label(obj, where)
            if width is not None and height is not None:
                if box.x >= width or box.y >= height or box.x + box.w <= 0 or box.y + box.h <= 0:
                    raise ValidationError(f"{where}box does not intersect the {width}x{height} frame")
            boxes.append(box)
    return boxes


def label_to_dict(box: LabeledBox) -> dict:
    d = {"t_us": box.t, "x": box.x, "y": box.y, "w": box.w, "h": box.h, "class_id": box.class_id}
    if box.track_id is not None:
        d["track_id"] = box.track_id
    return d


def write_labels(boxes: Iterable[LabeledBox], path) -> None:
    lines = [json.dumps(label_to_dict(b)) for b in boxes]
    _atomic_write(Path(path), ("\n".join(lines) + ("\n" if lines else "")).encode("utf-8"))


# --------------------------------------------------------------------------
# windowing


def label_window_start(t: int, dt: int, label_interval: str = "right-closed") -> int:
    """Start of the window a label at time ``t`` belongs to.

    ``right-closed`` attaches a label to the window ``(t0, t0 + dt]`` (the window
    that ends at or after the label); ``left-closed`` uses ``[t0, t0 + dt)``.
    """
    if label_interval == "right-closed":
        return -((-t) // dt) * dt - dt
    if label_interval == "left-closed":
        return (t // dt) * dt
    raise ValueError(f"unknown label_interval {label_interval!r}")


def window_events(
    stream: EventStream,
    dt: int,
    labels: Sequence[LabeledBox] = (),
    label_interval: str = "right-closed",
) -> list[EventWindow]:
    """Split a stream into consecutive fixed-duration windows.

    Windows start at ``floor(t_min / dt) * dt`` and continue with stride ``dt``
    until the one containing the last event; empty windows in between are kept
    so recurrent state advances with wall-clock time. Labels falling outside
    the tiled range are dropped.
    """
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if len(stream) == 0:
        return []
    first = (int(stream.t[0]) // dt) * dt
    n = (int(stream.t[-1]) - first) // dt + 1
    starts = first + dt * np.arange(n + 1, dtype=np.int64)
    bounds = np.searchsorted(stream.t, starts, side="left")

    per_window: list[list[LabeledBox]] = [[] for _ in range(n)]
    for box in labels:
        k = (label_window_start(box.t, dt, label_interval) - first) // dt
        if 0 <= k < n:
            per_window[k].append(box)

    return [
        EventWindow(int(starts[k]), dt, stream.slice(int(bounds[k]), int(bounds[k + 1])), tuple(per_window[k]))
        for k in range(n)
    ]
