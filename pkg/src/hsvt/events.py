"""Event streams, GEN1-style labels, and windowed histogram tensors.

File formats (little-endian throughout):

* CSV events: header ``t_us,x,y,p`` then one event per line.
* Binary events: headerless 16-byte records ``t:u64, x:u16, y:u16, p:i8`` + 3 pad bytes.
* Labels: magic ``HSVTLBL1``, ``u32`` record count, then 24-byte records
  ``t:u64, x:u16, y:u16, w:u16, h:u16, class_id:u16, track_id:u16, class_confidence:f32``.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

EVENT_DTYPE = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1"), ("pad", "V3")])
LABEL_DTYPE = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("w", "<u2"), ("h", "<u2"),
                        ("class_id", "<u2"), ("track_id", "<u2"), ("class_confidence", "<f4")])
LABEL_MAGIC = b"HSVTLBL1"
CSV_HEADER = "t_us,x,y,p"

DELTA_T_PRESETS_MS = {"gen1": 50.0, "fall": 200.0, "air": 10.0, "synthetic": 50.0}

assert EVENT_DTYPE.itemsize == 16 and LABEL_DTYPE.itemsize == 24


class FormatError(ValueError):
    """Malformed or out-of-range input data."""


@dataclass(frozen=True)
class Event:
    t: int
    x: int
    y: int
    p: int


@dataclass
class EventStream:
    """Columnar event storage; ``t`` is nondecreasing."""

    width: int
    height: int
    t: np.ndarray = field(default_factory=lambda: np.zeros(0, np.uint64))
    x: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    y: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    p: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int8))
    warnings: list = field(default_factory=list)

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.uint64)
        self.x = np.asarray(self.x, dtype=np.int64)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.p = np.asarray(self.p, dtype=np.int8)
        n = len(self.t)
        if not (len(self.x) == len(self.y) == len(self.p) == n):
            raise ValueError("event columns differ in length")
        if n:
            bad = (self.x < 0) | (self.x >= self.width) | (self.y < 0) | (self.y >= self.height)
            if bad.any():
                i = int(np.flatnonzero(bad)[0])
                raise FormatError(f"event {i} at ({self.x[i]}, {self.y[i]}) outside "
                                  f"{self.width}x{self.height} sensor")
            if not np.isin(self.p, (-1, 1)).all():
                raise FormatError("polarity must be +1 or -1")
            if (np.diff(self.t.astype(np.int64)) < 0).any():
                order = np.argsort(self.t, kind="stable")
                self.t, self.x, self.y, self.p = self.t[order], self.x[order], self.y[order], self.p[order]
                msg = "events were not time-ordered; applied stable sort"
                self.warnings.append(msg)
                logger.warning(msg)

    def __len__(self):
        return len(self.t)

    def __iter__(self):
        for i in range(len(self)):
            yield Event(int(self.t[i]), int(self.x[i]), int(self.y[i]), int(self.p[i]))

    def __eq__(self, other):
        return (isinstance(other, EventStream) and self.width == other.width
                and self.height == other.height and np.array_equal(self.t, other.t)
                and np.array_equal(self.x, other.x) and np.array_equal(self.y, other.y)
                and np.array_equal(self.p, other.p))

    @classmethod
    def from_events(cls, events, width, height):
        events = list(events)
        return cls(width, height,
                   [e.t for e in events], [e.x for e in events],
                   [e.y for e in events], [e.p for e in events])


# -- event files -----------------------------------------------------------------


def write_events(path, stream, format="bin"):
    path = Path(path)
    if format == "csv":
        lines = [CSV_HEADER] + [f"{t},{x},{y},{p}" for t, x, y, p in
                                zip(stream.t.tolist(), stream.x.tolist(), stream.y.tolist(), stream.p.tolist())]
        path.write_text("\n".join(lines) + "\n")
    elif format == "bin":
        rec = np.zeros(len(stream), dtype=EVENT_DTYPE)
        rec["t"], rec["x"], rec["y"], rec["p"] = stream.t, stream.x, stream.y, stream.p
        path.write_bytes(rec.tobytes())
    else:
        raise ValueError(f"unknown event format {format!r}")


def read_events(path, width, height, format=None):
    """Read a CSV or binary event file into a time-sorted :class:`EventStream`."""
    path = Path(path)
    if format is None:
        format = "csv" if path.suffix.lower() == ".csv" else "bin"
    if format == "csv":
        cols = ([], [], [], [])
        with path.open() as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line or (lineno == 1 and line.replace(" ", "") == CSV_HEADER):
                    continue
                parts = line.split(",")
                try:
                    if len(parts) != 4:
                        raise ValueError("expected 4 fields")
                    t, x, y, p = (int(v) for v in parts)
                    if t < 0:
                        raise ValueError("negative timestamp")
                except ValueError as exc:
                    raise FormatError(f"{path}:{lineno}: malformed event record ({exc})") from None
                for col, v in zip(cols, (t, x, y, p)):
                    col.append(v)
        return EventStream(width, height, *cols)
    if format == "bin":
        raw = path.read_bytes()
        if len(raw) % EVENT_DTYPE.itemsize:
            off = len(raw) - len(raw) % EVENT_DTYPE.itemsize
            raise FormatError(f"{path}: truncated event record at byte offset {off}")
        rec = np.frombuffer(raw, dtype=EVENT_DTYPE)
        return EventStream(width, height, rec["t"], rec["x"], rec["y"], rec["p"])
    raise ValueError(f"unknown event format {format!r}")


# -- windowing -----------------------------------------------------------------


@dataclass(frozen=True)
class WindowSpec:
    delta_t_ms: float
    t_bins: int
    height: int
    width: int

    def __post_init__(self):
        if not self.delta_t_ms > 0:
            raise ValueError("delta_t must be positive")
        if self.t_bins < 1:
            raise ValueError("t_bins must be >= 1")

    @property
    def delta_t_us(self):
        return int(round(self.delta_t_ms * 1000))

    @property
    def channels(self):
        return 2 * self.t_bins

    @classmethod
    def preset(cls, name, t_bins, height, width):
        try:
            dt = DELTA_T_PRESETS_MS[name.lower()]
        except KeyError:
            raise ValueError(f"unknown dataset preset {name!r}") from None
        return cls(dt, t_bins, height, width)


@dataclass
class FrameTensorSequence:
    frames: np.ndarray  # [windows, 2*t_bins, H, W]
    window_starts: np.ndarray  # [windows] microseconds
    dropped: int = 0

    def __len__(self):
        return len(self.frames)


def accumulate(stream, spec, t0=None, num_windows=None, binarize=False):
    """Bin events into per-window polarity/sub-bin histograms.

    Window ``i`` covers ``[t0 + i*dt, t0 + (i+1)*dt)``; sub-bin is
    ``floor(t_bins * (t - start) / dt)``; channel ``2*sub_bin`` holds positive
    events and ``2*sub_bin + 1`` negative ones.
    """
    if (spec.height, spec.width) != (stream.height, stream.width):
        raise ValueError(f"window spec {spec.height}x{spec.width} does not match sensor "
                         f"{stream.height}x{stream.width}")
    dt = spec.delta_t_us
    t = stream.t.astype(np.int64)
    if t0 is None:
        t0 = int(t[0]) if len(t) else 0
    if num_windows is None:
        num_windows = int((t[-1] - t0) // dt + 1) if len(t) and t[-1] >= t0 else 0
    frames = np.zeros((num_windows, spec.channels, spec.height, spec.width), dtype=np.float64)
    rel = t - t0
    win = np.floor_divide(rel, dt)
    keep = (rel >= 0) & (win < num_windows)
    rel, win = rel[keep], win[keep]
    sub = (spec.t_bins * (rel - win * dt)) // dt
    chan = 2 * sub + (stream.p[keep] < 0)
    np.add.at(frames, (win, chan, stream.y[keep], stream.x[keep]), 1.0)
    if binarize:
        frames = (frames > 0).astype(np.float64)
    starts = t0 + dt * np.arange(num_windows, dtype=np.int64)
    return FrameTensorSequence(frames, starts.astype(np.uint64), int((~keep).sum()))


def pad_to_multiple(frames, multiple=32):
    """Zero-pad the trailing H, W axes up to a multiple of ``multiple``."""
    h, w = frames.shape[-2:]
    ph, pw = (-h) % multiple, (-w) % multiple
    if not ph and not pw:
        return frames
    widths = [(0, 0)] * (frames.ndim - 2) + [(0, ph), (0, pw)]
    return np.pad(frames, widths)


# -- labels -----------------------------------------------------------------------


@dataclass(frozen=True)
class CornerBox:
    x1: float
    y1: float
    x2: float
    y2: float


@dataclass(frozen=True)
class BoxRecord:
    t: int
    x: float
    y: float
    w: float
    h: float
    class_id: int = 0
    class_confidence: float = 1.0
    track_id: int = 0

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box width/height must be positive, got {self.w}x{self.h}")
        if not 0.0 <= self.class_confidence <= 1.0:
            raise ValueError(f"class_confidence {self.class_confidence} outside [0, 1]")

    @property
    def xywh(self):
        return (self.x, self.y, self.w, self.h)


def corner_to_xywh(b):
    w, h = b.x2 - b.x1, b.y2 - b.y1
    if w <= 0 or h <= 0:
        raise ValueError(f"degenerate corner box {b}")
    return b.x1, b.y1, w, h


def xywh_to_corner(x, y, w, h):
    return CornerBox(x, y, x + w, y + h)


def write_labels(path, records):
    rec = np.zeros(len(records), dtype=LABEL_DTYPE)
    for i, r in enumerate(records):
        if not 0.0 <= r.class_confidence <= 1.0:
            raise ValueError(f"record {i}: confidence {r.class_confidence} outside [0, 1]")
        rec[i] = (r.t, round(r.x), round(r.y), round(r.w), round(r.h), r.class_id, r.track_id,
                  r.class_confidence)
    Path(path).write_bytes(LABEL_MAGIC + struct.pack("<I", len(records)) + rec.tobytes())


def read_labels(path):
    raw = Path(path).read_bytes()
    if raw[:8] != LABEL_MAGIC:
        raise FormatError(f"{path}: bad label magic")
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated header")
    (n,) = struct.unpack_from("<I", raw, 8)
    need = 12 + n * LABEL_DTYPE.itemsize
    if len(raw) != need:
        raise FormatError(f"{path}: expected {need} bytes for {n} records, found {len(raw)}")
    rec = np.frombuffer(raw, dtype=LABEL_DTYPE, offset=12, count=n)
    out = []
    for i, r in enumerate(rec):
        conf = float(r["class_confidence"])
        if not 0.0 <= conf <= 1.0:
            raise FormatError(f"{path}: record {i} confidence {conf} outside [0, 1]")
        out.append(BoxRecord(int(r["t"]), int(r["x"]), int(r["y"]), int(r["w"]), int(r["h"]),
                             int(r["class_id"]), conf, int(r["track_id"])))
    return out


def align_labels(labels, window_starts, delta_t_us):
    """Group labels by the half-open window containing their timestamp.

    Returns ``(groups, dropped)``.
    """
    groups = [[] for _ in window_starts]
    if not len(window_starts):
        return groups, len(labels)
    t0 = int(window_starts[0])
    dropped = 0
    for lab in labels:
        rel = int(lab.t) - t0
        i = rel // delta_t_us
        if rel < 0 or i >= len(groups):
            dropped += 1
            continue
        groups[i].append(lab)
    return groups, dropped
