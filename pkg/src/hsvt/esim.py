"""Threshold-crossing conversion of intensity frames into an event stream.

Log intensity is linearly interpolated between consecutive frames. A pixel
emits one event per full contrast-threshold crossing relative to its
reference level, and the reference advances by exactly one threshold per
event.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .events import EventStream

# crossings closer than this (in units of one threshold) to the segment end
# still count; absorbs rounding in log(I + eps)
CROSSING_TOL = 1e-9


@dataclass(frozen=True)
class ConverterConfig:
    c_pos: float = 0.2
    c_neg: float = 0.2
    log_eps: float = 1e-3

    def __post_init__(self):
        if not (self.c_pos > 0 and self.c_neg > 0):
            raise ValueError("contrast thresholds must be positive")
        if not self.log_eps > 0:
            raise ValueError("log_eps must be positive")


@dataclass
class FrameSequence:
    frames: np.ndarray  # [K, H, W]
    fps: float

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3:
            raise ValueError("frames must be a [K, H, W] array")
        if not self.fps > 0:
            raise ValueError("fps must be positive")

    def timestamp_us(self, k):
        return k * 1e6 / self.fps


def _crossings(l0, l1, lref, c, sign, t0, dt):
    """Events for one polarity over a monotone segment. Returns (idx, t, new_ref)."""
    delta = sign * (l1 - lref)
    n = np.floor(delta / c + CROSSING_TOL)
    n = np.where(delta > 0, np.maximum(n, 0), 0).astype(np.int64)
    idx = np.flatnonzero(n)
    if not len(idx):
        return idx, np.zeros(0), lref
    counts = n[idx]
    pix = np.repeat(idx, counts)
    j = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts) + 1
    level = lref[pix] + sign * c * j
    span = l1[pix] - l0[pix]
    with np.errstate(divide="ignore", invalid="ignore"):
        frac = np.where(span != 0, (level - l0[pix]) / span, 1.0)
    frac = np.clip(frac, 0.0, 1.0)
    new_ref = lref.copy()
    new_ref[idx] = lref[idx] + sign * c * counts
    return pix, t0 + frac * dt, new_ref


def frames_to_events(seq, cfg=ConverterConfig()):
    frames = seq.frames
    if len(frames) < 2:
        raise ValueError("need at least two frames")
    if (frames < 0).any():
        raise ValueError("negative intensity")
    k_frames, h, w = frames.shape
    logs = np.log(frames.reshape(k_frames, -1) + cfg.log_eps)
    lref = logs[0].copy()
    ts, pix_all, pol = [], [], []
    for k in range(1, k_frames):
        l0, l1 = logs[k - 1], logs[k]
        t0 = seq.timestamp_us(k - 1)
        dt = seq.timestamp_us(k) - t0
        pix, tt, lref = _crossings(l0, l1, lref, cfg.c_pos, 1.0, t0, dt)
        ts.append(tt), pix_all.append(pix), pol.append(np.ones(len(pix), np.int8))
        pix, tt, lref = _crossings(l0, l1, lref, cfg.c_neg, -1.0, t0, dt)
        ts.append(tt), pix_all.append(pix), pol.append(-np.ones(len(pix), np.int8))
    t = np.rint(np.concatenate(ts)).astype(np.int64)
    pix = np.concatenate(pix_all)
    p = np.concatenate(pol)
    y, x = np.divmod(pix, w)
    order = np.lexsort((p, x, y, t))
    return EventStream(w, h, t[order], x[order], y[order], p[order])


# -- frame loading ----------------------------------------------------------------


def read_pgm(path):
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while raw[pos:pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    magic, width, height, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic == b"P5":
        dtype = ">u2" if maxval > 255 else "u1"
        data = np.frombuffer(raw, dtype=dtype, count=width * height, offset=pos + 1)
    elif magic == b"P2":
        data = np.array(raw[pos:].split(), dtype=np.int64)[: width * height]
    else:
        raise ValueError(f"{path}: unsupported PGM magic {magic!r}")
    return data.reshape(height, width).astype(np.float64)


def write_pgm(path, image):
    img = np.clip(np.rint(np.asarray(image, dtype=np.float64)), 0, 255).astype(np.uint8)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def load_frames(directory, fps):
    """Load ``*.npy`` or ``*.pgm`` frames from a directory, sorted by file name."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"frame directory {directory} not found")
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in (".npy", ".pgm"))
    if not files:
        raise FileNotFoundError(f"no .npy/.pgm frames in {directory}")
    frames = [np.load(p) if p.suffix.lower() == ".npy" else read_pgm(p) for p in files]
    return FrameSequence(np.stack(frames), fps)
