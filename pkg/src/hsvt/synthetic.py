"""Moving-square event dataset for desk-scale training and tests.

A bright square drifts over a dark background and bounces off the sensor
edges. Frames are rendered at 1 kHz with anti-aliased edges and converted to
events by :func:`hsvt.esim.frames_to_events`, so events appear where the
square's boundary moves. Each window is labelled with the square's box at
the window's last microsecond.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .esim import ConverterConfig, FrameSequence, frames_to_events
from .events import (BoxRecord, EventStream, WindowSpec, accumulate, align_labels, read_events,
                     read_labels, write_events, write_labels)


@dataclass
class Clip:
    stream: EventStream
    labels: list  # BoxRecords


@dataclass
class SequenceDataset:
    """Windowed tensors for equal-length clips.

    ``frames``: [clips, windows, 2*t_bins, H, W]; ``labels[clip][window]`` is a list of
    (x, y, w, h, class_id) tuples.
    """

    frames: np.ndarray
    labels: list
    delta_t_ms: float

    def __len__(self):
        return len(self.frames)

    @property
    def num_windows(self):
        return self.frames.shape[1]

    def subset(self, idx):
        return SequenceDataset(self.frames[idx], [self.labels[i] for i in idx], self.delta_t_ms)


def _coverage(lo, side, n):
    px = np.arange(n, dtype=np.float64)
    return np.clip(np.minimum(px + 1, lo + side) - np.maximum(px, lo), 0.0, 1.0)


def render_square(height, width, x, y, side, background=0.2, foreground=1.0):
    cov = np.outer(_coverage(y, side, height), _coverage(x, side, width))
    return background + (foreground - background) * cov


def moving_square_clip(rng, height=64, width=64, num_windows=10, delta_t_ms=50.0,
                       side_range=(10, 22), speed_range=(0.08, 0.25), noise_rate_hz=2.0,
                       converter=ConverterConfig(0.25, 0.25, 1e-3)):
    side = float(rng.uniform(*side_range))
    pos = np.array([rng.uniform(0, width - side), rng.uniform(0, height - side)])
    angle = rng.uniform(0, 2 * np.pi)
    vel = rng.uniform(*speed_range) * np.array([np.cos(angle), np.sin(angle)])  # px per ms
    duration_ms = int(round(num_windows * delta_t_ms))
    positions, frames = [], []
    for _ in range(duration_ms + 1):
        positions.append(pos.copy())
        frames.append(render_square(height, width, pos[0], pos[1], side))
        pos = pos + vel
        for k, lim in ((0, width - side), (1, height - side)):
            if pos[k] < 0 or pos[k] > lim:
                vel[k] = -vel[k]
                pos[k] = np.clip(pos[k], 0, lim)
    stream = frames_to_events(FrameSequence(np.stack(frames), fps=1000.0), converter)
    if noise_rate_hz > 0:
        n_noise = rng.poisson(noise_rate_hz * height * width * duration_ms / 1000.0)
        noise = EventStream(width, height,
                            np.sort(rng.integers(0, duration_ms * 1000, n_noise)),
                            rng.integers(0, width, n_noise), rng.integers(0, height, n_noise),
                            rng.choice(np.array([-1, 1]), n_noise))
        stream = merge_streams(stream, noise)
    dt_us = int(round(delta_t_ms * 1000))
    labels = []
    for i in range(num_windows):
        t = (i + 1) * dt_us - 1
        px, py = positions[min(int(t // 1000), duration_ms)]
        x, y = int(round(px)), int(round(py))
        s = int(round(side))
        labels.append(BoxRecord(t, x, y, min(s, width - x), min(s, height - y), 0, 1.0, 1))
    return Clip(stream, labels)


def merge_streams(a, b):
    t = np.concatenate([a.t, b.t])
    x = np.concatenate([a.x, b.x])
    y = np.concatenate([a.y, b.y])
    p = np.concatenate([a.p, b.p])
    order = np.lexsort((p, x, y, t))
    return EventStream(a.width, a.height, t[order], x[order], y[order], p[order])


def clips_to_dataset(clips, t_bins, delta_t_ms, height, width, num_windows):
    spec = WindowSpec(delta_t_ms, t_bins, height, width)
    frames, labels = [], []
    for clip in clips:
        seq = accumulate(clip.stream, spec, t0=0, num_windows=num_windows)
        groups, _ = align_labels(clip.labels, seq.window_starts, spec.delta_t_us)
        frames.append(seq.frames)
        labels.append([[(b.x, b.y, b.w, b.h, b.class_id) for b in g] for g in groups])
    return SequenceDataset(np.stack(frames), labels, delta_t_ms)


def make_moving_square_clips(n_clips, seed=0, **kwargs):
    rng = np.random.default_rng(seed)
    return [moving_square_clip(rng, **kwargs) for _ in range(n_clips)]


def make_moving_square_dataset(n_clips, t_bins=4, seed=0, height=64, width=64, num_windows=10,
                               delta_t_ms=50.0, **kwargs):
    clips = make_moving_square_clips(n_clips, seed, height=height, width=width,
                                     num_windows=num_windows, delta_t_ms=delta_t_ms, **kwargs)
    return clips_to_dataset(clips, t_bins, delta_t_ms, height, width, num_windows)


# -- on-disk layout ------------------------------------------------------------------


def save_clips(directory, clips, delta_t_ms, num_windows):
    """``dataset.txt`` (key = value) plus ``clip_NNNN.bin`` / ``clip_NNNN.lbl`` per clip."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    first = clips[0].stream
    meta = {"width": first.width, "height": first.height, "delta_t_ms": delta_t_ms,
            "num_windows": num_windows, "clips": len(clips)}
    (directory / "dataset.txt").write_text("".join(f"{k} = {v}\n" for k, v in meta.items()))
    for i, clip in enumerate(clips):
        write_events(directory / f"clip_{i:04d}.bin", clip.stream)
        write_labels(directory / f"clip_{i:04d}.lbl", clip.labels)


def load_clips(directory):
    directory = Path(directory)
    meta_path = directory / "dataset.txt"
    if not meta_path.is_file():
        raise FileNotFoundError(f"{meta_path} not found")
    meta = {}
    for line in meta_path.read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            meta[k.strip()] = v.strip()
    width, height = int(meta["width"]), int(meta["height"])
    clips = []
    for i in range(int(meta["clips"])):
        stream = read_events(directory / f"clip_{i:04d}.bin", width, height, "bin")
        clips.append(Clip(stream, read_labels(directory / f"clip_{i:04d}.lbl")))
    return clips, float(meta["delta_t_ms"]), int(meta["num_windows"]), height, width
