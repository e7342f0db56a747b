"""Adam, linearly decaying learning rate, and truncated-BPTT training."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .detect import decode, detection_loss, map_50, map_50_95
from .nn import save_checkpoint

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, step, message):
        super().__init__(f"training diverged at step {step}: {message}")
        self.step = step


@dataclass(frozen=True)
class ScheduleConfig:
    lr_max: float
    total_steps: int

    def __post_init__(self):
        if not self.lr_max > 0:
            raise ValueError("lr_max must be positive")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")


def lr_at(sched, step):
    return max(0.0, sched.lr_max * (1.0 - step / sched.total_steps))


@dataclass
class OptimState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(opt, params, lr):
    """One bias-corrected Adam update, in place on ``params`` (list of Parameters)."""
    opt.step += 1
    b1, b2 = opt.beta1, opt.beta2
    c1 = 1.0 - b1 ** opt.step
    c2 = 1.0 - b2 ** opt.step
    for i, p in enumerate(params):
        key = p.name or i
        g = p.grad
        if key not in opt.m:
            opt.m[key] = np.zeros_like(p.data)
            opt.v[key] = np.zeros_like(p.data)
        m = opt.m[key] = b1 * opt.m[key] + (1 - b1) * g
        v = opt.v[key] = b2 * opt.v[key] + (1 - b2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)


def clip_grad_norm(params, max_norm):
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params))
    if max_norm and total > max_norm:
        scale = max_norm / total
        for p in params:
            p.grad = p.grad * scale
    return total


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 8
    seq_len: int = 5
    lr_max: float = 2e-3
    grad_clip: float = 5.0
    seed: int = 0
    recurrent: bool = True


def sequence_loss(model, frames, labels, states, head_cfg, recurrent=True):
    """Mean detection loss over a window chunk. ``frames``: [L, N, C, H, W];
    ``labels[n][l]``: boxes of clip n at window l."""
    terms = []
    parts = {"obj": 0.0, "cls": 0.0, "iou": 0.0}
    for l, window in enumerate(frames):
        if not recurrent:
            states = None
        preds, states = model(ad.Tensor(window, dtype=model.backbone.cfg.np_dtype), states)
        loss = detection_loss(preds, [clip[l] for clip in labels], head_cfg)
        terms.append(loss["total"])
        for k in parts:
            parts[k] += loss[k].item() / len(frames)
    total = sum(terms[1:], terms[0]) * (1.0 / len(terms))
    return total, parts, states


def window_losses(model, frames, labels, head_cfg, seq_len, recurrent=True):
    """Per-window loss values as seen by training (no parameter update).

    Each sequence of ``seq_len`` windows starts from zero state.
    """
    out = []
    for start in range(0, len(frames), seq_len):
        states = None
        for l in range(start, min(start + seq_len, len(frames))):
            if not recurrent:
                states = None
            preds, states = model(ad.Tensor(frames[l], dtype=model.backbone.cfg.np_dtype), states)
            out.append(detection_loss(preds, [clip[l] for clip in labels], head_cfg)["total"].item())
    return out


def predict(model, dataset, batch_size=8):
    """Run every clip through all windows (state carried) and decode detections.

    Returns (detections, ground truths), one entry per (clip, window) image.
    """
    was_training = model.training
    model.eval()
    dets, gts = [], []
    try:
        for start in range(0, len(dataset), batch_size):
            idx = list(range(start, min(start + batch_size, len(dataset))))
            frames = np.moveaxis(dataset.frames[idx], 1, 0)
            preds, _ = model.run_sequence(frames)
            per_window = [decode(p, model.head_cfg) for p in preds]
            for j, clip in enumerate(idx):
                for l in range(dataset.num_windows):
                    dets.append(per_window[l][j])
                    gts.append(dataset.labels[clip][l])
    finally:
        model.train(was_training)
    return dets, gts


def evaluate(model, dataset, batch_size=8):
    dets, gts = predict(model, dataset, batch_size)
    return {"map50": map_50(dets, gts), "map50_95": map_50_95(dets, gts)}


def _fmt(x):
    return float(f"{x:.10g}")


def train(model, train_set, val_set, cfg, out_dir=None, log=None):
    """Truncated BPTT: each clip is cut into sequences of ``seq_len`` windows,
    gradients flow through every window of a sequence, and no state crosses a
    sequence boundary.

    Writes ``metrics.jsonl`` and ``model.ckpt`` into ``out_dir`` when given.
    Returns the list of metric records.
    """
    rng = np.random.default_rng(cfg.seed)
    n_batches = math.ceil(len(train_set) / cfg.batch_size)
    chunks = math.ceil(train_set.num_windows / cfg.seq_len)
    sched = ScheduleConfig(cfg.lr_max, cfg.epochs * n_batches * chunks)
    opt = OptimState()
    params = model.parameters()
    names = [p.name for p in params]
    assert len(set(names)) == len(names)
    records, step = [], 0
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_fh = (out_dir / "metrics.jsonl").open("w")
    model.train()
    try:
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(train_set))
            for b in range(n_batches):
                idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
                frames = np.moveaxis(train_set.frames[idx], 1, 0)  # [windows, N, ...]
                labels = [train_set.labels[i] for i in idx]
                for start in range(0, train_set.num_windows, cfg.seq_len):
                    # each sequence of seq_len windows starts from zero state
                    stop = start + cfg.seq_len
                    chunk_labels = [clip[start:stop] for clip in labels]
                    model.zero_grad()
                    try:
                        loss, parts, _ = sequence_loss(model, frames[start:stop], chunk_labels,
                                                       None, model.head_cfg, cfg.recurrent)
                        ad.backward(loss)
                    except ad.NonFiniteError as exc:
                        raise TrainingDiverged(step, str(exc)) from exc
                    gnorm = clip_grad_norm(params, cfg.grad_clip)
                    if not math.isfinite(gnorm):
                        raise TrainingDiverged(step, "non-finite gradient norm")
                    lr = lr_at(sched, step)
                    adam_step(opt, params, lr)
                    rec = {"step": step, "epoch": epoch, "loss": _fmt(loss.item()),
                           "obj": _fmt(parts["obj"]), "cls": _fmt(parts["cls"]),
                           "iou": _fmt(parts["iou"]), "lr": _fmt(lr)}
                    records.append(rec)
                    if out_dir:
                        metrics_fh.write(json.dumps(rec) + "\n")
                    if log:
                        log(rec)
                    step += 1
            if val_set is not None:
                m = evaluate(model, val_set, cfg.batch_size)
                rec = {"step": step, "epoch": epoch, "map50": _fmt(m["map50"]),
                       "map50_95": _fmt(m["map50_95"])}
                records.append(rec)
                if out_dir:
                    metrics_fh.write(json.dumps(rec) + "\n")
                    metrics_fh.flush()
                if log:
                    log(rec)
    finally:
        if out_dir:
            metrics_fh.close()
    if out_dir:
        save_checkpoint(out_dir / "model.ckpt", model.state_dict())
    return records
