"""Anchor-free detection head, box decoding, NMS, loss and mAP evaluation."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import HsVT, HsVTConfig
from .nn import Conv2d, Module

IOU_THRESHOLDS = tuple((50 + 5 * i) / 100 for i in range(10))
RECALL_POINTS = tuple(i / 100 for i in range(101))
REF_CELLS = 4.0  # an object is best matched where max(w, h) ~ REF_CELLS * stride
LOG_SIZE_CLIP = 8.0


@dataclass(frozen=True)
class Detection:
    box: tuple  # x, y, w, h (top-left, pixels)
    class_id: int
    score: float


@dataclass(frozen=True)
class HeadConfig:
    num_classes: int = 1
    strides: tuple = (8, 16, 32)
    score_threshold: float = 0.05
    nms_iou: float = 0.5
    box_weight: float = 5.0  # weight of the (1 - IoU) term

    def __post_init__(self):
        for v in (self.score_threshold, self.nms_iou):
            if not 0.0 < v < 1.0:
                raise ValueError("thresholds must lie in (0, 1)")


def _box(obj):
    if isinstance(obj, Detection):
        return obj.box, obj.class_id
    if hasattr(obj, "xywh"):
        return obj.xywh, obj.class_id
    x, y, w, h, c = obj
    return (x, y, w, h), c


# -- box math ---------------------------------------------------------------------


def iou(a, b):
    """Intersection over union of two (x, y, w, h) boxes."""
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    iw = min(ax + aw, bx + bw) - max(ax, bx)
    ih = min(ay + ah, by + bh) - max(ay, by)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (aw * ah + bw * bh - inter)


def nms(dets, iou_threshold):
    """Class-wise greedy NMS; keeps boxes in descending score order."""
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    kept = []
    for i in order:
        d = dets[i]
        if all(k.class_id != d.class_id or iou(k.box, d.box) <= iou_threshold for k in kept):
            kept.append(d)
    return kept


# -- evaluation ---------------------------------------------------------------------


def _ap_exact(dets_per_image, gts_per_image, class_id, iou_threshold):
    """101-point interpolated AP as an exact fraction; None when the class has no ground truth."""
    gts = [[b for b, c in map(_box, img) if c == class_id] for img in gts_per_image]
    npos = sum(len(g) for g in gts)
    if npos == 0:
        return None
    entries = [(d.score, i, d.box) for i, img in enumerate(dets_per_image)
               for d in img if d.class_id == class_id]
    entries.sort(key=lambda e: -e[0])  # stable: ties keep input order
    if not entries:
        return Fraction(0)
    used = [[False] * len(g) for g in gts]
    tp_cum, tp = [], 0
    for _, img, box in entries:
        best, best_j = -1.0, -1
        for j, g in enumerate(gts[img]):
            if used[img][j]:
                continue
            o = iou(box, g)
            if o >= iou_threshold and o > best:
                best, best_j = o, j
        if best_j >= 0:
            used[img][best_j] = True
            tp += 1
        tp_cum.append(tp)
    n = len(entries)
    envelope = [Fraction(t, k + 1) for k, t in enumerate(tp_cum)]
    for k in range(n - 2, -1, -1):
        envelope[k] = max(envelope[k], envelope[k + 1])
    total, k = Fraction(0), 0
    for i in range(len(RECALL_POINTS)):
        # first rank whose recall tp/npos reaches i/100
        while k < n and 100 * tp_cum[k] < i * npos:
            k += 1
        if k < n:
            total += envelope[k]
    return total / len(RECALL_POINTS)


def average_precision(dets_per_image, gts_per_image, class_id, iou_threshold):
    """101-point interpolated AP for one class; None when the class has no ground truth."""
    ap = _ap_exact(dets_per_image, gts_per_image, class_id, iou_threshold)
    return None if ap is None else float(ap)


def mean_average_precision(dets_per_image, gts_per_image, iou_thresholds=IOU_THRESHOLDS):
    """Mean AP over classes with ground truth and the given IoU thresholds.

    Accumulated exactly and rounded once, so the result does not depend on
    summation order.
    """
    classes = sorted({_box(g)[1] for img in gts_per_image for g in img})
    aps = [_ap_exact(dets_per_image, gts_per_image, c, t) for c in classes for t in iou_thresholds]
    aps = [a for a in aps if a is not None]
    return float(sum(aps, Fraction(0)) / len(aps)) if aps else 0.0


def map_50_95(dets_per_image, gts_per_image):
    return mean_average_precision(dets_per_image, gts_per_image, IOU_THRESHOLDS)


def map_50(dets_per_image, gts_per_image):
    return mean_average_precision(dets_per_image, gts_per_image, (0.5,))


# -- model ---------------------------------------------------------------------------


class Neck(Module):
    """Top-down merge: 1x1 laterals, nearest upsampling, addition."""

    def __init__(self, in_channels, out_channels, spiking_inputs=None, rng=None, dtype=np.float64):
        spiking_inputs = spiking_inputs or [False] * len(in_channels)
        self.laterals = [Conv2d(c, out_channels, 1, rng=rng, dtype=dtype, spiking_input=s)
                         for c, s in zip(in_channels, spiking_inputs)]

    def forward(self, feats):
        outs = [None] * len(feats)
        top = None
        for i in reversed(range(len(feats))):
            lat = self.laterals[i](feats[i])
            if top is not None:
                factor = lat.shape[-1] // top.shape[-1]
                lat = lat + ad.upsample_nearest(top, factor)
            outs[i] = top = lat
        return outs


class ScaleHead(Module):
    def __init__(self, channels, num_classes, rng=None, dtype=np.float64, prior=0.01):
        self.conv = Conv2d(channels, channels, 3, 1, 1, rng=rng, dtype=dtype)
        self.pred = Conv2d(channels, num_classes + 5, 1, rng=rng, dtype=dtype)
        self.pred.b.data[num_classes] = -math.log((1 - prior) / prior)
        self.pred.b.data[:num_classes] = -math.log((1 - prior) / prior)

    def forward(self, x):
        return self.pred(ad.gelu(self.conv(x)))


class DetectionModel(Module):
    """Backbone + neck + per-scale heads. Predictions: [N, K+5, H_s, W_s] per scale,
    channels = (class logits..., objectness, dx, dy, log w, log h)."""

    def __init__(self, backbone_cfg=None, head_cfg=None, neck_channels=None):
        self.backbone = HsVT(backbone_cfg or HsVTConfig())
        cfg = self.backbone.cfg
        self.head_cfg = head_cfg or HeadConfig()
        rng = np.random.default_rng(cfg.seed + 1)
        dtype = cfg.np_dtype
        exposed = cfg.channels[1:4]
        neck_channels = neck_channels or cfg.channels[1]
        spiking = [st.emits_spikes for st in self.backbone.stages[1:4]]
        self.neck = Neck(exposed, neck_channels, spiking, rng=rng, dtype=dtype)
        self.head = [ScaleHead(neck_channels, self.head_cfg.num_classes, rng=rng, dtype=dtype)
                     for _ in exposed]
        self.assign_paths()

    def forward(self, x, states=None):
        outs, states = self.backbone(x, states)
        feats = self.neck(outs[1:4])
        return [h(f) for h, f in zip(self.head, feats)], states

    def run_sequence(self, frames, states=None):
        """frames: [windows, N, C, H, W] -> (per-window predictions, states)."""
        preds = []
        for window in frames:
            p, states = self(Tensor(window, dtype=self.backbone.cfg.np_dtype), states)
            preds.append(p)
        return preds, states


def head_forward(model, features):
    """Apply neck and heads to exposed backbone features (strides 8, 16, 32)."""
    return [h(f) for h, f in zip(model.head, model.neck(features))]


def decode(preds, cfg):
    """Raw per-scale predictions (numpy or Tensor) -> list (per image) of Detections."""
    arrs = [p.data if isinstance(p, Tensor) else np.asarray(p) for p in preds]
    K = cfg.num_classes
    n = arrs[0].shape[0]
    out = []
    for b in range(n):
        dets = []
        for arr, s in zip(arrs, cfg.strides):
            a = arr[b]
            obj = 1.0 / (1.0 + np.exp(-a[K]))
            cls_prob = 1.0 / (1.0 + np.exp(-a[:K]))
            cls = cls_prob.argmax(axis=0)
            score = obj * np.take_along_axis(cls_prob, cls[None], axis=0)[0]
            ys, xs = np.nonzero(score > cfg.score_threshold)
            for y, x in zip(ys.tolist(), xs.tolist()):
                cx = (x + 0.5 + a[K + 1, y, x]) * s
                cy = (y + 0.5 + a[K + 2, y, x]) * s
                w = math.exp(float(np.clip(a[K + 3, y, x], -LOG_SIZE_CLIP, LOG_SIZE_CLIP))) * s
                h = math.exp(float(np.clip(a[K + 4, y, x], -LOG_SIZE_CLIP, LOG_SIZE_CLIP))) * s
                dets.append(Detection((float(cx - w / 2), float(cy - h / 2), w, h),
                                      int(cls[y, x]), float(score[y, x])))
        out.append(nms(dets, cfg.nms_iou))
    return out


# -- loss ------------------------------------------------------------------------------


def assign_scale(w, h, strides):
    size = max(w, h)
    return int(np.argmin([abs(math.log2(size / (REF_CELLS * s))) for s in strides]))


def detection_loss(preds, targets, cfg):
    """Objectness BCE over all cells + class BCE and weighted (1 - IoU) over positive cells.

    ``targets``: per image, a list of boxes ((x, y, w, h, class) tuples, BoxRecords or
    Detections). Returns a dict of scalar Tensors with key ``"total"``.
    """
    K = cfg.num_classes
    n = preds[0].shape[0]
    positives = [[] for _ in preds]  # per scale: (img, gy, gx, box, cls)
    for b, img in enumerate(targets):
        for item in img:
            (x, y, w, h), c = _box(item)
            si = assign_scale(w, h, cfg.strides[: len(preds)])
            s = cfg.strides[si]
            hs, ws = preds[si].shape[2:]
            gx = min(max(int((x + w / 2) // s), 0), ws - 1)
            gy = min(max(int((y + h / 2) // s), 0), hs - 1)
            positives[si] = [p for p in positives[si] if p[:3] != (b, gy, gx)]
            positives[si].append((b, gy, gx, (x, y, w, h), int(c)))
    num_pos = sum(len(p) for p in positives)
    norm = 1.0 / max(1, num_pos)
    obj_terms, cls_terms, box_terms = [], [], []
    for si, (pred, pos) in enumerate(zip(preds, positives)):
        s = cfg.strides[si]
        target = np.zeros((n,) + pred.shape[2:], dtype=pred.dtype)
        for b, gy, gx, _, _ in pos:
            target[b, gy, gx] = 1.0
        obj_terms.append(ad.tsum(ad.bce_with_logits(pred[:, K], target)))
        if not pos:
            continue
        bi, gy, gx = (np.array(v) for v in zip(*[p[:3] for p in pos]))
        cells = ad.transpose(pred, (0, 2, 3, 1))[bi, gy, gx]  # [P, K+5]
        onehot = np.zeros((len(pos), K), dtype=pred.dtype)
        onehot[np.arange(len(pos)), [p[4] for p in pos]] = 1.0
        cls_terms.append(ad.tsum(ad.bce_with_logits(cells[:, :K], onehot)))
        gt = np.array([p[3] for p in pos], dtype=pred.dtype)
        cx = (cells[:, K + 1] + (gx + 0.5)) * s
        cy = (cells[:, K + 2] + (gy + 0.5)) * s
        w = ad.exp(ad.clip(cells[:, K + 3], -LOG_SIZE_CLIP, LOG_SIZE_CLIP)) * s
        h = ad.exp(ad.clip(cells[:, K + 4], -LOG_SIZE_CLIP, LOG_SIZE_CLIP)) * s
        box_terms.append(ad.tsum(1.0 - box_iou(cx, cy, w, h, gt)))
    zero = Tensor(np.zeros((), dtype=preds[0].dtype))
    obj = sum(obj_terms[1:], obj_terms[0]) * norm
    cls = (sum(cls_terms[1:], cls_terms[0]) * norm) if cls_terms else zero
    box = (sum(box_terms[1:], box_terms[0]) * norm) if box_terms else zero
    return {"total": obj + cls + box * cfg.box_weight, "obj": obj, "cls": cls, "iou": box, "num_pos": num_pos}


def box_iou(cx, cy, w, h, gt):
    """Differentiable IoU of predicted centre/size tensors against constant xywh boxes."""
    gx1, gy1 = gt[:, 0], gt[:, 1]
    gx2, gy2 = gt[:, 0] + gt[:, 2], gt[:, 1] + gt[:, 3]
    px1, px2 = cx - w * 0.5, cx + w * 0.5
    py1, py2 = cy - h * 0.5, cy + h * 0.5
    iw = ad.relu(ad.minimum(px2, gx2) - ad.maximum(px1, gx1))
    ih = ad.relu(ad.minimum(py2, gy2) - ad.maximum(py1, gy1))
    inter = iw * ih
    union = w * h + gt[:, 2] * gt[:, 3] - inter
    return inter / union
