import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hsvt import autodiff as ad
from hsvt.autodiff import Tensor
from hsvt.backbone import HsVTConfig
from hsvt.detect import (Detection, DetectionModel, HeadConfig, assign_scale, decode, detection_loss,
                         head_forward, iou, map_50, map_50_95, nms)

# -- reference evaluator (exact rationals, O(n^2) everywhere) ----------------------------


def ref_iou(a, b):
    ax1, ay1, ax2, ay2 = a[0], a[1], a[0] + a[2], a[1] + a[3]
    bx1, by1, bx2, by2 = b[0], b[1], b[0] + b[2], b[1] + b[3]
    iw = max(0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0, min(ay2, by2) - max(ay1, by1))
    inter = Fraction(iw) * Fraction(ih)
    union = Fraction(a[2]) * Fraction(a[3]) + Fraction(b[2]) * Fraction(b[3]) - inter
    return inter / union


def ref_ap(dets, gts, cls, thr):
    gt = [[g[:4] for g in img if g[4] == cls] for img in gts]
    npos = sum(map(len, gt))
    if npos == 0:
        return None
    flat = [(d.score, order, i, d.box) for order, (i, d) in
            enumerate((i, d) for i, img in enumerate(dets) for d in img) if d.class_id == cls]
    # descending score, ties by original order
    flat.sort(key=lambda e: (-e[0], e[1]))
    taken = [[False] * len(g) for g in gt]
    tps = []
    for _, _, i, box in flat:
        ious = [ref_iou(box, g) for g in gt[i]]
        cands = [j for j in range(len(gt[i])) if not taken[i][j] and ious[j] >= thr]
        if cands:
            best = max(ious[j] for j in cands)
            j = min(j for j in cands if ious[j] == best)
            taken[i][j] = True
            tps.append(1)
        else:
            tps.append(0)
    prec = [Fraction(sum(tps[:k + 1]), k + 1) for k in range(len(tps))]
    rec = [Fraction(sum(tps[:k + 1]), npos) for k in range(len(tps))]
    total = Fraction(0)
    for i in range(101):
        r = Fraction(i, 100)
        ok = [prec[k] for k in range(len(tps)) if rec[k] >= r]
        total += max(ok) if ok else 0
    return total / 101


def ref_map(dets, gts, thresholds):
    classes = sorted({g[4] for img in gts for g in img})
    aps = [ref_ap(dets, gts, c, t) for c in classes for t in thresholds]
    aps = [a for a in aps if a is not None]
    return float(sum(aps, Fraction(0)) / len(aps)) if aps else 0.0


THRESHOLDS_50_95 = [Fraction(50 + 5 * i, 100) for i in range(10)]


def random_instance(rng):
    n_img = int(rng.integers(1, 4))
    total = int(rng.integers(1, 11))
    gts, dets = [[] for _ in range(n_img)], [[] for _ in range(n_img)]
    for _ in range(total):
        i = int(rng.integers(n_img))
        box = (int(rng.integers(0, 16)), int(rng.integers(0, 16)), int(rng.integers(1, 9)), int(rng.integers(1, 9)))
        c = int(rng.integers(2))
        if rng.random() < 0.45 or not any(gts):
            gts[i].append(box + (c,))
        else:
            src = [g for img in gts for g in img]
            g = src[int(rng.integers(len(src)))]
            jit = tuple(int(v) for v in rng.integers(-1, 2, 4))
            b = (g[0] + jit[0], g[1] + jit[1], max(1, g[2] + jit[2]), max(1, g[3] + jit[3]))
            score = float(rng.choice([0.2, 0.5, 0.9])) if rng.random() < 0.3 else float(rng.random())
            dets[i].append(Detection(b, c if rng.random() < 0.8 else 1 - c, score))
    return dets, gts


def test_map_matches_brute_force_reference_1000_instances():
    rng = np.random.default_rng(0)
    mismatches = 0
    for _ in range(1000):
        dets, gts = random_instance(rng)
        if map_50_95(dets, gts) != ref_map(dets, gts, THRESHOLDS_50_95):
            mismatches += 1
        if map_50(dets, gts) != ref_map(dets, gts, [Fraction(1, 2)]):
            mismatches += 1
    assert mismatches == 0


def test_map_trivial_cases():
    gts = [[(0, 0, 10, 10, 0), (20, 20, 5, 8, 1)], [(3, 4, 6, 6, 0)]]
    perfect = [[Detection(g[:4], g[4], 1.0) for g in img] for img in gts]
    assert map_50_95(perfect, gts) == 1.0
    assert map_50_95([[], []], gts) == 0.0
    assert map_50_95([[]], [[]]) == 0.0


# -- IoU & NMS ---------------------------------------------------------------------------


def test_iou_unit_cases():
    assert iou((0, 0, 2, 2), (0, 0, 2, 2)) == pytest.approx(1.0, abs=1e-12)
    assert iou((0, 0, 2, 2), (5, 5, 2, 2)) == 0.0
    assert iou((0, 0, 2, 2), (1, 1, 2, 2)) == pytest.approx(1 / 7, abs=1e-12)


def test_iou_one_seventh_matches_raster_count():
    grid = np.zeros((4, 4), dtype=int)
    grid[0:2, 0:2] += 1
    grid[1:3, 1:3] += 2
    inter, union = (grid == 3).sum(), (grid > 0).sum()
    assert iou((0, 0, 2, 2), (1, 1, 2, 2)) == pytest.approx(inter / union, abs=1e-12)


box_st = st.tuples(st.floats(-50, 50), st.floats(-50, 50), st.floats(0.1, 40), st.floats(0.1, 40))


@given(box_st, box_st)
def test_iou_properties(a, b):
    v = iou(a, b)
    assert 0.0 <= v <= 1.0 + 1e-12
    assert v == pytest.approx(iou(b, a), abs=1e-12)
    assert iou(a, a) == pytest.approx(1.0)


def ref_nms(dets, thr):
    remaining = list(dets)
    kept = []
    while remaining:
        best = max(remaining, key=lambda d: d.score)
        kept.append(best)
        remaining = [d for d in remaining if d is not best and
                     not (d.class_id == best.class_id and iou(d.box, best.box) > thr)]
    return kept


def test_nms_examples_and_oracle():
    a = Detection((0, 0, 10, 10), 0, 0.9)
    assert nms([a, Detection((0, 0, 10, 10), 0, 0.8)], 0.5) == [a]
    rng = np.random.default_rng(1)
    for _ in range(200):
        dets = [Detection((float(rng.uniform(0, 30)), float(rng.uniform(0, 30)), float(rng.uniform(2, 12)),
                           float(rng.uniform(2, 12))), int(rng.integers(2)), float(rng.random()))
                for _ in range(20)]
        got = nms(dets, 0.5)
        assert set(map(id, got)) == set(map(id, ref_nms(dets, 0.5)))
        for i, d in enumerate(got):
            for e in got[i + 1:]:
                assert d.class_id != e.class_id or iou(d.box, e.box) <= 0.5


# -- head, decode, loss ------------------------------------------------------------------


def tiny_model(**kw):
    cfg = HsVTConfig(channels=(8, 16, 32, 64), t_bins=2, window_size=4, grid_size=4, head_dim=8, **kw)
    return DetectionModel(cfg, HeadConfig(num_classes=2))


def test_head_output_shapes():
    model = tiny_model()
    preds, _ = model(Tensor(np.zeros((2, 4, 64, 96))))
    assert [p.shape for p in preds] == [(2, 7, 8, 12), (2, 7, 4, 6), (2, 7, 2, 3)]
    feats = [Tensor(np.zeros((1, c, 4, 4))) for c in (16, 32, 64)]
    assert [p.shape[1] for p in head_forward(model, [feats[0], feats[1][..., :2, :2], feats[2][..., :1, :1]])] == [7, 7, 7]


def test_zero_head_gives_half_probabilities():
    model = tiny_model()
    for p in model.head[0].parameters():
        p.data[...] = 0.0
    preds, _ = model(Tensor(np.random.default_rng(0).normal(size=(1, 4, 64, 64))))
    probs = 1 / (1 + np.exp(-preds[0].data[:, :3]))
    np.testing.assert_array_equal(probs, 0.5)


def test_gradient_reaches_backbone():
    model = tiny_model()
    preds, _ = model(Tensor(np.random.default_rng(0).normal(size=(1, 4, 64, 64))))
    loss = detection_loss(preds, [[(10, 12, 20, 18, 1)]], model.head_cfg)
    ad.backward(loss["total"])
    g = model.backbone.stages[0].down.W.grad
    assert loss["total"].item() > 0 and np.abs(g).sum() > 0


def _pred_maps(cfg, sizes, n=1):
    K = cfg.num_classes
    return [np.full((n, K + 5, h, w), -20.0) for h, w in sizes]


def test_decode_below_threshold_empty():
    cfg = HeadConfig(num_classes=1)
    assert decode(_pred_maps(cfg, [(4, 4), (2, 2), (1, 1)]), cfg) == [[]]


def test_decode_box_formula():
    cfg = HeadConfig(num_classes=1)
    maps = _pred_maps(cfg, [(4, 4), (2, 2), (1, 1)])
    a = maps[1][0]
    a[0, 1, 0] = a[1, 1, 0] = 5.0  # class, objectness
    a[2, 1, 0], a[3, 1, 0] = 0.25, -0.5  # dx, dy
    a[4, 1, 0], a[5, 1, 0] = math.log(2.0), 0.0  # log w, log h
    (det,), = decode(maps, cfg)
    s = 16
    cx, cy, w, h = (0 + 0.5 + 0.25) * s, (1 + 0.5 - 0.5) * s, 2 * s, 1 * s
    assert det.box == pytest.approx((cx - w / 2, cy - h / 2, w, h))
    assert det.score == pytest.approx((1 / (1 + math.exp(-5))) ** 2)


def test_decode_suppresses_duplicates():
    cfg = HeadConfig(num_classes=1)
    maps = _pred_maps(cfg, [(4, 4), (2, 2), (1, 1)])
    for x in (0, 1):
        maps[0][0, :2, 0, x] = 5.0 - x
        maps[0][0, 4, 0, x] = 1.5  # wide boxes overlap strongly
        maps[0][0, 2, 0, x] = -0.5 * x
    assert len(decode(maps, cfg)[0]) == 1


def test_scale_assignment():
    strides = (8, 16, 32)
    assert assign_scale(32, 20, strides) == 0
    assert assign_scale(64, 64, strides) == 1
    assert assign_scale(200, 90, strides) == 2


def _perfect_preds(cfg, boxes, sizes):
    maps = _pred_maps(cfg, sizes)
    for (x, y, w, h, c) in boxes:
        si = assign_scale(w, h, cfg.strides)
        s = cfg.strides[si]
        gx, gy = int((x + w / 2) // s), int((y + h / 2) // s)
        a = maps[si][0]
        a[c, gy, gx] = 20.0
        a[cfg.num_classes, gy, gx] = 20.0
        a[cfg.num_classes + 1, gy, gx] = (x + w / 2) / s - gx - 0.5
        a[cfg.num_classes + 2, gy, gx] = (y + h / 2) / s - gy - 0.5
        a[cfg.num_classes + 3, gy, gx] = math.log(w / s)
        a[cfg.num_classes + 4, gy, gx] = math.log(h / s)
    return [Tensor(m) for m in maps]


def test_loss_no_labels_objectness_only():
    cfg = HeadConfig(num_classes=2)
    preds = [Tensor(np.random.default_rng(i).normal(size=(1, 7, 4, 4))) for i in range(3)]
    out = detection_loss(preds, [[]], cfg)
    assert out["total"].item() >= 0 and out["cls"].item() == 0 and out["iou"].item() == 0
    assert out["total"].item() == pytest.approx(out["obj"].item())


def test_loss_perfect_prediction_has_zero_iou_term():
    cfg = HeadConfig(num_classes=2)
    boxes = [(10, 12, 20, 18, 1), (40, 8, 60, 50, 0)]
    preds = _perfect_preds(cfg, boxes, [(16, 16), (8, 8), (4, 4)])
    out = detection_loss(preds, [boxes], cfg)
    assert out["num_pos"] == 2
    assert out["iou"].item() == pytest.approx(0.0, abs=1e-12)
    (dets,) = decode([p.data for p in preds], cfg)
    assert sorted((d.class_id, tuple(np.round(d.box, 6))) for d in dets) == \
        sorted((c, (x, y, w, h)) for x, y, w, h, c in boxes)


def test_loss_grad_check_on_head_predictions():
    cfg = HeadConfig(num_classes=1)
    rng = np.random.default_rng(3)
    preds = [Tensor(rng.normal(size=(1, 6, 2, 2)) * 0.5, requires_grad=True) for _ in range(3)]
    # keep the positive's predicted box overlapping its target
    for p in preds:
        p.data[0, 1:, ...] *= 0.1
    targets = [[(4, 5, 9, 7, 0)]]
    fn = lambda *ps: detection_loss(list(ps), targets, cfg)["total"]
    assert ad.grad_check(fn, preds) < 1e-6
