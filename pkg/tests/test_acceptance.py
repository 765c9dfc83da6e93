"""Acceptance criteria, one PASS/FAIL line each at the stated tolerance.

Every criterion is checked against an independent oracle or an exact
property. Lines are printed as they are produced and repeated in the
terminal summary under "acceptance criteria".
"""
import math
import time

import numpy as np
import pytest

from densesph import attention as A
from densesph import boxes as B
from densesph import detector as D
from densesph import metrics as M
from densesph import tensor as T
from densesph.pipeline import synthetic_run


def report(log, number, title, ok, detail, seconds=None, budget=None):
    timing = ""
    if seconds is not None:
        timing = f" [{seconds:.2f} s" + (f" / budget {budget:g} s]" if budget else "]")
    line = f"{'PASS' if ok else 'FAIL'} {number}: {title} -- {detail}{timing}"
    log.append(line)
    print(line)
    return line


def random_box(rng, lo=1.0, hi=80.0):
    return B.Box(*rng.uniform(0, 300, 2), *rng.uniform(lo, hi, 2))


# ---------------------------------------------------------------- 1. CIoU

STATED_DISJOINT = 1 + 100 / 121  # value listed in the acceptance text
DISJOINT_TOL = 1e-6


@pytest.fixture(scope="module")
def ciou_check(acceptance_log):
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    zero_ok = all(B.ciou_loss(b, b) == 0.0 for b in (random_box(rng) for _ in range(1000)))
    worst = 0.0
    grad_ok = True
    for _ in range(1000):
        a, b = random_box(rng), random_box(rng)
        g = B.ciou_gradient(a, b)
        n = T.numeric_gradient(lambda v: B.ciou_loss(B.Box(*v), b), np.array(a.as_tuple()), 1e-6)
        excess = np.abs(g - n) - (1e-3 * np.abs(n) + 1e-6)
        worst = max(worst, float(np.max(np.abs(g - n) / np.maximum(np.abs(n), 1e-6))))
        grad_ok &= bool(np.all(excess <= 0))
    disjoint = B.ciou_loss(B.Box(0.5, 0.5, 1, 1), B.Box(10.5, 0.5, 1, 1))
    seconds = time.perf_counter() - t0
    disjoint_ok = abs(disjoint - STATED_DISJOINT) <= DISJOINT_TOL
    ok = zero_ok and grad_ok and disjoint_ok and seconds < 5
    report(acceptance_log, 1, "CIoU correctness", ok,
           f"L(a,a)=0 on 1000 boxes: {zero_ok}; gradient vs central differences (rtol 1e-3, atol 1e-6) "
           f"on 1000 pairs: {grad_ok} (worst rel {worst:.1e}); disjoint unit squares = {disjoint:.9f}, "
           f"stated 1+100/121 = {STATED_DISJOINT:.9f} (tol 1e-6): {disjoint_ok}; "
           f"exact value 1+100/122 = {1 + 100 / 122:.9f} (enclosing diagonal 11^2 + 1^2)",
           seconds, 5)
    return {"zero": zero_ok, "grad": grad_ok, "disjoint": disjoint, "seconds": seconds}


def test_criterion_1_zero_and_gradient(ciou_check):
    assert ciou_check["zero"] and ciou_check["grad"]
    assert ciou_check["seconds"] < 5


def test_criterion_1_disjoint_squares_exact(ciou_check):
    assert ciou_check["disjoint"] == pytest.approx(1 + 100 / 122, abs=1e-12)


@pytest.mark.xfail(strict=True, reason="stated value uses a squared enclosing diagonal of 121; "
                                       "an 11 x 1 enclosing box has 11^2 + 1^2 = 122")
def test_criterion_1_disjoint_squares_stated(ciou_check):
    assert abs(ciou_check["disjoint"] - STATED_DISJOINT) <= DISJOINT_TOL


# ---------------------------------------------------------------- 2. descent

def test_criterion_2_descent(overfit_rectangle, acceptance_log):
    history = overfit_rectangle["history"]
    seconds = overfit_rectangle["seconds"]
    final = history[-1]
    steps = len(history) - 1
    monotone = all(b <= a for a, b in zip(history[10:], history[11:]))
    ok = final < 0.01 and steps <= 200 and monotone and seconds < 30
    report(acceptance_log, 2, "loss-descent convergence", ok,
           f"coordinate loss {history[0]:.4f} -> {final:.2e} after {steps} steps (< 0.01 within 200): "
           f"{final < 0.01}; monotone after step 10: {monotone}", seconds, 30)
    assert ok


# ---------------------------------------------------------------- 3. NMS

def oracle_iou(a, b):
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union if union > 0 else 0.0


def oracle_nms(dets, threshold):
    """Definition: a detection survives iff no surviving higher-ranked detection
    of its class overlaps it by more than ``threshold``."""
    rank = sorted(range(len(dets)), key=lambda i: (-dets[i].score, dets[i].class_id, i))
    position = {i: p for p, i in enumerate(rank)}
    memo = {}

    def survives(i):
        if i not in memo:
            memo[i] = all(not survives(j) or oracle_iou(dets[i].box.corners, dets[j].box.corners) <= threshold
                          for j in range(len(dets))
                          if dets[j].class_id == dets[i].class_id and position[j] < position[i])
        return memo[i]

    return {i for i in range(len(dets)) if survives(i)}


def test_criterion_3_nms(acceptance_log):
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    mismatches = 0
    for k in range(200):
        n = int(rng.integers(0, 51))
        dets = [B.Detection(B.Box(*rng.uniform(0, 100, 2), *rng.uniform(5, 40, 2)), int(rng.integers(0, 3)),
                            float(rng.random())) for _ in range(n)]
        threshold = (0.3, 0.5, 0.7)[k % 3]
        ids = {id(d): i for i, d in enumerate(dets)}
        got = {ids[id(d)] for d in B.nms(dets, threshold)}
        mismatches += got != oracle_nms(dets, threshold)
    seconds = time.perf_counter() - t0
    ok = mismatches == 0 and seconds < 10
    report(acceptance_log, 3, "NMS oracle equivalence", ok,
           f"exact set equality on 200 instances (<= 50 detections, 3 classes, thresholds 0.3/0.5/0.7): "
           f"{200 - mismatches}/200", seconds, 10)
    assert ok


# ---------------------------------------------------------------- 4. AP

def oracle_ap(dets, gts, threshold=0.5):
    """Independent per-class AP: greedy matching plus the all-point envelope integral."""
    flat = []
    n_gt = sum(len(v) for v in gts.values())
    for image_id, ds in dets.items():
        g = gts.get(image_id, [])
        taken = [False] * len(g)
        for d in sorted(ds, key=lambda d: -d.score):
            best, best_j = threshold, None
            for j, gt in enumerate(g):
                if taken[j] or gt.class_id != d.class_id:
                    continue
                v = oracle_iou(d.box.corners, gt.box.corners)
                if v >= best and (best_j is None or v > best):
                    best, best_j = v, j
            if best_j is not None:
                taken[best_j] = True
            flat.append((d.score, best_j is not None))
    if n_gt == 0:
        return 0.0
    flat.sort(key=lambda x: -x[0])
    tp = fp = 0
    rec, prec = [0.0], [0.0]
    for _, hit in flat:
        tp += hit
        fp += not hit
        rec.append(tp / n_gt)
        prec.append(tp / (tp + fp))
    rec.append(1.0)
    prec.append(0.0)
    for i in range(len(prec) - 2, -1, -1):
        prec[i] = max(prec[i], prec[i + 1])
    return sum((rec[i + 1] - rec[i]) * prec[i + 1] for i in range(len(rec) - 1))


def random_instance(rng):
    gts, dets = {}, {}
    for k in range(int(rng.integers(1, 5))):
        g = [M.GroundTruth(B.Box(*rng.uniform(20, 180, 2), *rng.uniform(8, 40, 2)), 0)
             for _ in range(int(rng.integers(0, 6)))]
        d = []
        for gt in g:
            if rng.random() < 0.8:
                b = gt.box
                d.append(B.Detection(B.Box(b.cx + rng.normal(0, 4), b.cy + rng.normal(0, 4), b.w, b.h), 0,
                                     float(rng.random())))
        d += [B.Detection(B.Box(*rng.uniform(20, 180, 2), *rng.uniform(8, 40, 2)), 0, float(rng.random()))
              for _ in range(int(rng.integers(0, 4)))]
        gts[f"im{k}"], dets[f"im{k}"] = g, d
    return dets, gts


def test_criterion_4_average_precision(acceptance_log):
    rng = np.random.default_rng(4)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(200):
        dets, gts = random_instance(rng)
        worst = max(worst, abs(M.average_precision(dets, gts)[1] - oracle_ap(dets, gts)))
    perfect_gts = {"a": [M.GroundTruth(B.Box(50, 50, 20, 30), 0), M.GroundTruth(B.Box(120, 90, 40, 10), 1)]}
    perfect_dets = {"a": [B.Detection(g.box, g.class_id, 1.0) for g in perfect_gts["a"]]}
    perfect = M.ap_sweep(perfect_dets, perfect_gts)["AP50:95"]
    invariant = 0
    for _ in range(100):
        dets, gts = random_instance(rng)
        squashed = {k: [B.Detection(d.box, d.class_id, 1.0 / (1.0 + math.exp(-3.0 * d.score))) for d in v]
                    for k, v in dets.items()}
        invariant += M.average_precision(dets, gts)[1] == M.average_precision(squashed, gts)[1]
    seconds = time.perf_counter() - t0
    ok = worst <= 1e-9 and perfect == 1.0 and invariant == 100
    report(acceptance_log, 4, "AP/mAP oracle equivalence", ok,
           f"max |AP - envelope oracle| over 200 instances = {worst:.1e} (tol 1e-9); perfect AP50:95 = "
           f"{perfect!r} (exact 1); monotone score transform leaves AP unchanged: {invariant}/100", seconds)
    assert ok


# ---------------------------------------------------------------- 5. attention

def test_criterion_5_attention(acceptance_log):
    rng = np.random.default_rng(5)
    t0 = time.perf_counter()
    worst_row = 0.0
    masked_weight = 0.0
    for h, w, m, heads in [(8, 8, 4, 2), (13, 13, 4, 4), (10, 7, 7, 1), (9, 11, 2, 2), (5, 6, 4, 2)]:
        blk = A.STRBlockPair(8, m, heads, 2)
        blk.init_weights(int(rng.integers(1 << 30)), 0.5)
        x = rng.standard_normal((h, w, 8)).astype(np.float32)
        for params, shift in ((blk.blk0.params, 0), (blk.blk1.params, m // 2)):
            _, attn = A.window_attention(x, params, m, heads, shift=shift, return_attention=True)
            worst_row = max(worst_row, float(np.max(np.abs(attn.sum(-1) - 1.0))))
            if shift:
                blocked = np.isinf(A.attention_mask(h, w, m, shift))[:, None]
                masked_weight = max(masked_weight, float(np.max(np.where(blocked, attn, 0.0))))
    roundtrips = 0
    for _ in range(100):
        h, w = int(rng.integers(1, 33)), int(rng.integers(1, 33))
        m = int(rng.choice([2, 4, 7]))
        x = rng.standard_normal((h, w, int(rng.integers(1, 5)))).astype(np.float32)
        win, grid = A.window_partition(x, m)
        back = A.window_reverse(win, grid)
        roundtrips += back.shape == x.shape and back.tobytes() == x.tobytes()
    zero = A.STRBlockPair(16, 4, 4, 4)
    for _, v in zero.named_parameters():
        v[...] = 0
    feat = rng.standard_normal((16, 11, 9)).astype(np.float32)
    out = zero(feat)
    identity = out.dtype == feat.dtype and out.tobytes() == feat.tobytes()
    seconds = time.perf_counter() - t0
    ok = worst_row <= 1e-6 and roundtrips == 100 and identity and masked_weight == 0.0
    report(acceptance_log, 5, "attention invariants", ok,
           f"max |row sum - 1| = {worst_row:.1e} (tol 1e-6); partition/reverse bitwise roundtrips {roundtrips}/100; "
           f"zero-weight STR pair bitwise identity: {identity}; max weight on masked SW-MSA entries = "
           f"{masked_weight!r} (exact 0)", seconds)
    assert ok


# ---------------------------------------------------------------- 6. complexity

def test_criterion_6_complexity(acceptance_log):
    t0 = time.perf_counter()
    exact = A.complexity(8, 8, 16, 4)
    exact_ok = (exact["msa"], exact["w_msa"]) == (196608, 98304)
    grid = [(h, w, c, m) for h in (1, 2, 3, 5, 8, 13, 26, 52, 104, 128) for w in (1, 4, 7, 13, 32, 64, 104)
            for c in (8, 64, 256) for m in (1, 2, 4, 7, 8)]
    grid = grid[:1000]
    bound_ok = all(A.complexity(*p)["w_msa"] <= A.complexity(*p)["msa"] for p in grid if p[3] ** 2 <= p[0] * p[1])
    checked = sum(p[3] ** 2 <= p[0] * p[1] for p in grid)
    linear_ok = True
    for h, w, c, m in grid:
        base = A.complexity(h, w, c, m)["w_msa"] - 4 * h * w * c * c
        for k in (2, 3):
            scaled = A.complexity(k * h, w, c, m)["w_msa"] - 4 * k * h * w * c * c
            linear_ok &= scaled == k * base
    seconds = time.perf_counter() - t0
    ok = exact_ok and bound_ok and linear_ok and len(grid) == 1000
    report(acceptance_log, 6, "complexity model", ok,
           f"complexity(8,8,16,4) = ({exact['msa']}, {exact['w_msa']}) exact: {exact_ok}; "
           f"W-MSA <= MSA on {checked} grid points with m^2 <= HW (of {len(grid)}): {bound_ok}; "
           f"non-shared W-MSA term exactly linear in HW: {linear_ok}", seconds)
    assert ok


# ---------------------------------------------------------------- 7. shapes

def test_criterion_7_shapes(random_detector, default_config, acceptance_log):
    cfg = default_config
    rng = np.random.default_rng(7)
    t0 = time.perf_counter()
    outs = random_detector(rng.uniform(0, 1, (3, 416, 416)).astype(np.float32))
    shapes = [o.shape for o in outs]
    channels = cfg.num_anchors * (5 + 8)
    shape_ok = shapes == [(channels, s, s) for s in (104, 52, 26, 13)]
    worst = 0.0
    for _ in range(500):
        w, h = rng.uniform(4, 300, 2)
        cx, cy = rng.uniform(w / 2, 416 - w / 2), rng.uniform(h / 2, 416 - h / 2)
        box = B.Box(cx, cy, w, h)
        [a] = D.assign_targets([M.GroundTruth(box, 0)], cfg)
        gx, gy, t = D.encode(box, a.scale, a.anchor, cfg)
        back = D.decode_cell(t, gx, gy, a.scale, a.anchor, cfg)
        worst = max(worst, float(np.max(np.abs(np.array(back.as_tuple()) - box.as_tuple()))))
    seconds = time.perf_counter() - t0
    ok = shape_ok and worst <= 1e-4
    report(acceptance_log, 7, "shape contract", ok,
           f"heads {' / '.join('x'.join(map(str, s)) for s in shapes)} (expect {channels} x 104/52/26/13): "
           f"{shape_ok}; decode(encode) max error on 500 boxes = {worst:.1e} (tol 1e-4)", seconds)
    assert ok


# ---------------------------------------------------------------- 8. CBAM

def test_criterion_8_cbam(acceptance_log):
    rng = np.random.default_rng(8)
    t0 = time.perf_counter()
    bounded = 0
    for _ in range(100):
        c = int(rng.choice([16, 32]))
        r = int(rng.choice([4, 8, 16]))
        feat = (rng.standard_normal((c, int(rng.integers(1, 12)), int(rng.integers(1, 12)))) * 3).astype(np.float32)
        out = A.cbam(feat, rng.standard_normal((c // r, c)), rng.standard_normal((c, c // r)),
                     rng.standard_normal((1, 2, 7, 7)).astype(np.float32))
        bounded += bool(np.all(np.abs(out) <= np.abs(feat)))
    feat = rng.standard_normal((32, 9, 9)).astype(np.float32)
    zero = A.cbam(feat, np.zeros((2, 32)), np.zeros((32, 2)), np.zeros((1, 2, 7, 7), np.float32))
    quarter = bool(np.array_equal(zero, np.float32(0.25) * feat))
    seconds = time.perf_counter() - t0
    ok = bounded == 100 and quarter
    report(acceptance_log, 8, "CBAM bound", ok,
           f"|out| <= |in| elementwise on {bounded}/100 random inputs and weights; zero-weight gates give "
           f"exactly 0.25 * input: {quarter}", seconds)
    assert ok


# ---------------------------------------------------------------- 9. pipeline

def test_criterion_9_pipeline(acceptance_log):
    timings, reports = [], []
    for _ in range(2):
        t0 = time.perf_counter()
        result = synthetic_run(200, seed=0)
        timings.append(time.perf_counter() - t0)
        reports.append((result.report.to_json(), result.report.to_text(),
                        {k: [(d.class_id, d.score, d.box.as_tuple()) for d in v]
                         for k, v in result.detections.items()}))
    identical = reports[0] == reports[1]
    n_det = sum(len(v) for v in result.detections.values())
    ok = identical and max(timings) < 120
    report(acceptance_log, 9, "end-to-end pipeline", ok,
           f"200 synthetic images, split {len(result.train_ids)}/{len(result.val_ids)}, {n_det} detections on "
           f"the validation split; two runs byte-identical: {identical} "
           f"(runs {timings[0]:.1f} s, {timings[1]:.1f} s)", max(timings), 120)
    assert ok


# ---------------------------------------------------------------- 10. assignment

def oracle_assignment(box, cfg):
    """Scan every (scale, anchor, cell); the cell must hold the center, the anchor
    maximizes centered IoU, and ties go to the earlier scale then anchor."""
    cx, cy = box.cx, box.cy
    best = None
    for s, (stride, anchors) in enumerate(zip(cfg.head_strides, cfg.head_anchors)):
        n = cfg.input_size // stride
        for a, (aw, ah) in enumerate(anchors):
            inter = min(box.w, aw) * min(box.h, ah)
            overlap = inter / (box.w * box.h + aw * ah - inter)
            for gy in range(n):
                y_in = gy * stride <= cy < (gy + 1) * stride or (gy == n - 1 and cy >= gy * stride)
                if not y_in:
                    continue
                for gx in range(n):
                    x_in = gx * stride <= cx < (gx + 1) * stride or (gx == n - 1 and cx >= gx * stride)
                    if x_in and (best is None or overlap > best[0]):
                        best = (overlap, s, a, gx, gy)
    return best[1:]


def test_criterion_10_assignment(default_config, acceptance_log):
    cfg = default_config
    rng = np.random.default_rng(10)
    t0 = time.perf_counter()
    equal = 0
    for _ in range(100):
        gts = []
        for _ in range(int(rng.integers(1, 6))):
            w, h = rng.uniform(2, 400, 2)
            gts.append(M.GroundTruth(B.Box(rng.uniform(w / 2, 416 - w / 2), rng.uniform(h / 2, 416 - h / 2), w, h),
                                     int(rng.integers(0, 8))))
        got = [(a.scale, a.anchor, a.gx, a.gy) for a in D.assign_targets(gts, cfg)]
        equal += got == [oracle_assignment(g.box, cfg) for g in gts]
    seconds = time.perf_counter() - t0
    ok = equal == 100
    report(acceptance_log, 10, "target assignment", ok,
           f"equal to the exhaustive (scale x anchor x cell) oracle on {equal}/100 ground-truth sets", seconds)
    assert ok
