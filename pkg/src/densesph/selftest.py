"""In-process invariant suites behind ``densesph selftest``.

Each suite raises ``AssertionError`` (or any exception) on failure; the
runner times every suite and keeps going so the summary lists them all.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import attention as A
from . import boxes as B
from . import data
from . import detector as D
from . import metrics as M
from . import tensor as T
from .blocks import WeightError


def _rand_box(rng, lo=1.0, hi=50.0):
    return B.Box(*rng.uniform(0, 100, 2), *rng.uniform(lo, hi, 2))


def suite_tensor():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((3, 9, 9)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    y = T.conv2d(x, w, None, 1, 1)
    ref = np.zeros((4, 9, 9))
    xp = np.pad(x.astype(np.float64), ((0, 0), (1, 1), (1, 1)))
    for o in range(4):
        for i in range(9):
            for j in range(9):
                ref[o, i, j] = np.sum(xp[:, i:i + 3, j:j + 3] * w[o])
    assert np.allclose(y, ref, atol=1e-4), "conv2d disagrees with direct summation"
    s = T.softmax_lastaxis(rng.standard_normal((5, 7)))
    assert np.allclose(s.sum(-1), 1.0, atol=1e-12), "softmax rows do not sum to 1"
    assert np.array_equal(T.dt1_loads(T.dt1_dumps(x)), x), "DT1 roundtrip changed the tensor"


def suite_boxes():
    rng = np.random.default_rng(2)
    for _ in range(50):
        a, b = _rand_box(rng), _rand_box(rng)
        assert B.ciou_loss(a, a) == 0.0
        g = B.ciou_gradient(a, b)
        n = T.numeric_gradient(lambda v: B.ciou_loss(B.Box(*v), b), np.array(a.as_tuple()), 1e-6)
        assert np.allclose(g, n, rtol=1e-3, atol=1e-5), "CIoU gradient disagrees with central differences"
    # unit squares 10 apart: enclosing box 11 x 1, squared diagonal 122
    disjoint = B.ciou_loss(B.Box(0.5, 0.5, 1, 1), B.Box(10.5, 0.5, 1, 1))
    assert abs(disjoint - (1 + 100 / 122)) < 1e-9, f"disjoint unit squares gave {disjoint}"


def suite_nms():
    rng = np.random.default_rng(3)
    for _ in range(20):
        dets = [B.Detection(_rand_box(rng, 5, 40), int(rng.integers(0, 3)), float(rng.random()))
                for _ in range(int(rng.integers(0, 30)))]
        kept = B.nms(dets, 0.5)
        for i, a in enumerate(kept):
            for b in kept[i + 1:]:
                assert a.class_id != b.class_id or B.iou(a.box, b.box) <= 0.5, "NMS kept an overlapping pair"


def suite_metrics():
    box = B.Box(50, 50, 20, 20)
    gts = {"a": [M.GroundTruth(box, 0)]}
    dets = {"a": [B.Detection(box, 0, 1.0)]}
    assert M.ap_sweep(dets, gts)["AP50:95"] == 1.0
    rep = M.evaluate(dets, gts)
    assert (rep.P, rep.R, rep.F1, rep.mAP) == (1.0, 1.0, 1.0, 1.0)
    assert M.evaluate({}, gts).mAP == 0.0


def suite_attention():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((10, 13, 8)).astype(np.float32)
    win, grid = A.window_partition(x, 4)
    assert np.array_equal(A.window_reverse(win, grid), x), "window roundtrip is not exact"
    blk = A.STRBlockPair(8, 4, 2, 2)
    blk.init_weights(0, 0.3)
    _, attn = A.sw_msa(x, blk.blk1.params, 4, 2, return_attention=True)
    assert np.allclose(attn.sum(-1), 1.0, atol=1e-6), "attention rows do not sum to 1"
    zero = A.STRBlockPair(8, 4, 2, 2)
    for name, v in zero.named_parameters():
        v[...] = 0
    assert np.array_equal(zero(T.hwc_to_chw(x)), T.hwc_to_chw(x)), "zero-weight STR pair is not identity"
    assert A.complexity(8, 8, 16, 4) == {"msa": 196608, "w_msa": 98304}


def suite_detector():
    cfg = D.DetectorConfig()
    det = D.build(cfg, seed=0, uniform_range=0.1)
    outs = det(np.zeros((3, 416, 416), dtype=np.float32))
    shapes = [o.shape for o in outs]
    assert shapes == [(39, s, s) for s in (104, 52, 26, 13)], f"unexpected head shapes {shapes}"
    assert all(np.isfinite(o).all() for o in outs)
    rng = np.random.default_rng(5)
    for _ in range(50):
        gt = M.GroundTruth(B.Box(*rng.uniform(60, 350, 2), *rng.uniform(8, 100, 2)), 0)
        a = D.assign_targets([gt], cfg)[0]
        gx, gy, t = D.encode(gt.box, a.scale, a.anchor, cfg)
        back = D.decode_cell(t, gx, gy, a.scale, a.anchor, cfg)
        assert np.allclose(back.as_tuple(), gt.box.as_tuple(), atol=1e-4), "decode(encode(box)) != box"


def make_suite_weights(path=None, cfg: D.DetectorConfig | None = None) -> Callable[[], None]:
    def suite_weights():
        if path is not None:
            D.load_weights(path, D.build(cfg or D.DetectorConfig(), seed=None))
            return
        small = D.DetectorConfig(adh=False, widths=(16, 32, 64, 128), csp_depths=(1, 1, 1, 1))
        det = D.build(small, seed=1)
        blob = D.dumps_weights(det.state_dict())
        other = D.build(small, seed=None)
        other.load_state_dict(D.loads_weights(blob))
        for (n, a), (_, b) in zip(det.named_parameters(), other.named_parameters()):
            assert np.array_equal(a, b), f"weight roundtrip changed {n}"
        bad = bytearray(blob)
        bad[-3] ^= 0xFF
        try:
            D.loads_weights(bytes(bad))
        except WeightError as exc:
            assert exc.section != "<header>", "corruption not attributed to a section"
        else:
            raise AssertionError("corrupted weight blob was accepted")
    return suite_weights


def suite_data():
    samples = data.synth_generate(5, seed=3)
    for s in samples:
        a = s.annotation
        assert data.parse_voc(data.serialize_voc(a)).objects == a.objects, "VOC roundtrip differs"
        for o in a.objects:
            assert 0 <= o.x1 < o.x2 <= a.width and 0 <= o.y1 < o.y2 <= a.height
    ids = [f"id{i}" for i in range(10)]
    tr, va = data.split(ids, 7)
    assert (len(tr), len(va)) == (8, 2) and sorted(tr + va) == ids
    img = np.zeros((300, 600, 3), dtype=np.float32)
    _, objs, lb = data.letterbox(img, [data.Annotation(0, 10, 20, 110, 220)], 416)
    assert lb.pad_y == 104 and lb.pad_x == 0
    back = lb.inverse_box(objs[0].box)
    assert np.allclose(back.corners, (10, 20, 110, 220), atol=1.0)


@dataclass
class SuiteResult:
    name: str
    ok: bool
    seconds: float
    message: str = ""


def run_all(weights_path=None, cfg: D.DetectorConfig | None = None) -> list[SuiteResult]:
    suites = [("tensor", suite_tensor), ("boxes", suite_boxes), ("nms", suite_nms), ("metrics", suite_metrics),
              ("attention", suite_attention), ("detector", suite_detector),
              ("weights", make_suite_weights(weights_path, cfg)), ("data", suite_data)]
    results = []
    for name, fn in suites:
        t0 = time.perf_counter()
        try:
            fn()
            results.append(SuiteResult(name, True, time.perf_counter() - t0))
        except Exception as exc:  # noqa: BLE001 - every failure is reported, not raised
            msg = f"{type(exc).__name__}: {exc}" if str(exc) else type(exc).__name__
            results.append(SuiteResult(name, False, time.perf_counter() - t0, msg))
    return results


def format_results(results: list[SuiteResult]) -> str:
    lines = []
    for r in results:
        status = "PASS" if r.ok else "FAIL"
        tail = f"  {r.message}" if r.message else ""
        lines.append(f"{status}  {r.name:<10} {r.seconds:7.3f} s{tail}")
    n_ok = sum(r.ok for r in results)
    lines.append(f"{n_ok}/{len(results)} suites passed in {sum(r.seconds for r in results):.2f} s")
    return "\n".join(lines) + "\n"

