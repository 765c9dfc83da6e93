import json

import numpy as np
import pytest

from densesph import cli, data
from densesph import detector as D
from densesph.attention import complexity
from densesph.boxes import Box, Detection, iou, read_detections, write_detections
from densesph.metrics import evaluate

from conftest import RECTANGLE_CLASS

GOLDEN_PARAMETERS = 4659288


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert cli.main(["synth", "--count", "6", "--seed", "2", "--out-dir", str(out)]) == 0
    return out


def run(argv, capsys):
    code = cli.main([str(a) for a in argv])
    captured = capsys.readouterr()
    return code, captured.out, captured.err


# ---------------------------------------------------------------- profile

def test_profile_default(tmp_path, capsys):
    code, out, _ = run(["profile", "--out-dir", tmp_path], capsys)
    assert code == 0
    assert "head grids: 104 / 52 / 26 / 13" in out
    assert f"total parameters: {GOLDEN_PARAMETERS}" in out
    doc = json.loads((tmp_path / "profile.json").read_text())
    assert doc["grids"] == [104, 52, 26, 13] and doc["total_parameters"] == GOLDEN_PARAMETERS
    top = {r["name"]: r for r in doc["layers"]}["head3.str"]
    expected = complexity(13, 13, 256, 4)
    assert (top["msa"], top["w_msa"]) == (expected["msa"], expected["w_msa"])
    assert (tmp_path / "profile.txt").read_text() == out


def test_profile_surfaces_build_errors(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("input_size = 417\n")
    code, _, err = run(["profile", "--config", cfg], capsys)
    assert code == 1 and "not divisible by stride" in err


# ---------------------------------------------------------------- detect

def test_detect_threshold_one_writes_only_header(synth_dir, tmp_path, capsys):
    out = tmp_path / "d.tsv"
    code, _, _ = run(["detect", synth_dir / "synth_00000.ppm", "--random-weights", "--score-thresh", "1.0",
                      "--output", out], capsys)
    assert code == 0
    assert out.read_text() == "image_id\tclass_id\tscore\tcx\tcy\tw\th\n"
    assert read_detections(out) == []


def test_detect_is_deterministic(synth_dir, tmp_path, capsys):
    images = [synth_dir / "synth_00001.ppm", synth_dir / "synth_00002.ppm"]
    for name in ("a.tsv", "b.tsv"):
        assert run(["detect", *images, "--random-weights", "--seed", 3, "--output", tmp_path / name], capsys)[0] == 0
    assert (tmp_path / "a.tsv").read_bytes() == (tmp_path / "b.tsv").read_bytes()
    assert len(read_detections(tmp_path / "a.tsv")) > 0


def test_detect_requires_weights(synth_dir, capsys):
    code, _, err = run(["detect", synth_dir / "synth_00000.ppm"], capsys)
    assert code == 1 and "no weights" in err
    code, _, err = run(["detect", synth_dir / "synth_00000.ppm", "--weights", "/nonexistent.dw1"], capsys)
    assert code == 1 and "not found" in err


def test_detect_with_corrupt_weights_names_section(synth_dir, tmp_path, capsys, small_config):
    blob = bytearray(D.dumps_weights(D.build(D.DetectorConfig(), seed=None).state_dict()))
    blob[len(blob) // 2] ^= 0xFF
    path = tmp_path / "bad.dw1"
    path.write_bytes(bytes(blob))
    code, _, err = run(["detect", synth_dir / "synth_00000.ppm", "--weights", path], capsys)
    assert code == 1 and "section" in err


def test_detect_overfit_weights_find_the_rectangle(overfit_rectangle, overfit_weights, tmp_path, capsys):
    img = tmp_path / "rect.ppm"
    data.write_ppm(img, overfit_rectangle["pixels"])
    out = tmp_path / "rect.jsonl"
    code, _, _ = run(["detect", img, "--weights", overfit_weights, "--output", out, "--render",
                      "--out-dir", tmp_path], capsys)
    assert code == 0
    dets = [d for _, d in read_detections(out)]
    assert any(d.class_id == RECTANGLE_CLASS and iou(d.box, overfit_rectangle["box"]) >= 0.5 for d in dets)
    render = data.read_ppm(tmp_path / "renders" / "rect.ppm")
    assert render.shape == overfit_rectangle["pixels"].shape


# ---------------------------------------------------------------- eval

def _ground_truth_records(gt_dir):
    records = []
    for image_id, anno in sorted(data.read_voc_dir(gt_dir).items()):
        records += [(image_id, Detection(o.box, o.class_id, 1.0)) for o in anno.objects]
    return records


def test_eval_perfect_detections(synth_dir, tmp_path, capsys):
    dets = tmp_path / "gt.tsv"
    write_detections(dets, _ground_truth_records(synth_dir))
    code, out, _ = run(["eval", synth_dir, dets, "--out-dir", tmp_path / "m"], capsys)
    assert code == 0 and "P (%)" in out and "mAP (%)" in out
    agg = json.loads((tmp_path / "m" / "metrics.json").read_text())["aggregate"]
    assert (agg["P"], agg["R"], agg["F1"], agg["mAP"]) == (1.0, 1.0, 1.0, 1.0)
    assert list((tmp_path / "m").glob("pr_*.csv"))


def test_eval_empty_detections(synth_dir, tmp_path, capsys):
    dets = tmp_path / "none.tsv"
    write_detections(dets, [])
    assert run(["eval", synth_dir, dets, "--out-dir", tmp_path], capsys)[0] == 0
    agg = json.loads((tmp_path / "metrics.json").read_text())["aggregate"]
    assert (agg["P"], agg["R"], agg["mAP"]) == (0.0, 0.0, 0.0)


def test_eval_unknown_ids_and_empty_ground_truth(synth_dir, tmp_path, capsys):
    dets = tmp_path / "d.tsv"
    write_detections(dets, [("ghost_1", Detection(Box(5, 5, 2, 2), 0, 0.9))])
    code, _, err = run(["eval", synth_dir, dets], capsys)
    assert code == 1 and "ghost_1" in err
    empty = tmp_path / "empty"
    empty.mkdir()
    assert run(["eval", empty, dets], capsys)[0] == 1


def test_eval_matches_library_report(synth_dir, tmp_path, capsys, rng):
    records = []
    for image_id, det in _ground_truth_records(synth_dir):
        if rng.random() < 0.8:
            b = det.box
            jitter = Box(b.cx + rng.normal(0, 3), b.cy + rng.normal(0, 3), b.w * rng.uniform(0.8, 1.2), b.h)
            records.append((image_id, Detection(jitter, det.class_id, float(rng.random()))))
    records.append(("synth_00000", Detection(Box(50, 50, 20, 20), 3, 0.7)))
    dets = tmp_path / "d.tsv"
    write_detections(dets, records)
    assert run(["eval", synth_dir, dets, "--out-dir", tmp_path], capsys)[0] == 0
    annos = data.read_voc_dir(synth_dir)
    by_image = {k: [] for k in annos}
    for image_id, d in read_detections(dets):
        by_image[image_id].append(d)
    expected = evaluate(by_image, {k: a.ground_truths() for k, a in annos.items()}, data.CLASS_NAMES, 0.25)
    assert (tmp_path / "metrics.json").read_text() == expected.to_json()


# ---------------------------------------------------------------- augment / synth

def test_augment_brightness_one_is_a_byte_noop(synth_dir, tmp_path, capsys):
    src = synth_dir / "synth_00003.ppm"
    for mode in ("none", "brightness"):
        code, _, _ = run(["augment", src, "--mode", mode, "--factor", "1.0", "--out-dir", tmp_path], capsys)
        assert code == 0
        assert (tmp_path / f"synth_00003_{mode}.ppm").read_bytes() == src.read_bytes()
        assert data.read_voc(tmp_path / f"synth_00003_{mode}.xml").objects == \
            data.read_voc(synth_dir / "synth_00003.xml").objects


def test_augment_brightness_half(synth_dir, tmp_path, capsys):
    src = synth_dir / "synth_00003.ppm"
    assert run(["augment", src, "--mode", "brightness", "--factor", "0.5", "--out-dir", tmp_path], capsys)[0] == 0
    halved = data.decode_ppm((tmp_path / "synth_00003_brightness.ppm").read_bytes())
    assert np.array_equal(halved, data.decode_ppm(src.read_bytes()) // 2)


def test_augment_mosaic_matches_library(synth_dir, tmp_path, capsys):
    code, _, _ = run(["augment", synth_dir, "--mode", "mosaic", "--size", "256", "--seed", "4",
                      "--out-dir", tmp_path], capsys)
    assert code == 0
    stems = [f"synth_{i:05d}" for i in range(4)]
    images = [data.read_ppm(synth_dir / f"{s}.ppm") for s in stems]
    objects = [data.read_voc(synth_dir / f"{s}.xml").objects for s in stems]
    _, expected = data.mosaic(images, objects, 256, 4)
    written = data.read_voc(tmp_path / "mosaic_0000.xml")
    assert len(written.objects) == len(expected)
    for o in written.objects:
        assert 0 <= o.x1 < o.x2 <= 256 and 0 <= o.y1 < o.y2 <= 256


@pytest.mark.parametrize("mode", ["grayscale", "mixup", "cutmix"])
def test_augment_outputs_reparse(synth_dir, tmp_path, capsys, mode):
    code, _, _ = run(["augment", synth_dir, "--mode", mode, "--factor", "0.6", "--out-dir", tmp_path], capsys)
    assert code == 0
    for xml in tmp_path.glob("*.xml"):
        anno = data.read_voc(xml)
        img = data.decode_ppm((tmp_path / f"{xml.stem}.ppm").read_bytes())
        assert img.shape == (anno.height, anno.width, 3)


def test_augment_mosaic_needs_four(synth_dir, capsys):
    assert run(["augment", synth_dir / "synth_00000.ppm", "--mode", "mosaic"], capsys)[0] == 1


def test_synth_writes_consistent_split(synth_dir):
    train = (synth_dir / "train.txt").read_text().split()
    val = (synth_dir / "val.txt").read_text().split()
    assert sorted(train + val) == [f"synth_{i:05d}" for i in range(6)]
    assert (train, val) == tuple(map(sorted, data.split(train + val, 2)))


# ---------------------------------------------------------------- selftest

def test_selftest_passes(capsys):
    code, out, _ = run(["selftest"], capsys)
    assert code == 0
    assert out.count("PASS") == 8 and "8/8 suites passed" in out


def test_selftest_reports_corrupt_weight_section(tmp_path, capsys, small_config):
    cfg_file = tmp_path / "small.cfg"
    cfg_file.write_text("input_size = 64\nwidths = 16 32 64 128\ncsp_depths = 1,1,1,1\n"
                        "dense_layers = 2\ngrowth = 8\n")
    cfg, _ = cli.resolve(cli.build_parser().parse_args(["selftest", "--config", str(cfg_file)]))
    blob = bytearray(D.dumps_weights(D.build(cfg, seed=1).state_dict()))
    blob[-3] ^= 0xFF
    weights = tmp_path / "bad.dw1"
    weights.write_bytes(bytes(blob))
    code, out, _ = run(["selftest", "--config", cfg_file, "--weights", weights], capsys)
    assert code == 2
    line = next(line for line in out.splitlines() if "weights" in line)
    assert line.startswith("FAIL") and "section" in line


# ---------------------------------------------------------------- config and exit codes

def test_config_file_and_flag_precedence(tmp_path):
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text("# thresholds\nscore_thresh = 0.4   # trailing comment\n\nnms_thresh = 0.6\nseed = 7\n"
                        "heads = 2\nanchors = 5,6 8,14 15,11; 10,13 16,30 33,23; 30,61 62,45 59,119; "
                        "116,90 156,198 373,326\n")
    parser = cli.build_parser()
    cfg, run_cfg = cli.resolve(parser.parse_args(["profile", "--config", str(cfg_file), "--seed", "9"]))
    assert cfg.heads == 2 and cfg.anchors == D.DEFAULT_ANCHORS
    assert (run_cfg["score_thresh"], run_cfg["nms_thresh"], run_cfg["seed"]) == (0.4, 0.6, 9)


@pytest.mark.parametrize("text,needle", [
    ("score_thresh 0.4\n", "expected 'key = value'"),
    ("Score = 1\n", "invalid key"),
    ("seed = 1\nseed = 2\n", "duplicate key"),
    ("colour = red\n", "unknown config keys"),
    ("score_thresh = 1.5\n", "outside"),
    ("nms_thresh = 0\n", "outside"),
    ("adh = maybe\n", "not a boolean"),
])
def test_config_rejections_exit_one(tmp_path, capsys, text, needle):
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text(text)
    code, _, err = run(["profile", "--config", cfg_file], capsys)
    assert code == 1 and needle in err


def test_internal_failure_exits_two(monkeypatch, capsys):
    def explode(args):
        raise RuntimeError("broken invariant")
    monkeypatch.setattr(cli, "cmd_profile", explode)
    code, _, err = run(["profile"], capsys)
    assert code == 2 and "broken invariant" in err
