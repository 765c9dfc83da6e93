import numpy as np
import pytest

from densesph import detector as D
from densesph.boxes import Box


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def default_config():
    return D.DetectorConfig()


@pytest.fixture(scope="session")
def random_detector(default_config):
    """Default graph with weights drawn in [-0.1, 0.1]; shared, never mutated."""
    return D.build(default_config, seed=0, uniform_range=0.1)


@pytest.fixture(scope="session")
def small_config():
    return D.DetectorConfig(input_size=64, widths=(16, 32, 64, 128), csp_depths=(1, 1, 1, 1),
                            dense_layers=2, growth=8, stem_channels=8, spp_kernels=(3, 5))


def random_box(rng, lo=1.0, hi=60.0, span=200.0):
    return Box(*rng.uniform(0, span, 2), *rng.uniform(lo, hi, 2))


RECTANGLE = (100, 60, 250, 180)  # x1, y1, x2, y2 in a 320 x 240 image
RECTANGLE_CLASS = 5


def rectangle_image(width=320, height=240):
    """Mid-gray image with one white rectangle at ``RECTANGLE``."""
    pixels = np.full((height, width, 3), 60, dtype=np.uint8)
    x1, y1, x2, y2 = RECTANGLE
    pixels[y1:y2, x1:x2] = 255
    return pixels


@pytest.fixture(scope="session")
def overfit_rectangle(default_config):
    """Coordinate descent from zero logits onto the letterboxed rectangle.

    Returns the image, its ground-truth box in image pixels, the assignment,
    the converged box logits and the loss history.
    """
    import time

    from densesph import data
    from densesph.metrics import GroundTruth

    cfg = default_config
    pixels = rectangle_image()
    anno = data.Annotation(RECTANGLE_CLASS, *map(float, RECTANGLE))
    _, [boxed], _ = data.letterbox(data.from_bytes(pixels), [anno], cfg.input_size)
    [a] = D.assign_targets([GroundTruth(boxed.box, RECTANGLE_CLASS)], cfg)
    zeros = [np.zeros((cfg.num_anchors * cfg.outputs_per_anchor, g, g), np.float32) for g in cfg.grid_sizes()]
    t0 = time.perf_counter()
    outs, history = D.descend_coordinates(zeros, [a], cfg, steps=200)
    seconds = time.perf_counter() - t0
    k = cfg.outputs_per_anchor
    logits = outs[a.scale][a.anchor * k:a.anchor * k + 4, a.gy, a.gx]
    return {"pixels": pixels, "box": anno.box, "assignment": a, "logits": logits,
            "history": history, "seconds": seconds}


@pytest.fixture(scope="session")
def overfit_weights(tmp_path_factory, default_config, overfit_rectangle):
    """DW1 file whose head emits the converged logits at every cell of the assigned scale."""
    det = D.build(default_config, seed=0, uniform_range=0.1)
    a = overfit_rectangle["assignment"]
    D.toy_weights_from_logits(det, a.scale, a.anchor, overfit_rectangle["logits"], RECTANGLE_CLASS)
    path = tmp_path_factory.mktemp("weights") / "overfit.dw1"
    D.save_weights(path, det)
    return path


# Acceptance lines are collected here and echoed in the terminal summary so
# they show up in plain ``pytest -v`` runs, not only under ``-s``.
ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_log(request):
    return request.config.stash.setdefault(ACCEPTANCE_KEY, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
