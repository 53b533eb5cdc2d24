import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from djpeg.dataset import Dataset
from djpeg.detectors import build_detector
from djpeg.harness import (
    AccuracyGrid, Heatmap, TrainingDiverged, accuracy, evaluate, localize, region_contrast, train,
    window_grid,
)
from djpeg.nn import SgdConfig
from djpeg.nn.functional import DimensionError


def make_set(images, labels, split="train", qf1=None):
    labels = np.asarray(labels)
    qf1 = [None if y == 0 else 80 for y in labels] if qf1 is None else qf1
    records = [{"label": int(y), "qf1": q, "qf2": 95, "r": 0, "c": 0, "split": split, "source": f"s{k}"}
               for k, (y, q) in enumerate(zip(labels, qf1))]
    return Dataset(np.asarray(images, dtype=np.uint8), records)


def bright_dark(rng, n, B=40, split="train"):
    labels = np.arange(n) % 2
    level = np.where(labels == 1, 170, 80)[:, None, None]
    images = np.clip(level + rng.normal(0, 20, size=(n, B, B)), 0, 255)
    return make_set(images, labels, split)


class StubDetector:
    """Predicts the top-left pixel / 255, so tests control the output through the images."""

    def __init__(self, B=64, constant=None):
        self.B = B
        self.constant = constant

    def predict_proba(self, images):
        images = np.asarray(images)
        if self.constant is not None:
            return np.full(len(images), self.constant)
        return images[:, 0, 0] / 255.0


# training

def test_separable_toy_problem_learned():
    rng = np.random.default_rng(0)
    train_set, val_set = bright_dark(rng, 200), bright_dark(rng, 100, split="val")
    det = build_detector("pix", 40, seed=0)
    report = train(det, train_set, val_set, SgdConfig(lr0=0.01, batch_size=32, max_epochs=5))
    assert report.selected.val_accuracy >= 0.99
    assert accuracy(det, val_set) >= 0.99


def test_shuffled_labels_stay_at_chance():
    rng = np.random.default_rng(1)
    images = rng.integers(0, 256, size=(1400, 40, 40))
    labels = np.arange(1400) % 2
    train_set = make_set(images[:400], labels[:400])
    val_set = make_set(images[400:], labels[400:], split="val")
    det = build_detector("pix", 40, seed=1)
    report = train(det, train_set, val_set, SgdConfig(lr0=0.01, batch_size=32, max_epochs=4))
    assert 0.45 <= report.selected.val_accuracy <= 0.55


@pytest.fixture(scope="module")
def long_run():
    rng = np.random.default_rng(2)
    train_set, val_set = bright_dark(rng, 64), bright_dark(rng, 32, split="val")
    det = build_detector("pix", 40, seed=2)
    seen = []
    report = train(det, train_set, val_set, SgdConfig(lr0=0.001, batch_size=16, max_epochs=30), on_epoch=seen.append)
    return det, report, seen, val_set


def test_every_epoch_logged(long_run):
    _, report, seen, _ = long_run
    assert len(report.epochs) == len(seen) == 30 and not report.stopped_early
    assert [e.epoch for e in report.epochs] == list(range(30))
    assert all(np.isfinite([e.train_loss, e.val_loss]).all() for e in report.epochs)
    rows = report.to_csv().strip().splitlines()
    assert len(rows) == 31 and sum(r.endswith(",1") for r in rows) == 1


def test_selected_epoch_minimises_val_loss(long_run):
    _, report, _, _ = long_run
    losses = [e.val_loss for e in report.epochs]
    assert report.selected_epoch == int(np.argmin(losses))


def test_selected_accuracy_reproduced_on_val_set(long_run):
    det, report, _, val_set = long_run
    assert accuracy(det, val_set) == report.selected.val_accuracy


def test_patience_stops_early():
    rng = np.random.default_rng(3)
    train_set, val_set = bright_dark(rng, 64), bright_dark(rng, 32, split="val")
    det = build_detector("pix", 40, seed=3)
    report = train(det, train_set, val_set, SgdConfig(lr0=0.05, batch_size=16, max_epochs=30), patience=1)
    assert report.stopped_early and len(report.epochs) < 30
    assert report.selected_epoch == len(report.epochs) - 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_last_finite_state():
    rng = np.random.default_rng(4)
    train_set, val_set = bright_dark(rng, 64), bright_dark(rng, 16, split="val")
    det = build_detector("pix", 40, seed=4)
    with pytest.raises(TrainingDiverged) as info:
        train(det, train_set, val_set, SgdConfig(lr0=1e8, momentum=0.9, batch_size=16, max_epochs=3))
    assert info.value.state and all(np.all(np.isfinite(v)) for v in info.value.state.values())


def test_train_rejects_mismatched_or_empty_sets():
    rng = np.random.default_rng(5)
    det = build_detector("pix", 64)
    with pytest.raises(DimensionError):
        train(det, bright_dark(rng, 4), bright_dark(rng, 4), SgdConfig(max_epochs=1))
    empty = make_set(np.zeros((0, 64, 64)), [])
    with pytest.raises(ValueError, match="empty"):
        train(det, bright_dark(rng, 4, B=64), empty, SgdConfig(max_epochs=1))


# evaluation

def labelled_images(labels, B=64):
    images = np.zeros((len(labels), B, B), np.uint8)
    images[:, 0, 0] = np.where(np.asarray(labels) == 1, 255, 0)
    return images


def test_evaluate_perfect_and_constant():
    labels = np.arange(40) % 2
    qf1 = [None if y == 0 else (60 if k % 4 == 1 else 90) for k, y in enumerate(labels)]
    ds = make_set(labelled_images(labels), labels, qf1=qf1)
    sets = ds.pair_sets()
    assert set(sets) == {(60, 95), (90, 95)}
    perfect = evaluate(StubDetector(), sets)
    assert perfect.cells == {(60, 95): 1.0, (90, 95): 1.0} and perfect.macro == 1.0
    constant = evaluate(StubDetector(constant=0.9), sets)
    assert all(v == 0.5 for v in constant.cells.values())
    for (q1, _), part in sets.items():
        assert set(part.qf1[part.labels == 1].tolist()) == {q1}


def test_evaluate_errors():
    with pytest.raises(ValueError):
        evaluate(StubDetector(), {})
    with pytest.raises(ValueError, match="empty"):
        accuracy(StubDetector(), make_set(np.zeros((0, 64, 64)), []))


def test_accuracy_grid_report():
    grid = AccuracyGrid({(60, 95): 0.9, (90, 95): 0.7}, {(60, 95): 10, (90, 95): 12})
    assert grid.macro == pytest.approx(0.8)
    assert grid.to_csv().splitlines() == ["qf1,qf2,n,accuracy", "60,95,10,0.900000", "90,95,12,0.700000"]
    assert "macro      0.8000" in grid.summary()


# localization

def test_heatmap_grid_for_256():
    assert window_grid((256, 256)) == (13, 13)


@settings(max_examples=40, deadline=None)
@given(st.integers(64, 400), st.integers(64, 400))
def test_heatmap_grid_formula(h, w):
    rows, cols = window_grid((h, w))
    assert rows == (h - 64) // 16 + 1 and cols == (w - 64) // 16 + 1
    assert 64 + (rows - 1) * 16 <= h < 64 + rows * 16


def test_too_small_image_rejected():
    with pytest.raises(DimensionError):
        localize(StubDetector(), np.zeros((63, 100), np.uint8))
    with pytest.raises(DimensionError):
        localize(StubDetector(B=32), np.zeros((128, 128), np.uint8))


def test_localize_reads_each_window(rng):
    image = rng.integers(0, 256, size=(150, 200)).astype(np.uint8)
    heat = localize(StubDetector(), image)
    assert heat.probs.shape == window_grid(image.shape) == (6, 9)
    for i in range(6):
        for j in range(9):
            assert heat.probs[i, j] == image[16 * i, 16 * j] / 255.0


def test_pixel_map_centres():
    heat = Heatmap(np.array([[0.25, 0.75]]), (64, 80))
    pm = heat.pixel_map()
    assert np.all(pm[24:40, 24:40] == 0.25) and np.all(pm[24:40, 40:56] == 0.75)
    assert np.isnan(pm[0, 0]) and np.isnan(pm[40, 30])


def test_heatmap_files(tmp_path, rng):
    image = rng.integers(0, 256, size=(256, 256)).astype(np.uint8)
    heat = Heatmap(rng.uniform(0, 1, size=(13, 13)), image.shape)
    csv_path, png_path = heat.save(tmp_path / "heat", image)
    back = np.loadtxt(csv_path, delimiter=",")
    assert back.shape == (13, 13) and np.allclose(back, heat.probs, atol=1e-6)
    with Image.open(png_path) as im:
        assert im.size == (256, 256) and im.mode == "RGB"
    assert np.array_equal(heat.render(image)[0, 0], [image[0, 0]] * 3)


def test_region_contrast():
    probs = np.zeros((13, 13))
    probs[4:9, 4:9] = 1.0
    mask = np.zeros((256, 256), bool)
    mask[64:192, 64:192] = True
    inside, outside = region_contrast(Heatmap(probs, (256, 256)), mask)
    assert inside == 1.0 and outside == 0.0
    with pytest.raises(ValueError):
        region_contrast(Heatmap(probs, (256, 256)), np.ones((256, 256), bool))
