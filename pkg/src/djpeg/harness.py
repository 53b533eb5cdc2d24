"""Training, evaluation and sliding-window localization for the detectors."""
from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .dataset import Dataset
from .detectors import Detector
from .nn import SGD, SgdConfig, Tensor
from .nn.functional import DimensionError, softmax_xent

log = logging.getLogger(__name__)

WINDOW = 64
STRIDE = 16


class TrainingDiverged(FloatingPointError):
    """Raised when the training loss stops being finite; ``state`` holds the last finite parameters."""

    def __init__(self, message: str, epoch: int, iteration: int, state: dict):
        super().__init__(message)
        self.epoch = epoch
        self.iteration = iteration
        self.state = state


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)
    selected_epoch: int = -1
    wall_time: float = 0.0
    config: dict = field(default_factory=dict)
    stopped_early: bool = False

    @property
    def selected(self) -> EpochStats:
        return next(e for e in self.epochs if e.epoch == self.selected_epoch)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "val_accuracy", "selected"])
        for e in self.epochs:
            w.writerow([e.epoch, f"{e.train_loss:.6f}", f"{e.val_loss:.6f}", f"{e.val_accuracy:.6f}",
                        int(e.epoch == self.selected_epoch)])
        return buf.getvalue()

    def summary(self) -> str:
        s = self.selected
        lines = [
            f"epochs run: {len(self.epochs)}" + (" (stopped early)" if self.stopped_early else ""),
            f"selected epoch: {s.epoch} (val loss {s.val_loss:.4f}, val accuracy {s.val_accuracy:.4f})",
            f"wall time: {self.wall_time:.1f} s",
        ]
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {"epochs": [vars(e) for e in self.epochs], "selected_epoch": self.selected_epoch,
                "wall_time": self.wall_time, "config": self.config, "stopped_early": self.stopped_early}


def _val_pass(detector: Detector, x: np.ndarray, labels: np.ndarray, start: int) -> tuple[float, float]:
    logits, probs = detector.scores_from_features(x, start)
    _, loss = softmax_xent(Tensor(logits.astype(np.float64)), labels)
    acc = float(np.mean((probs[:, 1] > 0.5) == labels))
    return float(loss.data), acc


def train(detector: Detector, train_set: Dataset, val_set: Dataset, config: SgdConfig,
          patience: int | None = None, on_epoch=None) -> TrainReport:
    """Fit ``detector`` in place and keep the parameters of the epoch with minimum validation loss.

    Preprocessing artifacts are estimated on ``train_set`` only. Layers in front
    of the first trainable one are evaluated once and cached. With ``patience``
    set, training stops after that many epochs without a new best validation loss.
    """
    for name, ds in (("training", train_set), ("validation", val_set)):
        if ds.B != detector.B:
            raise DimensionError(f"{name} patches are {ds.B}x{ds.B} but the detector expects {detector.B}x{detector.B}")
        if len(ds) == 0:
            raise ValueError(f"{name} set is empty")
    t0 = time.perf_counter()
    detector.fit_preprocessing(train_set.images)
    start = detector.frozen_prefix()
    x_train = detector.features(train_set.images, start)
    x_val = detector.features(val_set.images, start)
    y_train, y_val = train_set.labels, val_set.labels

    net = detector.net
    opt = SGD(net.trainable_params(), config)
    rng = np.random.default_rng(config.seed)
    report = TrainReport(config=config.to_dict())
    best_loss, best_state, since_best = np.inf, net.state(), 0
    for epoch in range(config.max_epochs):
        order = rng.permutation(len(x_train))
        total, seen = 0.0, 0
        for s in range(0, len(order), config.batch_size):
            idx = order[s:s + config.batch_size]
            last_finite = net.state()
            _, loss = softmax_xent(net.logits(x_train[idx], start), y_train[idx])
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDiverged(f"non-finite training loss at epoch {epoch}, iteration {opt.iteration}",
                                       epoch, opt.iteration, last_finite)
            net.backward(loss)
            try:
                opt.step()
            except FloatingPointError as exc:
                raise TrainingDiverged(str(exc), epoch, opt.iteration, last_finite) from exc
            total += value * len(idx)
            seen += len(idx)
        val_loss, val_acc = _val_pass(detector, x_val, y_val, start)
        stats = EpochStats(epoch, total / seen, val_loss, val_acc)
        report.epochs.append(stats)
        log.info("epoch %d: train loss %.4f, val loss %.4f, val acc %.4f", epoch, stats.train_loss, val_loss, val_acc)
        if on_epoch is not None:
            on_epoch(stats)
        if val_loss < best_loss:
            best_loss, best_state, since_best = val_loss, net.state(), 0
            report.selected_epoch = epoch
        else:
            since_best += 1
            if patience is not None and since_best >= patience:
                report.stopped_early = True
                break
    net.load_state(best_state)
    report.wall_time = time.perf_counter() - t0
    return report


def accuracy(detector: Detector, dataset: Dataset) -> float:
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty set")
    p = detector.predict_proba(dataset.images)
    return float(np.mean((p > 0.5) == dataset.labels))


@dataclass
class AccuracyGrid:
    cells: dict  # (qf1, qf2) -> accuracy
    counts: dict = field(default_factory=dict)

    @property
    def macro(self) -> float:
        return float(np.mean(list(self.cells.values())))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["qf1", "qf2", "n", "accuracy"])
        for (q1, q2), acc in sorted(self.cells.items()):
            w.writerow([q1, q2, self.counts.get((q1, q2), ""), f"{acc:.6f}"])
        return buf.getvalue()

    def summary(self) -> str:
        rows = [f"({q1:3d},{q2:3d})  {acc:.4f}" for (q1, q2), acc in sorted(self.cells.items())]
        return "\n".join(rows + [f"macro      {self.macro:.4f}"]) + "\n"


def evaluate(detector: Detector, sets: dict) -> AccuracyGrid:
    """Accuracy on each balanced per-pair set (typically ``Dataset.pair_sets()``)."""
    if not sets:
        raise ValueError("no evaluation sets given")
    cells, counts = {}, {}
    for key, ds in sets.items():
        cells[key] = accuracy(detector, ds)
        counts[key] = len(ds)
    return AccuracyGrid(cells, counts)


def cross_scenario(detector: Detector, dataset: Dataset) -> float:
    """Accuracy of a detector on data from a scenario it may not have been trained on."""
    return accuracy(detector, dataset)


@dataclass
class Heatmap:
    probs: np.ndarray  # (rows, cols) window grid
    image_shape: tuple
    window: int = WINDOW
    stride: int = STRIDE

    def to_csv(self) -> str:
        buf = io.StringIO()
        np.savetxt(buf, self.probs, fmt="%.6f", delimiter=",")
        return buf.getvalue()

    def pixel_map(self) -> np.ndarray:
        """Per-pixel map (NaN where no window centre cell falls): each window value
        fills the stride x stride cell at its centre, nearest-neighbour style."""
        h, w = self.image_shape
        out = np.full((h, w), np.nan, dtype=np.float32)
        off = (self.window - self.stride) // 2
        cell = np.kron(self.probs, np.ones((self.stride, self.stride), dtype=np.float32))
        out[off:off + cell.shape[0], off:off + cell.shape[1]] = cell
        return out

    def render(self, image: np.ndarray, max_alpha: float = 0.7) -> np.ndarray:
        """RGB uint8 overlay: grayscale image with red shading proportional to probability."""
        gray = np.asarray(image, dtype=np.float32)
        alpha = max_alpha * np.nan_to_num(self.pixel_map(), nan=0.0)
        rgb = np.repeat(gray[..., None], 3, axis=2)
        red = np.array([255.0, 0.0, 0.0], dtype=np.float32)
        rgb = (1 - alpha[..., None]) * rgb + alpha[..., None] * red
        return np.clip(np.round(rgb), 0, 255).astype(np.uint8)

    def save(self, prefix, image: np.ndarray | None = None) -> list[Path]:
        prefix = Path(prefix)
        csv_path = prefix.with_suffix(".csv")
        csv_path.write_text(self.to_csv())
        png_path = prefix.with_suffix(".png")
        if image is None:
            pm = np.nan_to_num(self.pixel_map(), nan=0.0)
            Image.fromarray(np.round(pm * 255).astype(np.uint8), mode="L").save(png_path)
        else:
            Image.fromarray(self.render(image), mode="RGB").save(png_path)
        return [csv_path, png_path]


def window_grid(shape: tuple, window: int = WINDOW, stride: int = STRIDE) -> tuple[int, int]:
    h, w = shape
    if h < window or w < window:
        raise DimensionError(f"image {h}x{w} is smaller than the {window}x{window} window")
    return (h - window) // stride + 1, (w - window) // stride + 1


def localize(detector: Detector, image: np.ndarray, window: int = WINDOW, stride: int = STRIDE) -> Heatmap:
    """Double-compression probability for every window position."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise DimensionError(f"expected a grayscale image, got shape {image.shape}")
    if detector.B != window:
        raise DimensionError(f"detector expects {detector.B}x{detector.B} patches, window is {window}")
    rows, cols = window_grid(image.shape, window, stride)
    views = np.lib.stride_tricks.sliding_window_view(image, (window, window))[::stride, ::stride]
    patches = views[:rows, :cols].reshape(-1, window, window)
    probs = detector.predict_proba(np.ascontiguousarray(patches)).reshape(rows, cols)
    return Heatmap(probs, image.shape, window, stride)


def region_contrast(heatmap: Heatmap, mask: np.ndarray) -> tuple[float, float]:
    """Mean window probability for windows lying fully inside / fully outside ``mask``."""
    rows, cols = heatmap.probs.shape
    inside, outside = [], []
    for i in range(rows):
        for j in range(cols):
            y, x = i * heatmap.stride, j * heatmap.stride
            frac = mask[y:y + heatmap.window, x:x + heatmap.window].mean()
            if frac == 1:
                inside.append(heatmap.probs[i, j])
            elif frac == 0:
                outside.append(heatmap.probs[i, j])
    if not inside or not outside:
        raise ValueError("mask leaves no window fully inside or fully outside the region")
    return float(np.mean(inside)), float(np.mean(outside))
