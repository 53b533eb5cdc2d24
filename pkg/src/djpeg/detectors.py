"""The three double-compression detectors and the two-input fusion classifier."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.ensemble import RandomForestClassifier

from . import histogram
from .nn import InnerProduct, MaxPool, Conv, ReLU, Scale, Sequential, SoftMax, Tensor, no_grad
from .nn import checkpoint
from .nn.functional import DimensionError
from .preprocess import DenoiserConfig, MeanImage, noise_residuals, subtract_mean

KINDS = ("pix", "noise", "hist")
NUM_FILTERS = 30
HIDDEN = 500
# keeps untrained outputs close to 0.5
CLASSIFIER_INIT_GAIN = 0.1


def reference_layers(kernel: int) -> list:
    """Conv-Pool x3, IP-500, ReLU, IP-2, SoftMax."""
    return [
        Conv(kernel, NUM_FILTERS), MaxPool(2, 2),
        Conv(kernel, NUM_FILTERS), MaxPool(2, 2),
        Conv(kernel, NUM_FILTERS), MaxPool(2, 2),
        InnerProduct(HIDDEN), ReLU(),
        InnerProduct(2, init_gain=CLASSIFIER_INIT_GAIN), SoftMax(),
    ]


@dataclass
class Detector:
    """A detector network plus the input transform it was trained with.

    The network is ``[front end] + Scale(input_scale) + reference layers``; for
    ``hist`` the front end computes the feature image, for ``pix``/``noise`` it is
    empty and the preprocessing (mean subtraction / noise residual) runs on
    numpy arrays before the network.
    """

    kind: str
    B: int
    net: Sequential
    mean: MeanImage | None = None
    denoiser: DenoiserConfig | None = None
    hist: histogram.HistConfig | None = None
    frontend_size: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def scale_layer(self) -> Scale:
        return self.net.layers[self.frontend_size]

    @property
    def trunk(self) -> list:
        return self.net.layers[self.frontend_size + 1:]

    def trunk_trace(self) -> list[tuple]:
        """Per-layer output shapes of the reference CNN part."""
        return [layer.out_shape for layer in self.trunk]

    @property
    def trunk_input_shape(self) -> tuple:
        return self.scale_layer.in_shape

    def frozen_prefix(self) -> int:
        """Leading layers without trainable parameters; their output can be cached."""
        n = 0
        for layer in self.net.layers:
            if any(t.requires_grad for t in layer.params.values()):
                break
            n += 1
        return n

    def prepare(self, images: np.ndarray) -> np.ndarray:
        """Apply the numpy-side preprocessing; returns (N, B, B, 1) float32."""
        images = np.asarray(images)
        if images.ndim == 2:
            images = images[None]
        if images.shape[1:] != (self.B, self.B):
            raise DimensionError(f"{self.kind} detector expects {self.B}x{self.B} patches, got {images.shape[1:]}")
        if self.kind == "pix":
            if self.mean is None:
                raise RuntimeError("pixel detector has no mean image; fit preprocessing first")
            x = subtract_mean(images, self.mean)
        elif self.kind == "noise":
            x = noise_residuals(images, self.denoiser)
        else:
            x = images.astype(np.float32)
        return x[..., None]

    def features(self, images: np.ndarray, stop: int | None = None, chunk: int = 128) -> np.ndarray:
        """Preprocess and run the first ``stop`` layers (default: the frozen prefix) without grad."""
        stop = self.frozen_prefix() if stop is None else stop
        x = self.prepare(images)
        if stop == 0:
            return x
        outs = []
        with no_grad():
            for start in range(0, len(x), chunk):
                outs.append(self.net.run(x[start:start + chunk], 0, stop).data)
        return np.concatenate(outs)

    def fit_preprocessing(self, train_images: np.ndarray) -> None:
        """Estimate the training-split artifacts: mean image (pix) and input scale."""
        if self.kind == "pix":
            self.mean = MeanImage.from_images(train_images)
        sample = train_images[: min(len(train_images), 2000)]
        x = self.features(sample, stop=self.frontend_size)
        std = float(np.std(x, dtype=np.float64))
        self.scale_layer.spec.options["factor"] = 1.0 / std if std > 0 else 1.0

    def predict_proba(self, images: np.ndarray, chunk: int = 128) -> np.ndarray:
        """Probability of double compression for each patch."""
        start = self.frozen_prefix()
        x = self.features(images, start)
        return self.proba_from_features(x, start, chunk)

    def proba_from_features(self, x: np.ndarray, start: int, chunk: int = 128) -> np.ndarray:
        return self.scores_from_features(x, start, chunk)[1][:, 1]

    def scores_from_features(self, x: np.ndarray, start: int, chunk: int = 128):
        """``(logits, probabilities)`` for inputs entering the network at layer ``start``."""
        logits = np.empty((len(x), 2), dtype=np.float32)
        with no_grad():
            for s in range(0, len(x), chunk):
                logits[s:s + chunk] = self.net.logits(x[s:s + chunk], start).data
            probs = self.net.layers[-1](Tensor(logits)).data
        return logits, probs

    # persistence

    def meta(self) -> dict:
        return {
            "detector_kind": self.kind,
            "B": self.B,
            "frontend_size": self.frontend_size,
            "denoiser": self.denoiser.to_dict() if self.denoiser else None,
            "hist": self.hist.to_dict() if self.hist else None,
            "mean_count": self.mean.count if self.mean else 0,
            "extra": self.extra,
        }

    def to_bytes(self) -> bytes:
        arrays = {"mean": self.mean.mean} if self.mean is not None else {}
        return checkpoint.dumps(self.net, self.meta(), arrays)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> "Detector":
        net, meta, arrays = checkpoint.loads(data)
        kind = meta.get("detector_kind")
        if kind not in KINDS:
            raise checkpoint.CheckpointError(f"unknown detector kind {kind!r}")
        hist_cfg = histogram.HistConfig.from_dict(meta["hist"]) if meta["hist"] else None
        mean = MeanImage(arrays["mean"], meta["mean_count"]) if "mean" in arrays else None
        den = DenoiserConfig(**meta["denoiser"]) if meta["denoiser"] else None
        return cls(kind, meta["B"], net, mean, den, hist_cfg, meta["frontend_size"], meta.get("extra", {}))

    @classmethod
    def load(cls, path) -> "Detector":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def build_detector(kind: str, B: int, seed: int = 0, hist: histogram.HistConfig | None = None,
                   denoiser: DenoiserConfig | None = None) -> Detector:
    if kind not in KINDS:
        raise ValueError(f"unknown detector kind {kind!r}; expected one of {KINDS}")
    if B % 8 or B < 32:
        raise ValueError(f"patch size must be a multiple of 8 and at least 32, got {B}")
    if kind == "hist":
        hist = hist or histogram.HistConfig()
        front = histogram.frontend_layers(hist, B)
        layers = front + [Scale(1.0)] + reference_layers(3)
        net = Sequential(layers)
        net.build((B, B, 1), seed=seed)
        return Detector(kind, B, net, hist=hist, frontend_size=len(front))
    net = Sequential([Scale(1.0)] + reference_layers(5))
    net.build((B, B, 1), seed=seed)
    den = (denoiser or DenoiserConfig()) if kind == "noise" else None
    return Detector(kind, B, net, denoiser=den)


def predict(detector: Detector, image: np.ndarray) -> float:
    """Probability that a single B x B patch is double compressed."""
    return float(detector.predict_proba(np.asarray(image)[None])[0])


class FusionModel:
    """Random forest over (p_hist, p_noise) with majority vote across trees."""

    def __init__(self, n_trees: int = 50, max_depth: int | None = 4, seed: int = 0, bootstrap: bool = True):
        self.n_trees = n_trees
        self.max_depth = max_depth
        self.seed = seed
        self.forest = RandomForestClassifier(
            n_estimators=n_trees, max_depth=max_depth, criterion="gini", bootstrap=bootstrap,
            max_features=None, random_state=seed,
        )
        self.fitted = False

    @staticmethod
    def _features(p_hist, p_noise) -> np.ndarray:
        x = np.column_stack([np.ravel(p_hist), np.ravel(p_noise)]).astype(np.float64)
        if np.any((x < 0) | (x > 1)):
            raise ValueError("fusion inputs must be probabilities in [0, 1]")
        return x

    def fit(self, p_hist, p_noise, labels) -> "FusionModel":
        self.forest.fit(self._features(p_hist, p_noise), np.ravel(labels).astype(int))
        self.fitted = True
        return self

    def predict(self, p_hist, p_noise) -> np.ndarray:
        if not self.fitted:
            raise RuntimeError("fusion model has not been trained")
        x = self._features(p_hist, p_noise)
        votes = np.zeros(len(x))
        for tree in self.forest.estimators_:
            votes += self.forest.classes_[tree.predict(x).astype(int)]
        return (votes * 2 > len(self.forest.estimators_)).astype(int)


def fuse(p_hist: float, p_noise: float, model: FusionModel) -> int:
    return int(model.predict([p_hist], [p_noise])[0])
