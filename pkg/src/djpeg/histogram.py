"""Differentiable per-frequency DCT histograms built from ordinary network layers.

The pipeline is DCT filterbank (stride-8 convolution) -> threshold bias ->
gain -> sigmoid -> global average pool -> rescale to counts -> [1, -1]
difference along the threshold axis. The result is a (bins x frequencies)
feature image.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import AvgPool, Bias, DCTFilterbank, DiffConv, Scale, Sequential, Sigmoid, Tensor, no_grad
from .nn.functional import diff_conv


def zigzag_order() -> list[tuple[int, int]]:
    """All 64 (vertical, horizontal) frequency pairs in JPEG zigzag order."""
    return sorted(((i, j) for i in range(8) for j in range(8)),
                  key=lambda p: (p[0] + p[1], p[0] if (p[0] + p[1]) % 2 else p[1]))


def ac_frequencies() -> list[tuple[int, int]]:
    return zigzag_order()[1:]


@dataclass
class HistConfig:
    frequencies: list = field(default_factory=ac_frequencies)
    bin_boundaries: list = field(default_factory=lambda: [float(b) for b in range(-50, 51)])
    gain: float = 1e6
    trainable: bool = False

    def __post_init__(self):
        self.frequencies = [tuple(int(v) for v in f) for f in self.frequencies]
        self.bin_boundaries = [float(b) for b in self.bin_boundaries]
        if len(self.bin_boundaries) < 2:
            raise ValueError("need at least two bin boundaries")
        if np.any(np.diff(self.bin_boundaries) <= 0):
            raise ValueError("bin boundaries must be strictly increasing")
        if self.gain <= 0:
            raise ValueError("gain must be positive")

    @property
    def num_bins(self) -> int:
        return len(self.bin_boundaries) - 1

    def to_dict(self) -> dict:
        return {"frequencies": [list(f) for f in self.frequencies], "bin_boundaries": self.bin_boundaries,
                "gain": self.gain, "trainable": self.trainable}

    @classmethod
    def from_dict(cls, d: dict) -> "HistConfig":
        return cls(d["frequencies"], d["bin_boundaries"], d["gain"], d["trainable"])


def frontend_layers(cfg: HistConfig, B: int):
    """Layers mapping a (B, B, 1) image to a (bins, frequencies, 1) feature image."""
    blocks = (B // 8) ** 2
    return [
        DCTFilterbank(cfg.frequencies),
        Bias(trainable=cfg.trainable, levels=cfg.bin_boundaries),
        Scale(cfg.gain),
        Sigmoid(),
        AvgPool(None),
        Scale(blocks),
        DiffConv(len(cfg.bin_boundaries)),
    ]


def build_frontend(cfg: HistConfig, B: int, dtype=np.float32) -> Sequential:
    if B % 8:
        raise ValueError(f"patch size {B} is not a multiple of 8")
    net = Sequential(frontend_layers(cfg, B))
    net.build((B, B, 1), dtype=dtype)
    return net


def _batch(images, dtype) -> np.ndarray:
    a = images.data if isinstance(images, Tensor) else np.asarray(images)
    if a.ndim == 2:
        a = a[None]
    if a.ndim == 3:
        a = a[..., None]
    return a.astype(dtype, copy=False)


def dct_filterbank(images, frequencies=None, dtype=np.float64) -> np.ndarray:
    """Per-frequency block DCT planes, shape (N, B/8, B/8, F) (no level shift)."""
    x = _batch(images, dtype)
    layer = DCTFilterbank(frequencies or ac_frequencies())
    layer.build(x.shape[1:], None, dtype)
    with no_grad():
        return layer(Tensor(x, dtype=dtype)).data


def soft_cumulative(D: np.ndarray, cfg: HistConfig) -> np.ndarray:
    """Soft count of blocks whose coefficient exceeds each boundary: (N, levels, F)."""
    D = np.asarray(D)
    n, h, w, f = D.shape
    layers = [Bias(False, cfg.bin_boundaries), Scale(cfg.gain), Sigmoid(), AvgPool(None), Scale(h * w)]
    net = Sequential(layers)
    net.build((h, w, f), dtype=D.dtype)
    with no_grad():
        out = net.run(Tensor(D, dtype=D.dtype)).data
    return out.reshape(n, len(cfg.bin_boundaries), f)


def diff_histogram(cumulative: np.ndarray) -> np.ndarray:
    """Z(b_i) = cum(b_i) - cum(b_{i+1}): the soft count inside [b_i, b_{i+1})."""
    cumulative = np.asarray(cumulative)
    if cumulative.ndim != 3 or cumulative.shape[1] < 2:
        raise ValueError("need an (N, levels, F) array with at least two levels")
    with no_grad():
        return diff_conv(Tensor(cumulative, dtype=cumulative.dtype), (1.0, -1.0)).data


def extract_features(images, cfg: HistConfig | None = None, dtype=np.float32, chunk: int = 128) -> np.ndarray:
    """Feature images (N, bins, frequencies, 1) for a stack of B x B images."""
    cfg = cfg or HistConfig()
    x = _batch(images, dtype)
    net = build_frontend(cfg, x.shape[1], dtype)
    out = np.empty((len(x), cfg.num_bins, len(cfg.frequencies), 1), dtype=dtype)
    with no_grad():
        for start in range(0, len(x), chunk):
            out[start:start + chunk] = net.run(x[start:start + chunk]).data
    return out
