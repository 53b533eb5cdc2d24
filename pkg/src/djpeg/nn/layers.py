"""Layer vocabulary: the building blocks of the detector networks.

Every layer works on batched NHWC tensors but reports shapes per sample,
i.e. ``(H, W, C)`` for image-like data and ``(D,)`` for vectors.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from .tensor import Tensor

LAYER_KINDS = (
    "Conv", "MaxPool", "AvgPool", "ReLU", "Sigmoid", "Bias", "InnerProduct",
    "SoftMax", "DCTFilterbank", "Scale", "DiffConv",
)


@dataclass
class LayerSpec:
    kind: str
    kernel: tuple = ()
    stride: int = 1
    num_filters: int = 0
    trainable: bool = False
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        self.kernel = tuple(int(k) for k in self.kernel)
        if any(k < 1 for k in self.kernel) or self.stride < 1:
            raise ValueError(f"{self.kind}: kernel and stride must be positive")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind, "kernel": list(self.kernel), "stride": self.stride,
            "num_filters": self.num_filters, "trainable": self.trainable, "options": self.options,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(d["kind"], tuple(d["kernel"]), d["stride"], d["num_filters"], d["trainable"], dict(d["options"]))


def fan_in_uniform(rng: np.random.Generator, shape, fan_in: int, gain: float, dtype) -> np.ndarray:
    limit = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Layer:
    """Base class. Subclasses set ``self.params`` in :meth:`build`."""

    def __init__(self, spec: LayerSpec):
        self.spec = spec
        self.params: dict[str, Tensor] = {}
        self.in_shape: tuple | None = None
        self.out_shape: tuple | None = None

    @property
    def kind(self) -> str:
        return self.spec.kind

    def build(self, in_shape: tuple, rng: np.random.Generator, dtype) -> tuple:
        self.in_shape = tuple(in_shape)
        self.out_shape = tuple(self._build(self.in_shape, rng, dtype))
        return self.out_shape

    def _build(self, in_shape, rng, dtype):
        return in_shape

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def _param(self, value: np.ndarray, name: str) -> Tensor:
        t = Tensor(value, requires_grad=self.spec.trainable, dtype=value.dtype, name=name)
        self.params[name] = t
        return t

    def __repr__(self) -> str:
        return f"{self.kind}({self.in_shape} -> {self.out_shape})"


def _image_shape(layer: Layer, in_shape) -> tuple:
    if len(in_shape) != 3:
        raise F.DimensionError(f"{layer.kind}: expected (H, W, C) input, got {in_shape}")
    return in_shape


class Conv(Layer):
    def __init__(self, kernel: int, num_filters: int, stride: int = 1, trainable: bool = True, init_gain: float = 1.0):
        super().__init__(LayerSpec("Conv", (kernel, kernel), stride, num_filters, trainable, {"init_gain": init_gain}))

    def _build(self, in_shape, rng, dtype):
        h, w, c = _image_shape(self, in_shape)
        k, s, f = self.spec.kernel[0], self.spec.stride, self.spec.num_filters
        if k > h or k > w:
            raise F.DimensionError(f"Conv: kernel {k} exceeds input extent {h}x{w}")
        self._param(fan_in_uniform(rng, (k, k, c, f), k * k * c, self.spec.options["init_gain"], dtype), "weight")
        self._param(np.zeros(f, dtype=dtype), "bias")
        return ((h - k) // s + 1, (w - k) // s + 1, f)

    def forward(self, x):
        return F.conv2d(x, self.params["weight"], self.params["bias"], self.spec.stride)


class _Pool(Layer):
    op = None

    def __init__(self, kind: str, kernel: int | None, stride: int | None):
        # kernel=None means global pooling over the (square) spatial extent.
        options = {"global": kernel is None}
        super().__init__(LayerSpec(kind, (kernel or 1,), stride or kernel or 1, 0, False, options))

    def _build(self, in_shape, rng, dtype):
        h, w, c = _image_shape(self, in_shape)
        if self.spec.options["global"]:
            if h != w:
                raise F.DimensionError(f"{self.kind}: global pooling needs a square map, got {h}x{w}")
            self.spec.kernel = (h,)
            self.spec.stride = h
        k, s = self.spec.kernel[0], self.spec.stride
        if k > h:
            raise F.DimensionError(f"{self.kind}: kernel {k} exceeds input height {h}")
        return (F.pool_output_size(h, k, s), F.pool_output_size(w, k, s), c)

    def forward(self, x):
        return type(self).op(x, self.spec.kernel[0], self.spec.stride)


class MaxPool(_Pool):
    op = staticmethod(F.max_pool)

    def __init__(self, kernel: int = 2, stride: int | None = None):
        super().__init__("MaxPool", kernel, stride)


class AvgPool(_Pool):
    op = staticmethod(F.avg_pool)

    def __init__(self, kernel: int | None = 2, stride: int | None = None):
        super().__init__("AvgPool", kernel, stride)


class ReLU(Layer):
    def __init__(self):
        super().__init__(LayerSpec("ReLU"))

    def forward(self, x):
        return F.relu(x)


class Sigmoid(Layer):
    def __init__(self):
        super().__init__(LayerSpec("Sigmoid"))

    def forward(self, x):
        return F.sigmoid(x)


class Bias(Layer):
    """Additive bias.

    In the default mode one value per channel is added. With ``levels`` given,
    the layer instead subtracts each level from every input channel and stacks
    the results level-major along the channel axis (used for soft histogram
    thresholds).
    """

    def __init__(self, trainable: bool = True, levels=None):
        options = {}
        if levels is not None:
            options["levels"] = [float(v) for v in levels]
        super().__init__(LayerSpec("Bias", (), 1, len(options.get("levels", [])), trainable, options))

    def _build(self, in_shape, rng, dtype):
        if "levels" in self.spec.options:
            h, w, c = _image_shape(self, in_shape)
            self._param(np.asarray(self.spec.options["levels"], dtype=dtype), "levels")
            return (h, w, len(self.spec.options["levels"]) * c)
        self._param(np.zeros(in_shape[-1], dtype=dtype), "bias")
        return in_shape

    def forward(self, x):
        if "levels" in self.params:
            return F.subtract_levels(x, self.params["levels"])
        return F.add_bias(x, self.params["bias"])


class InnerProduct(Layer):
    def __init__(self, out_dim: int, trainable: bool = True, init_gain: float = 1.0):
        super().__init__(LayerSpec("InnerProduct", (), 1, out_dim, trainable, {"init_gain": init_gain}))

    def _build(self, in_shape, rng, dtype):
        d = int(np.prod(in_shape))
        out = self.spec.num_filters
        self._param(fan_in_uniform(rng, (d, out), d, self.spec.options["init_gain"], dtype), "weight")
        self._param(np.zeros(out, dtype=dtype), "bias")
        return (out,)

    def forward(self, x):
        return F.inner_product(x, self.params["weight"], self.params["bias"])


class SoftMax(Layer):
    def __init__(self):
        super().__init__(LayerSpec("SoftMax"))

    def _build(self, in_shape, rng, dtype):
        if len(in_shape) != 1:
            raise F.DimensionError(f"SoftMax: expected a vector input, got {in_shape}")
        return in_shape

    def forward(self, x):
        return F.softmax(x)


class Scale(Layer):
    """Multiply by a fixed constant."""

    def __init__(self, factor: float):
        super().__init__(LayerSpec("Scale", (), 1, 0, False, {"factor": float(factor)}))

    def forward(self, x):
        return F.scale(x, self.spec.options["factor"])


def dct_basis(c1: int, c2: int) -> np.ndarray:
    """8x8 orthonormal DCT-II basis image for vertical frequency c1, horizontal c2."""
    n = np.arange(8)
    a = lambda u: np.sqrt(1 / 8) if u == 0 else np.sqrt(2 / 8)
    col = a(c1) * np.cos(np.pi * (2 * n + 1) * c1 / 16)
    row = a(c2) * np.cos(np.pi * (2 * n + 1) * c2 / 16)
    return np.outer(col, row)


class DCTFilterbank(Layer):
    """Fixed stride-8 convolution with 8x8 DCT basis kernels, one channel per frequency."""

    def __init__(self, frequencies):
        freqs = [[int(a), int(b)] for a, b in frequencies]
        super().__init__(LayerSpec("DCTFilterbank", (8, 8), 8, len(freqs), False, {"frequencies": freqs}))

    def _build(self, in_shape, rng, dtype):
        h, w, c = _image_shape(self, in_shape)
        if c != 1:
            raise F.DimensionError(f"DCTFilterbank: expected one input channel, got {c}")
        if h % 8 or w % 8:
            raise F.DimensionError(f"DCTFilterbank: input extent {h}x{w} is not a multiple of 8")
        kernels = np.stack([dct_basis(a, b) for a, b in self.spec.options["frequencies"]], axis=-1)
        self.kernels = kernels[:, :, None, :].astype(dtype)
        return (h // 8, w // 8, self.spec.num_filters)

    def forward(self, x):
        return F.conv2d(x, Tensor(self.kernels, dtype=self.kernels.dtype), None, 8)


class DiffConv(Layer):
    """Fixed 1-D valid convolution along the level axis of level-major stacked channels.

    Input ``(1, 1, L*F)`` becomes ``(L-1, F, 1)``: rows are levels, columns channels.
    """

    def __init__(self, num_levels: int, kernel=(1.0, -1.0)):
        super().__init__(LayerSpec("DiffConv", (len(kernel),), 1, 0, False,
                                   {"num_levels": int(num_levels), "taps": [float(t) for t in kernel]}))

    def _build(self, in_shape, rng, dtype):
        levels = self.spec.options["num_levels"]
        if levels < len(self.spec.options["taps"]):
            raise F.DimensionError("DiffConv: fewer levels than kernel taps")
        total = int(np.prod(in_shape))
        if total % levels:
            raise F.DimensionError(f"DiffConv: {total} inputs do not split into {levels} levels")
        self._cols = total // levels
        return (levels - len(self.spec.options["taps"]) + 1, self._cols, 1)

    def forward(self, x):
        n = x.shape[0]
        levels = self.spec.options["num_levels"]
        z = F.diff_conv(F.reshape(x, (n, levels, self._cols)), self.spec.options["taps"])
        return F.reshape(z, (n,) + self.out_shape)


def layer_from_spec(spec: LayerSpec) -> Layer:
    o = spec.options
    if spec.kind == "Conv":
        layer = Conv(spec.kernel[0], spec.num_filters, spec.stride, spec.trainable, o.get("init_gain", 1.0))
    elif spec.kind == "MaxPool":
        layer = MaxPool(None if o.get("global") else spec.kernel[0], spec.stride)
    elif spec.kind == "AvgPool":
        layer = AvgPool(None if o.get("global") else spec.kernel[0], spec.stride)
    elif spec.kind == "ReLU":
        layer = ReLU()
    elif spec.kind == "Sigmoid":
        layer = Sigmoid()
    elif spec.kind == "Bias":
        layer = Bias(spec.trainable, o.get("levels"))
    elif spec.kind == "InnerProduct":
        layer = InnerProduct(spec.num_filters, spec.trainable, o.get("init_gain", 1.0))
    elif spec.kind == "SoftMax":
        layer = SoftMax()
    elif spec.kind == "DCTFilterbank":
        layer = DCTFilterbank(o["frequencies"])
    elif spec.kind == "Scale":
        layer = Scale(o["factor"])
    else:
        layer = DiffConv(o["num_levels"], o["taps"])
    return layer
