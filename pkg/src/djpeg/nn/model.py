from __future__ import annotations

import numpy as np

from . import functional as F
from .layers import Layer, LayerSpec, layer_from_spec
from .tensor import StateError, Tensor, as_tensor


class Sequential:
    """A chain of layers with a recorded input shape.

    ``forward`` runs every layer; ``logits`` stops before a trailing SoftMax so
    training can use the fused, numerically stable cross-entropy.
    """

    def __init__(self, layers: list[Layer]):
        for i, layer in enumerate(layers):
            if layer.kind == "SoftMax" and i != len(layers) - 1:
                raise ValueError("SoftMax may only appear as the final layer")
        self.layers = list(layers)
        self.input_shape: tuple | None = None
        self.dtype = None
        self._last_output: Tensor | None = None

    def build(self, input_shape, seed: int = 0, dtype=np.float32) -> list[tuple]:
        """Allocate parameters and return the per-layer output shapes."""
        rng = np.random.default_rng(seed)
        self.input_shape = tuple(input_shape)
        self.dtype = np.dtype(dtype)
        shape = self.input_shape
        trace = []
        for layer in self.layers:
            shape = layer.build(shape, rng, self.dtype)
            trace.append(shape)
        return trace

    def trace(self) -> list[tuple]:
        return [layer.out_shape for layer in self.layers]

    def named_params(self):
        for i, layer in enumerate(self.layers):
            for name, t in layer.params.items():
                yield f"{i}.{layer.kind}.{name}", t

    def trainable_params(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self.named_params() if t.requires_grad]

    def zero_grad(self) -> None:
        for _, t in self.named_params():
            t.grad = None

    def _check_input(self, x: Tensor) -> None:
        if self.input_shape is None:
            raise StateError("model has not been built")
        if tuple(x.shape[1:]) != self.input_shape:
            raise F.DimensionError(f"model expects per-sample shape {self.input_shape}, got {tuple(x.shape[1:])}")

    def run(self, x, start: int = 0, stop: int | None = None) -> Tensor:
        x = as_tensor(x, dtype=self.dtype)
        if start == 0:
            self._check_input(x)
        for layer in self.layers[start:stop]:
            x = layer.forward(x)
        return x

    def forward(self, x) -> Tensor:
        out = self.run(x)
        self._last_output = out
        return out

    __call__ = forward

    def logits(self, x, start: int = 0) -> Tensor:
        """Output of the last layer before a trailing SoftMax, optionally starting mid-network."""
        stop = -1 if self.layers and self.layers[-1].kind == "SoftMax" else None
        out = self.run(x, start, stop)
        self._last_output = out
        return out

    def backward(self, loss: Tensor) -> None:
        """Backpropagate ``loss``; parameters the loss does not reach get zero gradients."""
        if self._last_output is None:
            raise StateError("backward() called before any forward pass")
        self.zero_grad()
        if loss.requires_grad:
            loss.backward()
        for _, t in self.trainable_params():
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
        self._last_output = None

    def specs(self) -> list[LayerSpec]:
        return [layer.spec for layer in self.layers]

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.named_params()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for n, t in self.named_params():
            if n not in state:
                raise KeyError(f"missing parameter {n}")
            if state[n].shape != t.shape:
                raise F.DimensionError(f"parameter {n}: stored shape {state[n].shape} != {t.shape}")
            t.data = state[n].astype(t.dtype, copy=True)

    @classmethod
    def from_specs(cls, specs: list[LayerSpec]) -> "Sequential":
        return cls([layer_from_spec(s) for s in specs])

    def __repr__(self) -> str:
        body = "\n  ".join(repr(layer) for layer in self.layers)
        return f"Sequential(\n  {body}\n)"
