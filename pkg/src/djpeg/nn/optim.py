from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np


@dataclass
class SgdConfig:
    batch_size: int = 128
    momentum: float = 0.9
    lr0: float = 0.01
    decay_per_iteration: float = 0.9999
    max_epochs: int = 30
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if not 0 < self.decay_per_iteration <= 1:
            raise ValueError("decay_per_iteration must lie in (0, 1]")

    @classmethod
    def for_patch_size(cls, B: int, **overrides) -> "SgdConfig":
        """Defaults with the learning rate picked by patch size (0.01 up to 64, else 0.001)."""
        kw = {"lr0": 0.01 if B <= 64 else 0.001}
        kw.update(overrides)
        return cls(**kw)

    def to_dict(self) -> dict:
        return asdict(self)


def learning_rate(config: SgdConfig, iteration: int) -> float:
    return config.lr0 * config.decay_per_iteration ** iteration


def sgd_step(params, grads, velocity, config: SgdConfig, iteration: int, names=None) -> float:
    """In-place momentum update of parallel lists of arrays; returns the rate used."""
    names = names or [f"param{i}" for i in range(len(params))]
    for name, g in zip(names, grads):
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter {name}")
    lr = learning_rate(config, iteration)
    for p, g, v in zip(params, grads, velocity):
        cast = p.dtype.type
        v *= cast(config.momentum)
        v -= cast(lr) * g
        p += v
    return lr


class SGD:
    """Momentum SGD: ``v <- m*v - lr_t*g``, ``p <- p + v``, with ``lr_t = lr0 * decay**t``."""

    def __init__(self, named_params, config: SgdConfig):
        self.params = list(named_params)
        self.config = config
        self.velocity = {name: np.zeros_like(t.data) for name, t in self.params}
        self.iteration = 0

    def step(self) -> float:
        live = [(n, t) for n, t in self.params if t.grad is not None]
        lr = sgd_step([t.data for _, t in live], [t.grad for _, t in live],
                      [self.velocity[n] for n, _ in live], self.config, self.iteration,
                      names=[n for n, _ in live])
        self.iteration += 1
        return lr
