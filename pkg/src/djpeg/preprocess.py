"""Optional input transforms: training-set mean subtraction and wavelet noise residuals."""
from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass

import numpy as np
import pywt
from scipy.ndimage import uniform_filter


@dataclass
class MeanImage:
    mean: np.ndarray
    count: int

    @classmethod
    def from_images(cls, images: np.ndarray) -> "MeanImage":
        """Per-pixel mean over a stack of images shaped (N, H, W)."""
        images = np.asarray(images)
        if images.ndim != 3 or len(images) == 0:
            raise ValueError(f"expected a non-empty (N, H, W) stack, got {images.shape}")
        total = np.zeros(images.shape[1:], dtype=np.float64)
        for start in range(0, len(images), 4096):
            total += images[start:start + 4096].sum(axis=0, dtype=np.float64)
        return cls((total / len(images)).astype(np.float32), len(images))


def subtract_mean(image: np.ndarray, mean: MeanImage) -> np.ndarray:
    """``image - mean`` as float32, unclamped. Works on one image or a stack."""
    image = np.asarray(image, dtype=np.float32)
    if image.shape[-2:] != mean.mean.shape:
        raise ValueError(f"image shape {image.shape[-2:]} does not match mean shape {mean.mean.shape}")
    return image - mean.mean


@dataclass
class DenoiserConfig:
    levels: int = 4
    wavelet: str = "db4"
    noise_variance: float = 9.0
    window_sizes: tuple = (3, 5, 7, 9)

    def __post_init__(self):
        self.window_sizes = tuple(int(w) for w in self.window_sizes)
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.noise_variance <= 0:
            raise ValueError("noise_variance must be positive")
        if any(w % 2 == 0 for w in self.window_sizes) or list(self.window_sizes) != sorted(set(self.window_sizes)):
            raise ValueError("window sizes must be odd and strictly increasing")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["window_sizes"] = list(self.window_sizes)
        return d


def shrink_subband(w: np.ndarray, cfg: DenoiserConfig) -> np.ndarray:
    """Locally adaptive Wiener shrinkage of one detail subband.

    The signal variance is the smallest windowed energy estimate over all
    window sizes, minus the noise variance, floored at zero.
    """
    energy = w * w
    lead = (1,) * (w.ndim - 2)
    local = np.min([uniform_filter(energy, size=lead + (k, k), mode="reflect") for k in cfg.window_sizes], axis=0)
    signal = np.maximum(local - cfg.noise_variance, 0.0)
    return w * signal / (signal + cfg.noise_variance)


def _check_size(shape, cfg: DenoiserConfig) -> None:
    if min(shape[-2:]) < 2 ** cfg.levels:
        raise ValueError(f"image {shape} is smaller than the {cfg.levels}-level transform support {2 ** cfg.levels}")


def dwt(image: np.ndarray, cfg: DenoiserConfig):
    _check_size(np.shape(image), cfg)
    with warnings.catch_warnings():
        # small patches trip pywt's "level too high" boundary-effect warning
        warnings.simplefilter("ignore", UserWarning)
        return pywt.wavedec2(np.asarray(image, dtype=np.float64), cfg.wavelet, mode="symmetric",
                             level=cfg.levels, axes=(-2, -1))


def idwt(coeffs, shape, cfg: DenoiserConfig) -> np.ndarray:
    out = pywt.waverec2(coeffs, cfg.wavelet, mode="symmetric", axes=(-2, -1))
    return out[..., :shape[-2], :shape[-1]]


def wavelet_denoise(image: np.ndarray, cfg: DenoiserConfig | None = None) -> np.ndarray:
    """MMSE wavelet-domain estimate of the clean image. Accepts (H, W) or (..., H, W)."""
    cfg = cfg or DenoiserConfig()
    image = np.asarray(image, dtype=np.float64)
    coeffs = dwt(image, cfg)
    shrunk = [coeffs[0]] + [tuple(shrink_subband(band, cfg) for band in detail) for detail in coeffs[1:]]
    return idwt(shrunk, image.shape, cfg)


def noise_residual(image: np.ndarray, cfg: DenoiserConfig | None = None) -> np.ndarray:
    """``image - wavelet_denoise(image)`` as float32."""
    image = np.asarray(image, dtype=np.float64)
    return (image - wavelet_denoise(image, cfg)).astype(np.float32)


def noise_residuals(images: np.ndarray, cfg: DenoiserConfig | None = None) -> np.ndarray:
    cfg = cfg or DenoiserConfig()
    out = np.empty(np.shape(images), dtype=np.float32)
    for start in range(0, len(images), 256):
        out[start:start + 256] = noise_residual(images[start:start + 256], cfg)
    return out
