"""Baseline JPEG simulation at the DCT-coefficient level (luminance only).

Entropy coding is lossless, so compression is modelled as blockwise DCT,
quantization with an IJG-scaled table, dequantization and inverse DCT.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Luminance table, ITU-T T.81 Annex K, Table K.1.
BASE_LUMINANCE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.int64)

MAX_SHIFT = 6


def _dct_matrix() -> np.ndarray:
    n = np.arange(8)
    c = np.sqrt(2 / 8) * np.cos(np.pi * (2 * n[None, :] + 1) * n[:, None] / 16)
    c[0] /= np.sqrt(2)
    return c


DCT_MATRIX = _dct_matrix()


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quant_table_for(qf: int) -> np.ndarray:
    """IJG quality scaling of the base luminance table, entries clamped to [1, 255]."""
    if not 1 <= qf <= 100:
        raise ValueError(f"quality factor must lie in [1, 100], got {qf}")
    scale = 5000 // qf if qf < 50 else 200 - 2 * qf
    return np.clip((BASE_LUMINANCE * scale + 50) // 100, 1, 255)


@dataclass(frozen=True)
class QFPair:
    """Compression history. ``qf1=None`` means single compression; ``shift`` is (r, c)."""

    qf1: int | None
    qf2: int
    shift: tuple[int, int] | None = None

    def __post_init__(self):
        for q in (self.qf1, self.qf2):
            if q is not None and not 1 <= q <= 100:
                raise ValueError(f"quality factor must lie in [1, 100], got {q}")
        if self.shift is not None:
            r, c = self.shift
            if not (1 <= r <= MAX_SHIFT and 1 <= c <= MAX_SHIFT):
                raise ValueError(f"grid shift must lie in 1..{MAX_SHIFT}, got {self.shift}")

    @property
    def aligned(self) -> bool:
        return self.shift is None


def _check_blocks(image: np.ndarray) -> None:
    if image.ndim != 2:
        raise ValueError(f"expected a 2-D grayscale image, got shape {image.shape}")
    h, w = image.shape
    if h % 8 or w % 8:
        raise ValueError(f"image extent {h}x{w} is not a multiple of 8")


def dct8_blocks(image: np.ndarray) -> np.ndarray:
    """Level-shifted orthonormal 8x8 DCT-II of every block.

    Returns an ``(H/8, W/8, 64)`` array; the last axis is row-major ``8*c1 + c2``
    with ``c1`` the vertical frequency.
    """
    image = np.asarray(image, dtype=np.float64)
    _check_blocks(image)
    h, w = image.shape
    blocks = (image - 128.0).reshape(h // 8, 8, w // 8, 8).transpose(0, 2, 1, 3)
    coef = DCT_MATRIX @ blocks @ DCT_MATRIX.T
    return coef.reshape(h // 8, w // 8, 64)


def idct8_blocks(coef: np.ndarray) -> np.ndarray:
    """Inverse of :func:`dct8_blocks` (including the +128 level shift); no rounding."""
    coef = np.asarray(coef, dtype=np.float64)
    hb, wb, _ = coef.shape
    blocks = DCT_MATRIX.T @ coef.reshape(hb, wb, 8, 8) @ DCT_MATRIX
    return blocks.transpose(0, 2, 1, 3).reshape(hb * 8, wb * 8) + 128.0


def quantize(coef: np.ndarray, table: np.ndarray) -> np.ndarray:
    return round_half_away(coef / table.reshape(64))


def dequantize(levels: np.ndarray, table: np.ndarray) -> np.ndarray:
    return levels * table.reshape(64)


def to_pixels(x: np.ndarray) -> np.ndarray:
    return np.clip(round_half_away(x), 0, 255).astype(np.uint8)


def compress_decompress(image: np.ndarray, qf: int) -> np.ndarray:
    """One JPEG round trip at quality ``qf``; returns uint8 pixels.

    Extents that are not multiples of 8 are padded by edge replication (as an
    encoder does for partial blocks) and cropped back afterwards.
    """
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError(f"expected a 2-D grayscale image, got shape {image.shape}")
    h, w = image.shape
    ph, pw = -h % 8, -w % 8
    padded = np.pad(image, ((0, ph), (0, pw)), mode="edge") if ph or pw else image
    table = quant_table_for(qf)
    coef = dequantize(quantize(dct8_blocks(padded), table), table)
    return to_pixels(idct8_blocks(coef))[:h, :w]


def double_compress(source: np.ndarray, pair: QFPair, B: int, rng: np.random.Generator | None = None):
    """Compress at ``qf1``, optionally crop at a grid shift, compress at ``qf2``.

    ``pair.shift`` set to ``None`` with ``rng`` given and ``source`` larger than
    ``B`` draws the shift uniformly from ``{1..6}^2``. Returns ``(patch, provenance)``.
    """
    if pair.qf1 is None:
        raise ValueError("double_compress needs qf1")
    source = np.asarray(source)
    shift = pair.shift
    if shift is None and rng is not None and source.shape[0] > B:
        shift = tuple(int(v) for v in rng.integers(1, MAX_SHIFT + 1, size=2))
    first = compress_decompress(source, pair.qf1)
    if shift is None:
        if source.shape != (B, B):
            raise ValueError(f"aligned double compression needs a {B}x{B} source, got {source.shape}")
        r = c = 0
        crop = first
    else:
        r, c = shift
        if source.shape[0] < B + 7 or source.shape[1] < B + 7:
            raise ValueError(f"shifted double compression needs a source of at least {B + 7}x{B + 7}, got {source.shape}")
        crop = first[r:r + B, c:c + B]
    out = compress_decompress(crop, pair.qf2)
    return out, {"qf1": pair.qf1, "qf2": pair.qf2, "r": r, "c": c}


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2)
    return float("inf") if mse == 0 else float(10 * np.log10(255.0 ** 2 / mse))
