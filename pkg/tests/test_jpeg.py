import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from djpeg.jpeg import (
    BASE_LUMINANCE, QFPair, compress_decompress, dct8_blocks, dequantize, double_compress,
    idct8_blocks, psnr, quant_table_for, quantize, round_half_away,
)


def pil_jpeg(image, qf):
    """Reference libjpeg round trip through Pillow."""
    buf = io.BytesIO()
    Image.fromarray(image).save(buf, "JPEG", quality=qf)
    buf.seek(0)
    with Image.open(buf) as im:
        return np.asarray(im), np.asarray(im.quantization[0]).reshape(8, 8)


@pytest.fixture(scope="module")
def natural_patches(small_corpus):
    rng = np.random.default_rng(0)
    out = []
    for k in range(100):
        im = small_corpus[k % len(small_corpus)][1]
        y, x = rng.integers(0, im.shape[0] - 71, size=2)
        out.append(im[y:y + 71, x:x + 71])
    return out


def dq_periodicity(patches, freq=(0, 1)) -> float:
    """Strongest normalised Fourier component (periods 2..15) of one coefficient's integer histogram."""
    k = 8 * freq[0] + freq[1]
    levels = np.concatenate([np.round(dct8_blocks(p)[..., k]).ravel() for p in patches])
    bins = np.arange(-40, 41)
    h = np.array([(levels == b).sum() for b in bins], dtype=float)
    return max(abs((h * np.exp(-2j * np.pi * bins / p)).sum()) / h.sum() for p in range(2, 16))


# quantization tables

def test_qf50_is_base_table():
    assert np.array_equal(quant_table_for(50), BASE_LUMINANCE)


def test_qf100_all_ones():
    assert np.all(quant_table_for(100) == 1)


def test_qf75_dc_entry():
    assert quant_table_for(75)[0, 0] == 8


@pytest.mark.parametrize("qf", [1, 10, 25, 49, 50, 51, 60, 75, 85, 90, 95, 98, 100])
def test_tables_match_libjpeg(qf):
    _, ref = pil_jpeg(np.zeros((16, 16), np.uint8), qf)
    assert np.array_equal(quant_table_for(qf), ref)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 99), st.integers(1, 99))
def test_tables_monotone(a, b):
    lo, hi = min(a, b), max(a, b) + 1
    assert np.all(quant_table_for(hi) <= quant_table_for(lo))
    assert np.all((quant_table_for(a) >= 1) & (quant_table_for(a) <= 255))


@pytest.mark.parametrize("qf", [0, 101, -5])
def test_qf_out_of_range(qf):
    with pytest.raises(ValueError):
        quant_table_for(qf)


def test_round_half_away_from_zero():
    assert round_half_away(np.array([0.5, 1.5, -0.5, -2.5, 2.49])).tolist() == [1, 2, -1, -3, 2]


# DCT

def test_constant_128_block_is_zero():
    assert np.all(np.abs(dct8_blocks(np.full((8, 8), 128.0))) < 1e-12)


def test_dct_round_trip(rng):
    x = rng.uniform(0, 255, size=(24, 16))
    assert np.max(np.abs(idct8_blocks(dct8_blocks(x)) - x)) < 1e-4


def test_dct_matches_direct_summation(rng):
    x = rng.uniform(0, 255, size=(8, 8))
    coef = dct8_blocks(x)[0, 0].reshape(8, 8)
    n = np.arange(8)
    a = lambda u: np.sqrt(1 / 8) if u == 0 else np.sqrt(2 / 8)
    direct = np.zeros((8, 8))
    for u in range(8):
        for v in range(8):
            basis = np.outer(np.cos(np.pi * (2 * n + 1) * u / 16), np.cos(np.pi * (2 * n + 1) * v / 16))
            direct[u, v] = a(u) * a(v) * np.sum((x - 128) * basis)
    assert np.max(np.abs(coef - direct)) < 1e-8


def test_parseval(rng):
    x = rng.uniform(0, 255, size=(16, 16))
    coef = dct8_blocks(x)
    blocks = (x - 128).reshape(2, 8, 2, 8).transpose(0, 2, 1, 3).reshape(2, 2, 64)
    e_pix, e_dct = (blocks ** 2).sum(-1), (coef ** 2).sum(-1)
    assert np.max(np.abs(e_pix - e_dct) / e_pix) < 1e-4


def test_dct_rejects_non_multiple_of_8():
    with pytest.raises(ValueError, match="multiple of 8"):
        dct8_blocks(np.zeros((12, 16)))


# compression

def test_qf100_is_near_lossless(rng):
    x = rng.integers(0, 256, size=(64, 64)).astype(np.uint8)
    assert np.mean(np.abs(compress_decompress(x, 100).astype(int) - x)) < 1.0


def test_requantization_identity_at_coefficient_level(rng):
    table = quant_table_for(70)
    levels = quantize(dct8_blocks(rng.uniform(0, 255, (32, 32))), table)
    deq = dequantize(levels, table)
    assert np.array_equal(quantize(deq, table), levels)


def test_qf50_psnr_against_libjpeg(natural_patches):
    img = natural_patches[0][:64, :64]
    ours = compress_decompress(img, 50)
    ref, _ = pil_jpeg(img, 50)
    assert 28 <= psnr(img, ours) <= 45
    assert abs(psnr(img, ours) - psnr(img, ref)) < 1.0


def test_output_range_and_dtype(rng):
    x = rng.integers(0, 256, size=(16, 16)).astype(np.uint8)
    out = compress_decompress(x, 10)
    assert out.dtype == np.uint8 and out.shape == x.shape


def test_aligned_double_at_qf100_is_near_input(natural_patches):
    src = natural_patches[1][:64, :64]
    out, prov = double_compress(src, QFPair(100, 100), 64)
    assert prov == {"qf1": 100, "qf2": 100, "r": 0, "c": 0}
    assert np.mean(np.abs(out.astype(int) - src)) < 1.0


def test_shifted_provenance_and_grid(natural_patches):
    src = natural_patches[2]
    out, prov = double_compress(src, QFPair(70, 90, (3, 5)), 64)
    assert (prov["r"], prov["c"]) == (3, 5) and out.shape == (64, 64)
    first = compress_decompress(src, 70)
    assert np.array_equal(out, compress_decompress(first[3:67, 5:69], 90))


def test_shift_drawn_from_rng_in_range(natural_patches):
    rng = np.random.default_rng(3)
    seen = set()
    for _ in range(200):
        _, prov = double_compress(natural_patches[3], QFPair(70, 90), 64, rng)
        seen.add((prov["r"], prov["c"]))
    assert seen <= {(r, c) for r in range(1, 7) for c in range(1, 7)}
    assert len(seen) > 25


def test_dq_pattern_for_aligned_double(natural_patches):
    double = [double_compress(p[:64, :64], QFPair(60, 95), 64)[0] for p in natural_patches]
    single = [compress_decompress(p[:64, :64], 95) for p in natural_patches]
    for freq in [(0, 1), (1, 0), (1, 1)]:
        assert dq_periodicity(double, freq) > 0.5
        assert dq_periodicity(single, freq) < 0.2


def test_shifted_differs_from_aligned(natural_patches):
    rng = np.random.default_rng(11)
    for p in natural_patches[:20]:
        aligned, _ = double_compress(p[:64, :64], QFPair(80, 90), 64)
        shifted, prov = double_compress(p, QFPair(80, 90), 64, rng)
        assert (prov["r"], prov["c"]) != (0, 0)
        assert not np.array_equal(aligned, shifted)


def test_shifted_needs_margin():
    with pytest.raises(ValueError, match="71x71"):
        double_compress(np.zeros((68, 68), np.uint8), QFPair(70, 90, (2, 2)), 64)


@pytest.mark.parametrize("shift", [(0, 3), (7, 1), (3, 0)])
def test_qfpair_rejects_shift_out_of_range(shift):
    with pytest.raises(ValueError):
        QFPair(70, 90, shift)
