"""Grayscale source corpora: PGM/PNG reading and a procedural never-compressed corpus."""
from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

log = logging.getLogger(__name__)

EXTENSIONS = (".pgm", ".png")


def read_pgm(path) -> np.ndarray:
    """Read an 8-bit binary (P5) PGM."""
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval > 255:
        raise ValueError(f"{path}: only 8-bit PGM is supported (maxval {maxval})")
    pos += 1
    return np.frombuffer(data[pos:pos + w * h], dtype=np.uint8).reshape(h, w).copy()


def write_pgm(path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=np.uint8)
    h, w = image.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + image.tobytes())


def read_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        return read_pgm(path)
    with Image.open(path) as im:
        if im.mode not in ("L", "I;16", "I"):
            raise ValueError(f"{path}: expected a grayscale image, got mode {im.mode}")
        return np.asarray(im.convert("L"))


def load_corpus(directory) -> list[tuple[str, np.ndarray]]:
    """All grayscale PGM/PNG files in ``directory`` as ``(source_id, image)``, sorted by name."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"corpus directory {directory} does not exist")
    items = []
    for path in sorted(directory.iterdir()):
        if path.suffix.lower() in EXTENSIONS:
            items.append((path.stem, read_image(path)))
    if not items:
        raise ValueError(f"no .pgm or .png files in {directory}")
    return items


def _fractal_noise(rng: np.random.Generator, size: int, beta: float) -> np.ndarray:
    """Zero-mean, unit-variance Gaussian field with a 1/f^beta amplitude spectrum."""
    f = np.fft.fftfreq(size)
    radius = np.hypot(f[:, None], f[None, :])
    radius[0, 0] = 1.0
    spectrum = (rng.standard_normal((size, size)) + 1j * rng.standard_normal((size, size))) / radius ** beta
    spectrum[0, 0] = 0
    field = np.fft.ifft2(spectrum).real
    return field / field.std()


def dead_leaves_image(rng: np.random.Generator, size: int = 512, n_leaves: int = 1200) -> np.ndarray:
    """A natural-image surrogate: occluding shaded leaves with power-law sizes,
    region-dependent fractal texture, optical blur and sensor noise."""
    img = np.full((size, size), rng.uniform(60, 190))
    texture_gain = np.full((size, size), rng.uniform(0, 10))
    u = rng.uniform(size=n_leaves)
    rmin, rmax = 3.0, size / 3
    # p(r) ~ r^-3 via inverse CDF
    radii = 1 / np.sqrt(1 / rmin ** 2 - u * (1 / rmin ** 2 - 1 / rmax ** 2))
    yy, xx = np.mgrid[0:size, 0:size]
    for r in np.sort(radii)[::-1]:
        cy, cx = rng.uniform(-r, size + r, size=2)
        ry, rx = r * rng.uniform(0.5, 1.5, size=2)
        y0, y1 = int(max(cy - ry, 0)), int(min(cy + ry + 1, size))
        x0, x1 = int(max(cx - rx, 0)), int(min(cx + rx + 1, size))
        if y0 >= y1 or x0 >= x1:
            continue
        ys, xs = yy[y0:y1, x0:x1], xx[y0:y1, x0:x1]
        inside = ((ys - cy) / ry) ** 2 + ((xs - cx) / rx) ** 2 <= 1
        if rng.uniform() < 0.3:
            inside = np.ones_like(inside)  # rectangular leaf
        gy, gx = rng.normal(0, 0.6, size=2)
        shade = rng.uniform(10, 245) + gy * (ys - cy) + gx * (xs - cx)
        img[y0:y1, x0:x1] = np.where(inside, shade, img[y0:y1, x0:x1])
        texture_gain[y0:y1, x0:x1] = np.where(inside, rng.choice([0.0, 2.0, 6.0, 14.0]), texture_gain[y0:y1, x0:x1])
    texture = _fractal_noise(rng, size, rng.uniform(0.8, 1.4))
    img = img + texture_gain * texture + 12 * _fractal_noise(rng, size, 1.8)
    img = gaussian_filter(img, sigma=rng.uniform(0.5, 1.0))
    img = img + rng.normal(0, rng.uniform(0.5, 2.0), size=img.shape)
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def synthetic_corpus(count: int, size: int = 512, seed: int = 0) -> list[tuple[str, np.ndarray]]:
    """``count`` independent dead-leaves images; image ``i`` depends only on (seed, i)."""
    return [(f"synth{seed:04d}_{i:05d}", dead_leaves_image(np.random.default_rng([seed, i]), size))
            for i in range(count)]


def write_corpus(directory, items) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for source_id, image in items:
        write_pgm(directory / f"{source_id}.pgm", image)
    log.info("wrote %d images to %s", len(items), directory)
