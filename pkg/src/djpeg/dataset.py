"""Balanced single/double-compressed patch sets with source-disjoint splits.

On disk a dataset is a directory with ``patches.bin`` (raw uint8 patches,
row-major, back to back) and ``manifest.jsonl`` (a header line followed by one
record per patch).
"""
from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .jpeg import MAX_SHIFT, QFPair, compress_decompress, double_compress

log = logging.getLogger(__name__)

FORMAT = "djpeg-patches"
VERSION = 1
MARGIN = 7
SPLITS = ("train", "val")


def default_qf1_set(qf2: int) -> list[int]:
    return [60, 70, 80, 90, 98] if qf2 == 95 else [50, 60, 70, 80, 90]


class InsufficientCorpusError(ValueError):
    pass


@dataclass
class DatasetSpec:
    B: int = 64
    qf2: int = 75
    qf1_set: list = field(default_factory=list)
    alignment: str = "aligned"
    train_count: int = 20000
    val_count: int = 6000
    seed: int = 0
    val_fraction: float = 0.25

    def __post_init__(self):
        if not self.qf1_set:
            self.qf1_set = default_qf1_set(self.qf2)
        self.qf1_set = [int(q) for q in self.qf1_set]
        if self.alignment not in ("aligned", "shifted", "mixed"):
            raise ValueError(f"alignment must be aligned, shifted or mixed, got {self.alignment!r}")
        if self.B % 8:
            raise ValueError(f"patch size {self.B} is not a multiple of 8")
        for n in (self.train_count, self.val_count):
            if n < 0 or n % 2:
                raise ValueError(f"split sizes must be even and non-negative, got {n}")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")

    @property
    def needs_margin(self) -> bool:
        return self.alignment != "aligned"

    def to_dict(self) -> dict:
        return asdict(self)


def source_split(source_id: str, val_fraction: float) -> str:
    """Deterministic split of a source image, stable across datasets built from one corpus."""
    h = int.from_bytes(hashlib.sha1(source_id.encode()).digest()[:8], "big") / 2 ** 64
    return "val" if h < val_fraction else "train"


def sample_patches(corpus, B: int, need_margin: bool, rng: np.random.Generator, count: int):
    """Uniformly placed crops of size B (or B+7 with margin) from randomly chosen sources.

    Sources are weighted by their number of valid crop positions. Returns
    ``(crops, source_ids, skipped)``.
    """
    size = B + MARGIN if need_margin else B
    usable = [(sid, im) for sid, im in corpus if im.shape[0] >= size and im.shape[1] >= size]
    skipped = len(corpus) - len(usable)
    if not usable:
        raise InsufficientCorpusError(f"no source image is at least {size}x{size}")
    weights = np.array([(im.shape[0] - size + 1) * (im.shape[1] - size + 1) for _, im in usable], dtype=float)
    picks = rng.choice(len(usable), size=count, p=weights / weights.sum())
    crops, ids = [], []
    for k in picks:
        sid, im = usable[k]
        y = rng.integers(0, im.shape[0] - size + 1)
        x = rng.integers(0, im.shape[1] - size + 1)
        crops.append(im[y:y + size, x:x + size])
        ids.append(sid)
    return crops, ids, skipped


def make_single(patch: np.ndarray, qf2: int) -> tuple[np.ndarray, dict]:
    return compress_decompress(patch, qf2), {"label": 0, "qf1": None, "qf2": qf2, "r": 0, "c": 0}


def make_double(patch: np.ndarray, qf1: int, qf2: int, alignment: str, B: int,
                rng: np.random.Generator) -> tuple[np.ndarray, dict]:
    """Aligned: ``patch`` is B x B. Shifted: ``patch`` is at least (B+7)^2 and (r, c) is drawn from rng."""
    if alignment == "aligned":
        out, prov = double_compress(patch[:B, :B], QFPair(qf1, qf2), B)
    else:
        shift = tuple(int(v) for v in rng.integers(1, MAX_SHIFT + 1, size=2))
        out, prov = double_compress(patch, QFPair(qf1, qf2, shift), B)
    return out, dict(prov, label=1)


def _plan(spec: DatasetSpec, split: str, count: int) -> list[dict]:
    """Per-patch recipe: class balanced, QF1 balanced (within 1) and alignment balanced."""
    rng = np.random.default_rng([spec.seed, SPLITS.index(split), 7])
    half = count // 2
    offset = int(rng.integers(len(spec.qf1_set)))
    plans = [{"label": 0, "qf1": None, "align": "aligned"} for _ in range(half)]
    for i in range(half):
        if spec.alignment == "mixed":
            align = "aligned" if i % 2 == 0 else "shifted"
        else:
            align = spec.alignment
        plans.append({"label": 1, "qf1": spec.qf1_set[(i + offset) % len(spec.qf1_set)], "align": align})
    order = rng.permutation(len(plans))
    return [plans[k] for k in order]


_WORKER_SOURCES = None


def _init_worker(sources):
    global _WORKER_SOURCES
    _WORKER_SOURCES = sources


def _make_one(args):
    spec, split, index, plan = args
    sources = _WORKER_SOURCES[split]
    rng = np.random.default_rng([spec.seed, SPLITS.index(split), index])
    need_margin = plan["label"] == 1 and plan["align"] == "shifted"
    (crop,), (sid,), _ = sample_patches(sources, spec.B, need_margin, rng, 1)
    if plan["label"] == 0:
        patch, prov = make_single(crop, spec.qf2)
    else:
        patch, prov = make_double(crop, plan["qf1"], spec.qf2, plan["align"], spec.B, rng)
    return patch, dict(prov, split=split, source=sid)


class Dataset:
    """Patches (N, B, B) uint8 plus per-patch provenance arrays."""

    def __init__(self, images: np.ndarray, records: list[dict], spec: DatasetSpec | None = None):
        self.images = images
        self.records = records
        self.spec = spec
        self.labels = np.array([r["label"] for r in records], dtype=np.int64)
        self.qf1 = np.array([-1 if r["qf1"] is None else r["qf1"] for r in records], dtype=np.int64)
        self.qf2 = np.array([r["qf2"] for r in records], dtype=np.int64)
        self.shifts = np.array([(r["r"], r["c"]) for r in records], dtype=np.int64).reshape(-1, 2)
        self.splits = np.array([r["split"] for r in records])
        self.sources = [r["source"] for r in records]

    def __len__(self) -> int:
        return len(self.records)

    @property
    def B(self) -> int:
        return self.images.shape[1]

    def subset(self, mask) -> "Dataset":
        idx = np.flatnonzero(mask)
        return Dataset(np.asarray(self.images[idx]), [self.records[i] for i in idx], self.spec)

    def split(self, name: str) -> "Dataset":
        return self.subset(self.splits == name)

    def pair_sets(self) -> dict[tuple[int, int], "Dataset"]:
        """Balanced per-(qf1, qf2) sets: each H1 pair group plus an equal number of H0 patches.

        H0 patches are dealt out to the pairs of their QF2 in round-robin order.
        """
        out = {}
        for q2 in np.unique(self.qf2):
            single = np.flatnonzero((self.labels == 0) & (self.qf2 == q2))
            pairs = sorted({int(q) for q in self.qf1[(self.labels == 1) & (self.qf2 == q2)]})
            for k, q1 in enumerate(pairs):
                dbl = np.flatnonzero((self.labels == 1) & (self.qf2 == q2) & (self.qf1 == q1))
                sgl = single[k::len(pairs)][: len(dbl)]
                mask = np.zeros(len(self), dtype=bool)
                mask[dbl] = True
                mask[sgl] = True
                out[(q1, int(q2))] = self.subset(mask)
        return out

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "patches.bin").write_bytes(np.ascontiguousarray(self.images, dtype=np.uint8).tobytes())
        header = {"format": FORMAT, "version": VERSION, "B": self.B, "count": len(self),
                  "spec": self.spec.to_dict() if self.spec else None}
        with open(directory / "manifest.jsonl", "w") as fh:
            fh.write(json.dumps(header, sort_keys=True) + "\n")
            for i, rec in enumerate(self.records):
                fh.write(json.dumps(dict(rec, offset=i * self.B * self.B), sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory) -> "Dataset":
        directory = Path(directory)
        with open(directory / "manifest.jsonl") as fh:
            header = json.loads(fh.readline())
            if header.get("format") != FORMAT:
                raise ValueError(f"{directory}: not a patch dataset")
            if header.get("version") != VERSION:
                raise ValueError(f"{directory}: unsupported dataset version {header.get('version')}")
            records = [json.loads(line) for line in fh if line.strip()]
        B, n = header["B"], header["count"]
        if len(records) != n:
            raise ValueError(f"{directory}: manifest lists {len(records)} records, header says {n}")
        blob = np.fromfile(directory / "patches.bin", dtype=np.uint8)
        if blob.size != n * B * B:
            raise ValueError(f"{directory}: blob holds {blob.size} bytes, expected {n * B * B}")
        images = blob.reshape(n, B, B)
        for i, rec in enumerate(records):
            if rec.pop("offset") != i * B * B:
                raise ValueError(f"{directory}: record {i} has an unexpected blob offset")
        spec = DatasetSpec(**header["spec"]) if header.get("spec") else None
        return cls(images, records, spec)


def build_dataset(spec: DatasetSpec, corpus, workers: int = 1) -> Dataset:
    """Generate every patch of ``spec`` from ``corpus`` (a list of ``(source_id, image)``).

    Raises :class:`InsufficientCorpusError` naming the shortfall when a split
    has no usable source image.
    """
    need = spec.B + MARGIN if spec.needs_margin else spec.B
    sources = {s: [] for s in SPLITS}
    skipped = 0
    for sid, im in corpus:
        if im.shape[0] < need or im.shape[1] < need:
            skipped += 1
            continue
        sources[source_split(sid, spec.val_fraction)].append((sid, im))
    if skipped:
        log.warning("skipped %d source images smaller than %dx%d", skipped, need, need)
    counts = {"train": spec.train_count, "val": spec.val_count}
    short = [s for s in SPLITS if counts[s] and not sources[s]]
    if short:
        have = {s: len(sources[s]) for s in SPLITS}
        raise InsufficientCorpusError(
            f"no usable source images for split(s) {short}: {have} usable sources of at least "
            f"{need}x{need} ({skipped} too small); add images or change val_fraction"
        )
    jobs = [(spec, split, i, plan) for split in SPLITS for i, plan in enumerate(_plan(spec, split, counts[split]))]
    if workers > 1:
        with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(sources,)) as pool:
            results = list(pool.map(_make_one, jobs, chunksize=256))
    else:
        _init_worker(sources)
        results = [_make_one(job) for job in jobs]
    images = np.stack([p for p, _ in results]) if results else np.zeros((0, spec.B, spec.B), np.uint8)
    return Dataset(images, [rec for _, rec in results], spec)
