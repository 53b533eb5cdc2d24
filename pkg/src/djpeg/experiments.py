"""Desk-scale experiment recipes with an on-disk cache of trained detectors.

Each trained run is stored under ``<cache>/<name>-<key>/`` where the key hashes
the run configuration together with the source of every module on the
training path, so a code change retrains instead of reusing stale weights.

    python -m djpeg.experiments [--cache DIR] [run names...]
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import corpus as corpus_mod
from .dataset import Dataset, DatasetSpec, build_dataset
from .detectors import Detector, build_detector
from .harness import EpochStats, TrainReport, train
from .jpeg import compress_decompress
from .nn import SgdConfig

log = logging.getLogger(__name__)

PACKAGE_DIR = Path(__file__).resolve().parent
DEFAULT_CACHE = PACKAGE_DIR.parent.parent / "artifacts" / "experiments"
# modules whose code influences a trained checkpoint
TRAINING_PATH = ["nn", "jpeg.py", "preprocess.py", "histogram.py", "detectors.py", "dataset.py",
                 "harness.py", "corpus.py"]

CORPUS_COUNT = 300
CORPUS_SIZE = 512
CORPUS_SEED = 2024
PATIENCE = 4


def cache_dir() -> Path:
    return Path(os.environ.get("DJF_CACHE", DEFAULT_CACHE))


def source_hash() -> str:
    h = hashlib.sha256()
    for entry in TRAINING_PATH:
        path = PACKAGE_DIR / entry
        files = sorted(path.rglob("*.py")) if path.is_dir() else [path]
        for f in files:
            h.update(str(f.relative_to(PACKAGE_DIR)).encode())
            h.update(f.read_bytes())
    return h.hexdigest()[:16]


@lru_cache(maxsize=1)
def desk_corpus() -> tuple:
    return tuple(corpus_mod.synthetic_corpus(CORPUS_COUNT, CORPUS_SIZE, CORPUS_SEED))


@lru_cache(maxsize=16)
def _dataset(spec_json: str) -> Dataset:
    return build_dataset(DatasetSpec(**json.loads(spec_json)), list(desk_corpus()))


def dataset(spec: DatasetSpec) -> Dataset:
    return _dataset(json.dumps(spec.to_dict(), sort_keys=True))


@dataclass
class Run:
    name: str
    kind: str
    data: DatasetSpec
    sgd: SgdConfig = field(default_factory=SgdConfig)
    patience: int | None = PATIENCE
    model_seed: int = 0

    def config(self) -> dict:
        return {"name": self.name, "kind": self.kind, "data": self.data.to_dict(), "sgd": self.sgd.to_dict(),
                "patience": self.patience, "model_seed": self.model_seed,
                "corpus": [CORPUS_COUNT, CORPUS_SIZE, CORPUS_SEED]}

    def key(self) -> str:
        blob = json.dumps(self.config(), sort_keys=True) + source_hash()
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


def _spec(qf2: int, alignment: str, seed: int, qf1_set=None) -> DatasetSpec:
    return DatasetSpec(B=64, qf2=qf2, qf1_set=qf1_set or [], alignment=alignment,
                       train_count=20000, val_count=6000, seed=seed)


EASY_QF1 = [60, 70, 80, 90]

RUNS = {
    "hist_aligned_95": Run("hist_aligned_95", "hist", _spec(95, "aligned", 11, EASY_QF1)),
    "hist_shifted_95": Run("hist_shifted_95", "hist", _spec(95, "shifted", 12, EASY_QF1)),
    "noise_shifted_95": Run("noise_shifted_95", "noise", _spec(95, "shifted", 12, EASY_QF1)),
    "noise_aligned_75": Run("noise_aligned_75", "noise", _spec(75, "aligned", 13)),
    "noise_shifted_85": Run("noise_shifted_85", "noise", _spec(85, "shifted", 14)),
}


def _report_from_dict(d: dict) -> TrainReport:
    return TrainReport([EpochStats(**e) for e in d["epochs"]], d["selected_epoch"], d["wall_time"],
                       d["config"], d["stopped_early"])


def trained(name: str, cache: Path | None = None, allow_train: bool = True) -> tuple[Detector, TrainReport]:
    """Load the cached detector for run ``name``, training it first if needed."""
    run = RUNS[name]
    out = (cache or cache_dir()) / f"{name}-{run.key()}"
    ckpt, report_path = out / "detector.djf", out / "report.json"
    if ckpt.exists() and report_path.exists():
        return Detector.load(ckpt), _report_from_dict(json.loads(report_path.read_text()))
    if not allow_train:
        raise FileNotFoundError(f"no cached run {out}")
    ds = dataset(run.data)
    detector = build_detector(run.kind, run.data.B, seed=run.model_seed)
    log.info("training %s (%d train / %d val patches)", name, run.data.train_count, run.data.val_count)
    report = train(detector, ds.split("train"), ds.split("val"), run.sgd, patience=run.patience)
    out.mkdir(parents=True, exist_ok=True)
    detector.save(ckpt)
    report_path.write_text(json.dumps(report.to_dict(), indent=1))
    (out / "config.json").write_text(json.dumps(dict(run.config(), source_hash=source_hash()), indent=1))
    (out / "report.csv").write_text(report.to_csv())
    return detector, report


def sensitivity_set(qf1: int, qf2: int, alignment: str = "aligned", count: int = 2000, seed: int = 99) -> Dataset:
    """A balanced evaluation set for one (qf1, qf2) pair drawn from validation-split sources."""
    spec = DatasetSpec(B=64, qf2=qf2, qf1_set=[qf1], alignment=alignment, train_count=0,
                       val_count=count, seed=seed)
    return dataset(spec)


def mixed_set(qf2: int = 95, count: int = 4000, seed: int = 21) -> Dataset:
    """Balanced aligned + shifted evaluation set from validation-split sources."""
    spec = DatasetSpec(B=64, qf2=qf2, qf1_set=EASY_QF1, alignment="mixed", train_count=0,
                       val_count=count, seed=seed)
    return dataset(spec)


def forgery(source: np.ndarray, qf1: int = 80, qf2: int = 95, region: int = 128) -> tuple[np.ndarray, np.ndarray]:
    """Splice an aligned double-compressed centre square into a single-compressed image.

    The centre ``region`` x ``region`` square comes from a qf1-compressed copy;
    the whole image is then compressed at qf2. Returns ``(image, mask)``.
    """
    h, w = source.shape
    y0, x0 = (h - region) // 16 * 8, (w - region) // 16 * 8
    spliced = source.copy()
    first = compress_decompress(source, qf1)
    spliced[y0:y0 + region, x0:x0 + region] = first[y0:y0 + region, x0:x0 + region]
    mask = np.zeros(source.shape, dtype=bool)
    mask[y0:y0 + region, x0:x0 + region] = True
    return compress_decompress(spliced, qf2), mask


def forgery_sources(count: int = 3, size: int = 256, seed: int = 7070) -> list[np.ndarray]:
    """Fresh images that share no source with any training corpus."""
    return [im for _, im in corpus_mod.synthetic_corpus(count, size, seed)]


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="Train and cache the desk-scale experiment runs.")
    parser.add_argument("runs", nargs="*", help=f"subset of {sorted(RUNS)} (default: all)")
    parser.add_argument("--cache", type=Path, default=None)
    args = parser.parse_args(argv)
    unknown = sorted(set(args.runs) - set(RUNS))
    if unknown:
        parser.error(f"unknown runs {unknown}")
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    for name in args.runs or list(RUNS):
        _, report = trained(name, args.cache)
        print(name, report.summary(), sep="\n")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
