"""Command-line entry point: ``djpeg <subcommand> ...``.

Every subcommand writes ``run.json`` (the fully resolved configuration) next to
its outputs. ``--config FILE`` supplies defaults for any flag; flags given on
the command line win. Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import pickle
import sys
from pathlib import Path

import numpy as np
from PIL import Image
from threadpoolctl import threadpool_limits

from . import corpus as corpus_mod
from . import harness
from .dataset import Dataset, DatasetSpec, build_dataset
from .detectors import KINDS, Detector, FusionModel, build_detector
from .histogram import HistConfig
from .nn import SgdConfig
from .preprocess import DenoiserConfig

log = logging.getLogger("djpeg")

CONFIG_FORMAT = "djpeg-run"
CONFIG_VERSION = 1


class UsageError(Exception):
    pass


def env_seed() -> int:
    raw = os.environ.get("DJF_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"DJF_SEED must be an integer, got {raw!r}") from None


def write_run_config(directory: Path, command: str, resolved: dict) -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / "run.json"
    doc = {"format": CONFIG_FORMAT, "version": CONFIG_VERSION, "command": command, **resolved}
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def load_config_file(path) -> dict:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CONFIG_FORMAT:
        raise UsageError(f"{path}: not a {CONFIG_FORMAT} config file")
    if doc.get("version") != CONFIG_VERSION:
        raise UsageError(f"{path}: unsupported config version {doc.get('version')}")
    return doc.get("args", {})


def _require(args, *names):
    missing = [n for n in names if getattr(args, n, None) is None]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + n.replace("_", "-") for n in missing))


def _args_dict(args) -> dict:
    skip = {"func", "config", "verbose"}
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k not in skip}


# subcommands

def cmd_make_corpus(args) -> int:
    _require(args, "out")
    items = corpus_mod.synthetic_corpus(args.count, args.size, args.seed)
    corpus_mod.write_corpus(args.out, items)
    write_run_config(Path(args.out), "make-corpus", {"args": _args_dict(args)})
    print(f"wrote {len(items)} images to {args.out}")
    return 0


def cmd_dataset_gen(args) -> int:
    _require(args, "corpus", "out")
    spec = DatasetSpec(B=args.B, qf2=args.qf2, qf1_set=args.qf1 or [], alignment=args.alignment,
                       train_count=args.train, val_count=args.val, seed=args.seed, val_fraction=args.val_fraction)
    items = corpus_mod.load_corpus(args.corpus)
    ds = build_dataset(spec, items, workers=args.workers)
    ds.save(args.out)
    write_run_config(Path(args.out), "dataset-gen", {"args": _args_dict(args), "dataset": spec.to_dict()})
    print(f"wrote {len(ds)} patches ({spec.train_count} train / {spec.val_count} val) to {args.out}")
    return 0


def _denoiser(args) -> DenoiserConfig:
    return DenoiserConfig(levels=args.denoise_levels, wavelet=args.wavelet, noise_variance=args.noise_variance)


def _hist(args) -> HistConfig:
    return HistConfig(gain=args.hist_gain, trainable=args.hist_trainable)


def cmd_train(args) -> int:
    _require(args, "detector", "dataset", "out")
    ds = Dataset.load(args.dataset)
    overrides = {k: v for k, v in {"lr0": args.lr, "max_epochs": args.epochs, "batch_size": args.batch_size,
                                   "momentum": args.momentum, "decay_per_iteration": args.decay}.items()
                 if v is not None}
    sgd = SgdConfig.for_patch_size(ds.B, seed=args.seed, **overrides)
    detector = build_detector(args.detector, ds.B, seed=args.seed, hist=_hist(args), denoiser=_denoiser(args))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    try:
        report = harness.train(detector, ds.split("train"), ds.split("val"), sgd, patience=args.patience,
                               on_epoch=lambda s: log.info("epoch %d val acc %.4f", s.epoch, s.val_accuracy))
    except harness.TrainingDiverged as exc:
        detector.net.load_state(exc.state)
        detector.save(out.with_suffix(".diverged.djf"))
        raise
    detector.extra = {"dataset": str(args.dataset), "selected_epoch": report.selected_epoch}
    detector.save(out)
    stem = out.with_suffix("")
    Path(f"{stem}.report.csv").write_text(report.to_csv())
    Path(f"{stem}.report.txt").write_text(report.summary())
    resolved = {"args": _args_dict(args), "sgd": sgd.to_dict(), "dataset": ds.spec.to_dict() if ds.spec else None,
                "detector": args.detector,
                "denoiser": detector.denoiser.to_dict() if detector.denoiser else None,
                "hist": detector.hist.to_dict() if detector.hist else None}
    write_run_config(out.parent, "train", resolved)
    print(report.summary(), end="")
    return 0


def _eval_sets(ds: Dataset, split: str) -> Dataset:
    return ds if split == "all" else ds.split(split)


def cmd_eval(args) -> int:
    _require(args, "checkpoint", "dataset", "out")
    detector = Detector.load(args.checkpoint)
    ds = _eval_sets(Dataset.load(args.dataset), args.split)
    grid = harness.evaluate(detector, ds.pair_sets())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "grid.csv").write_text(grid.to_csv())
    (out / "grid.txt").write_text(grid.summary())
    write_run_config(out, "eval", {"args": _args_dict(args)})
    print(grid.summary(), end="")
    return 0


def cmd_cross_eval(args) -> int:
    _require(args, "checkpoint", "dataset", "out")
    detector = Detector.load(args.checkpoint)
    ds = _eval_sets(Dataset.load(args.dataset), args.split)
    acc = harness.cross_scenario(detector, ds)
    grid = harness.evaluate(detector, ds.pair_sets())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "grid.csv").write_text(grid.to_csv())
    (out / "summary.txt").write_text(f"overall accuracy {acc:.4f}\n" + grid.summary())
    write_run_config(out, "cross-eval", {"args": _args_dict(args)})
    print(f"overall accuracy {acc:.4f}")
    return 0


def cmd_localize(args) -> int:
    _require(args, "checkpoint", "image", "out")
    detector = Detector.load(args.checkpoint)
    image = corpus_mod.read_image(args.image)
    heat = harness.localize(detector, image, args.window, args.stride)
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    paths = heat.save(prefix, image)
    write_run_config(prefix.parent, "localize", {"args": _args_dict(args)})
    rows, cols = heat.probs.shape
    print(f"{rows}x{cols} heatmap written to {', '.join(map(str, paths))}")
    return 0


def cmd_fuse(args) -> int:
    _require(args, "hist", "noise", "dataset", "out")
    hist_det, noise_det = Detector.load(args.hist), Detector.load(args.noise)
    for det, want in ((hist_det, "hist"), (noise_det, "noise")):
        if det.kind != want:
            raise UsageError(f"--{want} checkpoint holds a {det.kind} detector")
    ds = _eval_sets(Dataset.load(args.dataset), args.split)
    p_hist, p_noise = hist_det.predict_proba(ds.images), noise_det.predict_proba(ds.images)
    rng = np.random.default_rng(args.seed)
    order = rng.permutation(len(ds))
    n_fit = int(round(args.fit_fraction * len(ds)))
    fit, test = order[:n_fit], order[n_fit:]
    if len(fit) == 0 or len(test) == 0:
        raise UsageError("--fit-fraction leaves an empty fit or test part")
    model = FusionModel(args.trees, args.depth, args.seed).fit(p_hist[fit], p_noise[fit], ds.labels[fit])
    fused = model.predict(p_hist[test], p_noise[test])
    y = ds.labels[test]
    result = {
        "hist": float(np.mean((p_hist[test] > 0.5) == y)),
        "noise": float(np.mean((p_noise[test] > 0.5) == y)),
        "fused": float(np.mean(fused == y)),
        "fit_count": int(len(fit)), "test_count": int(len(test)),
    }
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "fusion.pkl", "wb") as fh:
        pickle.dump(model, fh)
    (out / "fusion.json").write_text(json.dumps(result, indent=2) + "\n")
    write_run_config(out, "fuse", {"args": _args_dict(args)})
    print(" ".join(f"{k}={v:.4f}" for k, v in result.items() if isinstance(v, float)))
    return 0


def cmd_inspect_features(args) -> int:
    _require(args, "out")
    if (args.image is None) == (args.dataset is None):
        raise UsageError("give exactly one of --image or --dataset")
    if args.image is not None:
        image = corpus_mod.read_image(args.image)
    else:
        image = Dataset.load(args.dataset).images[args.index]
    from .histogram import extract_features
    feats = extract_features(image[None], _hist(args))[0, :, :, 0]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(out, feats, fmt="%.4f", delimiter=",")
    if args.png:
        scaled = feats / max(float(feats.max()), 1e-12)
        Image.fromarray(np.round(255 * scaled).astype(np.uint8), mode="L").save(out.with_suffix(".png"))
    write_run_config(out.parent, "inspect-features", {"args": _args_dict(args)})
    print(f"{feats.shape[0]}x{feats.shape[1]} feature image written to {out}")
    return 0


# parser

def _positive(value: str) -> int:
    n = int(value)
    if n < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return n


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="run.json-style file supplying default flag values")
    common.add_argument("--seed", type=int, default=None, help="global seed (default: $DJF_SEED or 0)")
    common.add_argument("--workers", type=_positive, default=1, help="parallel worker processes")
    common.add_argument("--fast", action="store_true", help="allow multithreaded BLAS (not bit-reproducible)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="djpeg", description="Double JPEG compression detection toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-corpus", parents=[common], help="write a synthetic grayscale corpus")
    p.add_argument("--out", type=Path)
    p.add_argument("--count", type=_positive, default=100)
    p.add_argument("--size", type=_positive, default=512)
    p.set_defaults(func=cmd_make_corpus)

    p = sub.add_parser("dataset-gen", parents=[common], help="build a balanced patch dataset")
    p.add_argument("--corpus", type=Path)
    p.add_argument("--B", type=int, choices=[64, 256], default=64)
    p.add_argument("--qf2", type=int, choices=[75, 85, 95], default=75)
    p.add_argument("--qf1", type=int, nargs="+", help="first quality factors (default depends on --qf2)")
    p.add_argument("--alignment", choices=["aligned", "shifted", "mixed"], default="aligned")
    p.add_argument("--train", type=int, default=20000)
    p.add_argument("--val", type=int, default=6000)
    p.add_argument("--val-fraction", type=float, default=0.25)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_dataset_gen)

    p = sub.add_parser("train", parents=[common], help="train a detector")
    p.add_argument("--detector", choices=KINDS)
    p.add_argument("--dataset", type=Path)
    p.add_argument("--out", type=Path, help="checkpoint path")
    p.add_argument("--lr", type=float, help="initial learning rate (default: 0.01 for B=64, 0.001 for B=256)")
    p.add_argument("--epochs", type=_positive)
    p.add_argument("--batch-size", type=_positive)
    p.add_argument("--momentum", type=float)
    p.add_argument("--decay", type=float, help="per-iteration learning-rate decay")
    p.add_argument("--patience", type=_positive, help="stop after this many epochs without a better val loss")
    p.add_argument("--denoise-levels", type=_positive, default=4)
    p.add_argument("--wavelet", default="db4")
    p.add_argument("--noise-variance", type=float, default=9.0)
    p.add_argument("--hist-gain", type=float, default=1e6)
    p.add_argument("--hist-trainable", action="store_true", help="learn the histogram bin boundaries")
    p.set_defaults(func=cmd_train)

    for name, func, text in (("eval", cmd_eval, "per-(qf1, qf2) accuracy grid"),
                             ("cross-eval", cmd_cross_eval, "accuracy on data from another scenario")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--checkpoint", type=Path)
        p.add_argument("--dataset", type=Path)
        p.add_argument("--split", choices=["train", "val", "all"], default="val")
        p.add_argument("--out", type=Path, help="output directory")
        p.set_defaults(func=func)

    p = sub.add_parser("localize", parents=[common], help="sliding-window heatmap for one image")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--image", type=Path)
    p.add_argument("--window", type=_positive, default=harness.WINDOW)
    p.add_argument("--stride", type=_positive, default=harness.STRIDE)
    p.add_argument("--out", type=Path, help="output prefix; writes PREFIX.csv and PREFIX.png")
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("fuse", parents=[common], help="random-forest fusion of hist and noise detectors")
    p.add_argument("--hist", type=Path, help="hist detector checkpoint")
    p.add_argument("--noise", type=Path, help="noise detector checkpoint")
    p.add_argument("--dataset", type=Path, help="mixed aligned/shifted dataset")
    p.add_argument("--split", choices=["train", "val", "all"], default="val")
    p.add_argument("--fit-fraction", type=float, default=0.5)
    p.add_argument("--trees", type=_positive, default=50)
    p.add_argument("--depth", type=_positive, default=4)
    p.add_argument("--out", type=Path, help="output directory")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("inspect-features", parents=[common], help="export a histogram feature image as CSV")
    p.add_argument("--image", type=Path)
    p.add_argument("--dataset", type=Path)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--hist-gain", type=float, default=1e6)
    p.add_argument("--hist-trainable", action="store_true", help=argparse.SUPPRESS)
    p.add_argument("--png", action="store_true", help="also write a PNG rendering")
    p.add_argument("--out", type=Path, help="CSV path")
    p.set_defaults(func=cmd_inspect_features)
    return parser


def _subparser(parser: argparse.ArgumentParser, command: str) -> argparse.ArgumentParser:
    action = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    return action.choices[command]


def parse_args(argv, parser: argparse.ArgumentParser | None = None) -> argparse.Namespace:
    parser = parser or build_parser()
    args = parser.parse_args(argv)
    if args.config is not None:
        try:
            file_args = load_config_file(args.config)
        except (OSError, json.JSONDecodeError, UsageError) as exc:
            parser.error(f"cannot use config file: {exc}")
        # re-parse with the file's values as defaults so explicit flags still win
        sub = _subparser(parser, args.command)
        known = {a.dest for a in sub._actions}
        sub.set_defaults(**{k: v for k, v in file_args.items() if k in known and k not in ("command", "func")})
        args = parser.parse_args(argv)
    for k, v in vars(args).items():
        if isinstance(v, str) and k in ("corpus", "dataset", "out", "checkpoint", "image", "hist", "noise"):
            setattr(args, k, Path(v))
    return args


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    parser = build_parser()
    args = parse_args(argv, parser)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        if args.seed is None:
            args.seed = env_seed()
        with threadpool_limits(limits=None if args.fast else 1):
            return args.func(args)
    except UsageError as exc:
        print(_subparser(parser, args.command).format_usage() + f"djpeg {args.command}: error: {exc}",
              file=sys.stderr)
        return 2
    except Exception as exc:  # reported as a runtime failure
        log.debug("failure", exc_info=True)
        print(f"djpeg {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
