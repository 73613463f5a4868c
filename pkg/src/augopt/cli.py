"""Command-line entry point: ``augopt <subcommand> ...``.

Exit codes: 0 success, 1 usage, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import formats
from .augment import OPS, AugmentationParams
from .config import RunConfig
from .encoder import get_encoder, save_features
from .errors import AugoptError, DataError
from .optimizer import (Anatomy, OptimizerConfig, TrajectoryRecord, coarse_grid, coarse_init, default_bundles,
                        optimize, single_bundle)
from .pipeline import anatomies_from_records, build_sdata, segment_corpus
from .superpixel import SegmentationConfig, labeling_from_labels

log = logging.getLogger("augopt")

SDATA_ROWS = "sdata.csv"
SDATA_SUMMARY = "sdata_summary.csv"
SUPERPIXEL_CSV = "superpixels.csv"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _fmt(x: float) -> str:
    return repr(float(x))


def _write_csv(path: Path, header: list[str], rows) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    path.write_text(buf.getvalue())


def _read_csv(path: Path, header: list[str]) -> list[dict]:
    if not path.exists():
        raise DataError(f"missing file {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != header:
            raise DataError(f"{path}: expected columns {header}, got {reader.fieldnames}")
        return list(reader)


def sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def load_images(image_dir) -> dict[str, np.ndarray]:
    image_dir = Path(image_dir)
    if not image_dir.is_dir():
        raise DataError(f"not a directory: {image_dir}")
    paths = formats.list_images(image_dir)
    if not paths:
        raise DataError(f"no images found in {image_dir}")
    images = {}
    for p in paths:
        if p.stem in images:
            raise DataError(f"two images share the id {p.stem!r}")
        try:
            images[p.stem] = formats.read_image(p)
        except AugoptError as exc:
            raise DataError(f"cannot read {p}: {exc}") from None
    return images


def load_labelings(images: dict, labels_dir, cfg: SegmentationConfig) -> dict:
    labels_dir = Path(labels_dir)
    out = {}
    for image_id, image in images.items():
        path = labels_dir / f"{image_id}.augs"
        if not path.exists():
            raise DataError(f"missing label file {path}")
        out[image_id] = labeling_from_labels(image, formats.read_labels(path), cfg, image_id)
    return out


def write_labelings(labelings: dict, out_dir: Path, cfg: SegmentationConfig) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    written = []
    for image_id, lab in labelings.items():
        path = out_dir / f"{image_id}.augs"
        formats.write_labels(path, lab.labels)
        written.append(path)
        for sp in lab.superpixels:
            rows.append([image_id, sp.label, sp.pixel_count, _fmt(sp.entropy), int(sp.entropy >= cfg.entropy_threshold)])
    csv_path = out_dir / SUPERPIXEL_CSV
    _write_csv(csv_path, ["image_id", "label", "pixel_count", "entropy", "retained"], rows)
    return written + [csv_path]


def write_sdata(records, out_dir: Path) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    rows, summary = [], []
    for r in records:
        for target, value in zip(r.target_ids, r.distribution.values):
            rows.append([r.image_id, r.superpixel_id, target, _fmt(value)])
        summary.append([r.image_id, r.superpixel_id, _fmt(r.distribution.mean), len(r.distribution)])
    _write_csv(out_dir / SDATA_ROWS, ["image_id", "superpixel_id", "target_image_id", "similarity"], rows)
    _write_csv(out_dir / SDATA_SUMMARY, ["image_id", "superpixel_id", "mean", "count"], summary)
    return [out_dir / SDATA_ROWS, out_dir / SDATA_SUMMARY]


def read_sdata_summary(path: Path, images: dict, labelings: dict) -> list[Anatomy]:
    out = []
    for row in _read_csv(path, ["image_id", "superpixel_id", "mean", "count"]):
        image_id, sp = row["image_id"], int(row["superpixel_id"])
        if image_id not in images:
            raise DataError(f"{path}: unknown image {image_id!r}")
        mask = labelings[image_id].mask(sp)
        if not mask.any():
            raise DataError(f"{path}: image {image_id!r} has no superpixel {sp}")
        out.append(Anatomy(image_id, sp, images[image_id], mask, float(row["mean"])))
    if not out:
        raise DataError(f"{path}: no anatomies")
    return out


def resolve_workers(flag: int | None, cfg_value: int = 1) -> int:
    if flag is not None:
        workers = flag
    elif os.environ.get("AUGOPT_WORKERS"):
        try:
            workers = int(os.environ["AUGOPT_WORKERS"])
        except ValueError:
            raise DataError(f"AUGOPT_WORKERS={os.environ['AUGOPT_WORKERS']!r} is not an integer") from None
    else:
        workers = cfg_value
    if workers < 1:
        raise DataError("workers must be >= 1")
    return workers


def _config(args, overrides: dict) -> RunConfig:
    return RunConfig.load(getattr(args, "config", None), overrides)


def _seg_overrides(args) -> dict:
    return {
        "segmentation.scale": getattr(args, "scale", None),
        "segmentation.min_size": getattr(args, "min_size", None),
        "segmentation.smoothing_sigma": getattr(args, "sigma", None),
        "segmentation.entropy_threshold": getattr(args, "entropy_threshold", None),
    }


def _enc_overrides(args) -> dict:
    feature_dir = getattr(args, "feature_dir", None)
    return {
        "encoder.seed": getattr(args, "encoder_seed", None),
        "encoder.bank_size": getattr(args, "bank_size", None),
        "encoder.levels": getattr(args, "levels", None),
        "encoder.kind": "file" if feature_dir else None,
        "encoder.feature_dir": feature_dir,
    }


def cmd_superpixels(args) -> int:
    cfg = _config(args, _seg_overrides(args))
    workers = resolve_workers(args.workers, cfg.run.workers)
    images = load_images(args.image_dir)
    labelings = segment_corpus(images, cfg.segmentation, workers)
    write_labelings(labelings, Path(args.out_dir), cfg.segmentation)
    n_sp = sum(len(lab.superpixels) for lab in labelings.values())
    n_kept = sum(sp.entropy >= cfg.segmentation.entropy_threshold for lab in labelings.values()
                 for sp in lab.superpixels)
    print(f"{len(images)} images, {n_sp} superpixels, {n_kept} retained")
    return 0


def cmd_encode(args) -> int:
    cfg = _config(args, _enc_overrides(args))
    if cfg.encoder.kind != "reference":
        raise DataError("encode builds features with the reference encoder")
    images = load_images(args.image_dir)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    enc = get_encoder(cfg.encoder)
    for image_id, image in images.items():
        save_features(out / f"{image_id}.augf", enc.encode(image))
    print(f"{len(images)} feature files, stride {enc.stride}, {enc.channels} channels")
    return 0


def cmd_sdata(args) -> int:
    cfg = _config(args, {**_seg_overrides(args), **_enc_overrides(args)})
    workers = resolve_workers(args.workers, cfg.run.workers)
    images = load_images(args.image_dir)
    if len(images) < 2:
        raise DataError("need ≥2 images for intra-class similarity")
    labelings = load_labelings(images, args.labels_dir, cfg.segmentation)
    records = build_sdata(images, labelings, cfg.segmentation, cfg.encoder, workers)
    write_sdata(records, Path(args.out_dir))
    means = [r.distribution.mean for r in records]
    print(f"{len(records)} anatomies, mean intra-class similarity {np.mean(means):.4f}")
    return 0


def _optimizer_overrides(args) -> dict:
    return {
        "optimizer.tau": args.tau,
        "optimizer.learning_rate": args.lr,
        "optimizer.max_epochs": args.epochs,
        "optimizer.B": args.B,
        "optimizer.batch_anatomies": args.batch_anatomies,
        "optimizer.seed": args.seed,
        "optimizer.mode": args.mode,
        "run.seed": args.seed,
        "run.bundles": args.bundles,
    }


def cmd_optimize(args) -> int:
    overrides = {**_seg_overrides(args), **_enc_overrides(args), **_optimizer_overrides(args)}
    cfg = _config(args, overrides)
    if cfg.encoder.kind != "reference":
        raise DataError("optimize encodes augmented images, which needs the reference encoder")
    workers = resolve_workers(args.workers, cfg.run.workers)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    images = load_images(args.image_dir)
    if len(images) < 2:
        raise DataError("need ≥2 images for intra-class similarity")
    inputs = {f"images/{p.name}": sha256(p) for p in formats.list_images(args.image_dir)}

    if args.labels_dir:
        labelings = load_labelings(images, args.labels_dir, cfg.segmentation)
        inputs.update({f"labels/{k}.augs": sha256(Path(args.labels_dir) / f"{k}.augs") for k in images})
    else:
        labelings = segment_corpus(images, cfg.segmentation, workers)
        write_labelings(labelings, out / "labels", cfg.segmentation)

    summary = Path(args.sdata_dir) / SDATA_SUMMARY if args.sdata_dir else None
    if summary is not None and summary.exists():
        anatomies = read_sdata_summary(summary, images, labelings)
        inputs[f"sdata/{SDATA_SUMMARY}"] = sha256(summary)
    else:
        records = build_sdata(images, labelings, cfg.segmentation, cfg.encoder, workers)
        write_sdata(records, out / "sdata")
        anatomies = anatomies_from_records(images, labelings, records)
    if not anatomies:
        raise DataError("no pseudo-anatomies survived the entropy filter")

    opt: OptimizerConfig = cfg.optimizer
    enc_spec = cfg.encoder
    grid = coarse_grid(cfg.run.grid_strengths)
    if cfg.run.initial_params:
        grid.append(AugmentationParams.from_json(Path(cfg.run.initial_params).read_text()))
    bundles = single_bundle() if cfg.run.bundles == "single" else default_bundles()
    bundle = coarse_init(anatomies, enc_spec, grid, opt, bundles)

    def progress(epoch, value):
        if args.verbose and epoch % 20 == 0:
            print(f"epoch {epoch:4d} loss {value:.5f}", flush=True)

    params, traj, final = optimize(anatomies, enc_spec, opt, bundle, workers, progress)
    (out / "params.json").write_text(params.to_json())
    (out / "trajectory.csv").write_text(traj.to_csv())
    outputs = {name: sha256(out / name) for name in ("params.json", "trajectory.csv")}
    last = {
        "epochs_run": len(traj),
        "final_loss": traj.losses[-1] if len(traj) else None,
        "mu_data": traj.mu_data[-1] if len(traj) else None,
        "mu_aug": traj.mu_aug[-1] if len(traj) else None,
        "beta": dict(zip(final.names, final.beta.tolist())),
        "a0": bundle.a0.tolist(),
        "gamma": bundle.gamma.tolist(),
    }
    manifest = {
        "command": "optimize",
        "config": cfg.to_flat(),
        "seeds": {"optimizer": opt.seed, "encoder": enc_spec.seed},
        "workers": workers,
        "anatomies": len(anatomies),
        "inputs": inputs,
        "outputs": outputs,
        "result": last,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    if len(traj):
        print(f"final loss {last['final_loss']:.5f}  mu_data {last['mu_data']:.5f}  mu_aug {last['mu_aug']:.5f}")
    else:
        print("no gradient epochs run; parameters are the coarse initialization")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import pathwise_suite, score_suite

    ops = args.operator or list(OPS)
    unknown = [op for op in ops if op not in OPS]
    if unknown:
        raise UsageError(f"unknown operator(s) {unknown}; choose from {list(OPS)}")
    results = pathwise_suite(ops, n_images=args.images, threshold=args.threshold, seed=args.seed)
    if not args.operator:
        results += score_suite(samples=args.samples, seed=args.seed)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    if failed:
        for r in failed:
            print(f"gradcheck failed: {r.name} error {r.error:.3e} exceeds {r.threshold:.1e}", file=sys.stderr)
        return 3
    return 0


def trajectory_summary(traj: TrajectoryRecord, window: int = 20) -> list[tuple[str, str]]:
    if not len(traj):
        return [("epochs", "0")]
    losses = np.asarray(traj.losses)
    rows = [
        ("epochs", str(len(traj))),
        ("final_loss", _fmt(losses[-1])),
        ("min_loss", _fmt(losses.min())),
        ("min_loss_epoch", str(traj.epochs[int(np.argmin(losses))])),
        (f"trailing_mean_loss_{window}", _fmt(losses[-window:].mean())),
        ("final_mu_data", _fmt(traj.mu_data[-1])),
        ("final_mu_aug", _fmt(traj.mu_aug[-1])),
    ]
    rows += [(f"final_beta_{n}", _fmt(b)) for n, b in zip(traj.bundle_names, traj.betas[-1])]
    return rows


def cmd_report(args) -> int:
    path = Path(args.trajectory)
    if not path.exists():
        raise DataError(f"missing trajectory {path}")
    traj = TrajectoryRecord.from_csv(path.read_text())
    rows = trajectory_summary(traj, args.window)
    width = max(len(k) for k, _ in rows)
    for key, value in rows:
        print(f"{key:<{width}}  {value}")
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "summary.csv", ["metric", "value"], rows)
        if len(traj):
            from .plotting import report_figures

            for fig in report_figures(traj, out, args.tau, args.tolerance):
                print(f"wrote {fig}")
    return 0


def cmd_synth(args) -> int:
    from .synthetic import abdomen_corpus, grating_corpus

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    make = grating_corpus if args.kind == "grating" else abdomen_corpus
    for i, image in enumerate(make(args.n, args.size, args.seed)):
        formats.write_image(out / f"img{i:03d}.{args.format}", image)
    print(f"wrote {args.n} {args.kind} images to {out}")
    return 0


def _add_common(p, config=True, workers=True):
    if config:
        p.add_argument("--config", help="flat JSON config with dotted keys")
    if workers:
        p.add_argument("--workers", type=int, help="worker threads (fallback: AUGOPT_WORKERS)")


def _add_seg(p):
    p.add_argument("--scale", type=float)
    p.add_argument("--min-size", type=int)
    p.add_argument("--sigma", type=float)
    p.add_argument("--entropy-threshold", type=float)


def _add_enc(p, feature_dir=True):
    p.add_argument("--encoder-seed", type=int)
    p.add_argument("--bank-size", type=int)
    p.add_argument("--levels", type=int)
    if feature_dir:
        p.add_argument("--feature-dir", help="read precomputed .augf features instead of the reference encoder")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="augopt", description="Unsupervised search for augmentation parameters.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("superpixels", help="segment images and score superpixel entropy")
    p.add_argument("image_dir")
    p.add_argument("out_dir")
    _add_common(p)
    _add_seg(p)
    p.set_defaults(func=cmd_superpixels)

    p = sub.add_parser("encode", help="write reference-encoder feature files")
    p.add_argument("image_dir")
    p.add_argument("out_dir")
    _add_common(p, workers=False)
    _add_enc(p, feature_dir=False)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("sdata", help="build the intra-class similarity cache")
    p.add_argument("image_dir")
    p.add_argument("labels_dir")
    p.add_argument("out_dir")
    _add_common(p)
    _add_seg(p)
    _add_enc(p)
    p.set_defaults(func=cmd_sdata)

    p = sub.add_parser("optimize", help="search augmentation parameters")
    p.add_argument("image_dir")
    p.add_argument("out_dir")
    p.add_argument("--labels-dir")
    p.add_argument("--sdata-dir")
    _add_common(p)
    _add_seg(p)
    _add_enc(p, feature_dir=False)
    p.add_argument("--tau", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--B", type=int)
    p.add_argument("--batch-anatomies", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", choices=["boundary", "interior"])
    p.add_argument("--bundles", choices=["default", "single"])
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("gradcheck", help="finite-difference and estimator checks")
    p.add_argument("--operator", action="append", help="check only this operator (repeatable)")
    p.add_argument("--threshold", type=float, default=1e-3)
    p.add_argument("--images", type=int, default=20)
    p.add_argument("--samples", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("report", help="summarize a trajectory CSV; optionally write summary CSV and figures")
    p.add_argument("trajectory")
    p.add_argument("--out-dir")
    p.add_argument("--window", type=int, default=20)
    p.add_argument("--tau", type=float, default=OptimizerConfig().tau)
    p.add_argument("--tolerance", type=float, default=OptimizerConfig().tolerance)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("synth", help="write a synthetic image corpus")
    p.add_argument("out_dir")
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--kind", choices=["grating", "abdomen"], default="grating")
    p.add_argument("--format", choices=["augi", "pgm"], default="augi")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except AugoptError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
