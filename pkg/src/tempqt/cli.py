"""Command-line entry points.

Subcommands: synth (build a distorted dataset), pretrain (stage 1),
train (stage 2), eval (score a manifest), maps (export error and
attention maps), gradcheck (finite-difference audit). Every command
writes its fully resolved configuration beside its outputs, so a run
directory is self-describing.

Exit codes: 0 success, 1 runtime or validation failure, 2 usage error.
The environment variable TEMPQT_THREADS caps worker threads (default
1): evaluation and map export fan out across images; training itself
is always single-threaded, so thread count never changes results.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .config import RunConfig, load_run_config, serialize_run_config, serialize_settings
from .data import load_manifest, generate_synthetic_dataset, save_manifest, split_by_reference
from .encoder import encode
from .errors import (
    ArgumentError,
    CheckpointError,
    CompatibilityError,
    DataError,
    DimensionError,
    MetricError,
    ParseError,
    TrainingError,
)
from .gradcheck import CASES, TOLERANCE, build_tiny_model_case, run_case
from .imaging import DISTORTION_KINDS, GrayImage, load_image, save_image
from .metrics import plcc, srocc
from .quality import extract_attention_map
from .training import (
    Checkpoint,
    check_model_compat,
    forward_pem,
    load_checkpoint,
    predict_score,
    pretrain_pem,
    save_checkpoint,
    store_from_checkpoint,
    train_quality,
)

_ERRORS = (
    ArgumentError,
    CheckpointError,
    CompatibilityError,
    DataError,
    DimensionError,
    MetricError,
    ParseError,
    TrainingError,
    OSError,
)


def thread_count() -> int:
    raw = os.environ.get("TEMPQT_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ArgumentError(f"TEMPQT_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ArgumentError(f"TEMPQT_THREADS must be >= 1, got {n}")
    return n


def _map_ordered(fn, items):
    """Apply fn preserving order, on TEMPQT_THREADS workers."""
    workers = thread_count()
    if workers == 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _write(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def _ensure_out(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def _resolved_run(run: RunConfig, out_dir: str, command: str) -> None:
    _write(os.path.join(out_dir, f"{command}.resolved.config"), serialize_run_config(run))


def _load_run(args) -> RunConfig:
    run = load_run_config(args.config)
    if getattr(args, "manifest", None):
        run = dataclasses.replace(run, manifest=os.path.abspath(args.manifest))
    if getattr(args, "out", None):
        run = dataclasses.replace(run, out_dir=os.path.abspath(args.out))
    if run.manifest is None:
        raise ArgumentError("no manifest given (config key `manifest` or --manifest)")
    if run.out_dir is None:
        raise ArgumentError("no output directory given (config key `out_dir` or --out)")
    return run


# --- commands ---------------------------------------------------------------


def cmd_synth(args) -> int:
    kinds = tuple(args.kinds.split(",")) if args.kinds else DISTORTION_KINDS
    severities = (
        tuple(int(s) for s in args.severities.split(",")) if args.severities else (1, 2, 3, 4, 5)
    )
    names = sorted(
        n for n in os.listdir(args.bases) if n.lower().endswith((".pgm", ".ppm", ".pnm"))
    )
    if not names:
        raise DataError(f"no .pgm/.ppm/.pnm images under {args.bases}")
    paths = [os.path.join(args.bases, n) for n in names]
    out = _ensure_out(args.out)
    manifest = generate_synthetic_dataset(paths, kinds, severities, args.seed, out)
    manifest = split_by_reference(manifest, args.train_fraction, args.seed)
    save_manifest(manifest, os.path.join(out, "manifest.csv"))
    lines = [
        f"bases = {os.path.abspath(args.bases)}",
        f"out = {os.path.abspath(out)}",
        f"seed = {args.seed}",
        f"kinds = {','.join(kinds)}",
        f"severities = {','.join(str(s) for s in severities)}",
        f"train_fraction = {args.train_fraction!r}",
    ]
    _write(os.path.join(out, "synth.resolved.config"), "\n".join(lines) + "\n")
    n_train = len(manifest.split_samples("train"))
    n_test = len(manifest.split_samples("test"))
    print(f"wrote {len(manifest.samples)} samples (train={n_train} test={n_test}) to {out}")
    return 0


def cmd_pretrain(args) -> int:
    run = _load_run(args)
    out = _ensure_out(run.out_dir)
    manifest = load_manifest(run.manifest)
    _resolved_run(run, out, "pretrain")
    ckpt = pretrain_pem(
        manifest,
        run.model,
        run.train,
        run.loss,
        patch_count=run.patch_count,
        augment=run.augment,
        log_path=os.path.join(out, "pretrain.log"),
    )
    path = os.path.join(out, "pem.ckpt")
    save_checkpoint(ckpt, path)
    print(f"wrote {path}")
    return 0


def cmd_train(args) -> int:
    run = _load_run(args)
    out = _ensure_out(run.out_dir)
    manifest = load_manifest(run.manifest)
    pem_ckpt = load_checkpoint(args.pem_ckpt)
    check_model_compat(pem_ckpt.model_cfg, run.model)
    _resolved_run(run, out, "train")
    ckpt = train_quality(
        manifest,
        pem_ckpt,
        run.model,
        run.train,
        patch_count=run.patch_count,
        augment=run.augment,
        log_path=os.path.join(out, "train.log"),
    )
    path = os.path.join(out, "quality.ckpt")
    save_checkpoint(ckpt, path)
    print(f"wrote {path}")
    return 0


def _predict_split(manifest, ckpt: Checkpoint, split: str):
    store = store_from_checkpoint(ckpt)
    cfg = ckpt.model_cfg
    mode = ckpt.train_cfg.ablation_mode
    share = ckpt.train_cfg.share_backbone
    samples = manifest.split_samples(split)

    def score(sample):
        img = load_image(manifest.resolve(sample.dist_path))
        return predict_score(img, store, cfg, mode, share)

    preds = _map_ordered(score, samples)
    return samples, preds


def cmd_eval(args) -> int:
    run = _load_run(args)
    out = _ensure_out(run.out_dir)
    manifest = load_manifest(run.manifest)
    ckpt = load_checkpoint(args.ckpt)
    check_model_compat(ckpt.model_cfg, run.model)
    if not any(name.startswith("fuse.") for name in ckpt.params):
        raise CompatibilityError("checkpoint has no fusion head; eval needs a quality checkpoint")
    _resolved_run(run, out, "eval")

    report_lines = []
    csv_lines = ["dist_path,y,pred"]
    for split in ("train", "test"):
        samples, preds = _predict_split(manifest, ckpt, split)
        if not samples:
            continue
        targets = [s.score for s in samples]
        for s, p in zip(samples, preds):
            csv_lines.append(f"{s.dist_path},{s.score!r},{p!r}")
        if len(samples) >= 2:
            line = (
                f"split={split} n={len(samples)} "
                f"srocc={srocc(targets, preds):.6f} plcc={plcc(targets, preds):.6f}"
            )
        else:
            line = f"split={split} n={len(samples)} srocc=n/a plcc=n/a"
        report_lines.append(line)
        print(line)
    _write(os.path.join(out, "report.txt"), "\n".join(report_lines) + "\n")
    _write(os.path.join(out, "predictions.csv"), "\n".join(csv_lines) + "\n")
    return 0


def cmd_maps(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    store = store_from_checkpoint(ckpt)
    cfg = ckpt.model_cfg
    out = _ensure_out(args.out)
    _write(
        os.path.join(out, "maps.resolved.config"),
        serialize_settings(ckpt.model_cfg, ckpt.train_cfg, ckpt.loss_cfg),
    )
    has_pqt = cfg.use_pqt and any(name.startswith("pqt.") for name in ckpt.params)
    share = ckpt.train_cfg.share_backbone

    def export(path):
        img = load_image(path)
        if (img.height, img.width) != (cfg.image_size, cfg.image_size):
            raise DimensionError(
                f"{path}: image is {img.height}x{img.width}, checkpoint requires "
                f"{cfg.image_size}x{cfg.image_size}"
            )
        stem = os.path.splitext(os.path.basename(path))[0]
        pem = forward_pem(img, store, cfg).data[0].astype(np.float32)
        save_image(
            GrayImage(img.height, img.width, np.clip(pem, 0.0, 1.0)),
            os.path.join(out, f"{stem}.pem.pgm"),
        )
        written = [f"{stem}.pem.pgm"]
        if has_pqt:
            enc = encode(
                img, store, cfg, branch="pqt",
                weight_prefix="pem" if share else "pqt", capture=True,
            )
            am = extract_attention_map(enc.pqt_attention, img.height, img.width)
            save_image(am, os.path.join(out, f"{stem}.am.pgm"))
            written.append(f"{stem}.am.pgm")
        return written

    for written in _map_ordered(export, list(args.images)):
        for name in written:
            print(f"wrote {os.path.join(out, name)}")
    return 0


def cmd_gradcheck(args) -> int:
    model_cfg = None
    if args.config:
        model_cfg = load_run_config(args.config).model
    failing = []
    worst = 0.0
    for name, case in CASES.items():
        if name == "tiny_model" and model_cfg is not None:
            case = build_tiny_model_case(model_cfg)
        result = run_case(name, seed=args.seed, case=case)
        status = "ok" if result.ok else "FAIL"
        print(f"op={result.name} max_rel_err={result.max_rel_err:.3e} "
              f"checked={result.checked} {status}")
        worst = max(worst, result.max_rel_err)
        if not result.ok:
            failing.append(result.name)
    verdict = "ok" if not failing else "FAIL"
    print(f"gradcheck ops={len(CASES)} max_rel_err={worst:.3e} tolerance={TOLERANCE:.1e} {verdict}")
    if failing:
        print(f"failing: {', '.join(failing)}")
        return 1
    return 0


# --- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tempqt",
        description="Quality assessment from predicted error maps and a quality token.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a distorted dataset from base images")
    p.add_argument("--bases", required=True, help="directory of base images (.pgm/.ppm)")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--kinds", default=None, help=f"comma list from {','.join(DISTORTION_KINDS)}")
    p.add_argument("--severities", default=None, help="comma list from 1..5 (default all)")
    p.add_argument("--train-fraction", type=float, default=0.8, dest="train_fraction")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="stage 1: train the error-map branch")
    p.add_argument("--config", required=True)
    p.add_argument("--manifest", default=None, help="override config manifest path")
    p.add_argument("--out", default=None, help="override config out_dir")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="stage 2: train quality token and fusion head")
    p.add_argument("--config", required=True)
    p.add_argument("--pem-ckpt", required=True, dest="pem_ckpt")
    p.add_argument("--manifest", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a manifest with a quality checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("maps", help="export predicted error maps and attention maps")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--images", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_maps)

    p = sub.add_parser("gradcheck", help="finite-difference audit of all backward rules")
    p.add_argument("--config", default=None, help="model config for the full-graph case")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except _ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
