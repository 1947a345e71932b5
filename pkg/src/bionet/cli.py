"""Command-line entry point: phantom generation, both training stages, evaluation and reports.

Set ``BIONET_DETERMINISTIC=0`` to allow non-deterministic kernels (default on).
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from PIL import Image

from .metrics import MetricsReport, TABLE_COLUMNS, UNITS_LINE, evaluate_dataset, format_table
from .networks import is_frozen, load_checkpoint, save_checkpoint
from .phantom import DatasetError, PhantomConfig, generate_dataset, read_dataset
from .training import ABLATION_MODES, ModelBundle, TrainConfig, TrainLog, evaluate_model, train_bio_stage, train_cascade_stage
from .types import ChoroidMask


class CLIError(Exception):
    pass


def _deterministic_env() -> bool:
    return os.environ.get("BIONET_DETERMINISTIC", "1").lower() not in ("0", "false", "no")


def _load_config(path, stage: str, **overrides) -> TrainConfig:
    base = TrainConfig.load(path) if path else TrainConfig.desk(stage)
    overrides = {k: v for k, v in overrides.items() if v is not None}
    return replace(base, deterministic=_deterministic_env(), **overrides)


def _load_splits(data):
    manifest = Path(data)
    if not manifest.exists():
        raise CLIError(f"data path not found: {data}")
    train = list(read_dataset(manifest, "train"))
    test = list(read_dataset(manifest, "test"))
    return train, test


def cmd_phantom(args) -> int:
    cfg = PhantomConfig(
        seed=args.seed,
        height=args.height,
        width=args.width,
        csi_blur_sigma=args.csi_blur,
        speckle_strength=args.speckle,
    )
    try:
        cfg.validate()
    except ValueError as exc:
        raise CLIError(str(exc)) from None
    manifest = generate_dataset(cfg, args.train, args.test, args.out)
    print(f"wrote {len(manifest.entries)} samples ({args.train} train, {args.test} test) to {args.out}")
    return 0


def cmd_train_bio(args) -> int:
    cfg = _load_config(args.config, "bio", seed=args.seed, epochs=args.epochs)
    train, test = _load_splits(args.data)
    result = train_bio_stage(train, cfg, test)
    out = Path(args.out)
    save_checkpoint(result.net, out, stage="bio", kind="bio", extra={"val_mae": result.val_mae})
    result.log.save(out.parent, name=out.stem + "_log")
    print(f"biomarker network: validation MAE {result.val_mae:.3f} px, digest {result.digest[:16]}")
    return 0


def _save_bundle(bundle: ModelBundle, out: Path) -> None:
    meta = {"mode": bundle.mode, "choroid_class": bundle.choroid_class, "depth": bundle.depth}
    if bundle.u_g is not None:
        save_checkpoint(bundle.u_g, out / "u_g.pt", stage="cascade", kind="unet")
    if bundle.u_c is not None:
        save_checkpoint(bundle.u_c, out / "u_c.pt", stage="cascade", kind="unet")
    (out / "model.json").write_text(json.dumps(meta, indent=2) + "\n")


def load_bundle(model_dir) -> ModelBundle:
    model_dir = Path(model_dir)
    meta_path = model_dir / "model.json"
    if not meta_path.exists():
        raise CLIError(f"no model.json in {model_dir}")
    meta = json.loads(meta_path.read_text())
    u_g = load_checkpoint(model_dir / "u_g.pt")[0] if (model_dir / "u_g.pt").exists() else None
    u_c = load_checkpoint(model_dir / "u_c.pt")[0] if (model_dir / "u_c.pt").exists() else None
    return ModelBundle(meta["mode"], u_g, u_c, meta["choroid_class"], meta["depth"])


def cmd_train(args) -> int:
    cfg = _load_config(args.config, "cascade", seed=args.seed, epochs=args.epochs, ablation_mode=args.mode)
    bio = None
    if cfg.uses_bio:
        if not args.bio:
            raise CLIError(f"mode {cfg.ablation_mode} requires --bio CHECKPOINT")
        bio, _ = load_checkpoint(args.bio)
        if not is_frozen(bio):
            raise CLIError(f"{args.bio}: biomarker checkpoint is not frozen")
    train, test = _load_splits(args.data)
    result = train_cascade_stage(train, bio, cfg, test)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _save_bundle(result.model, out)
    result.log.save(out)
    cfg.save(out / "config.txt")
    report = evaluate_model(result.model, test)
    (out / "metrics.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    print(format_table({cfg.ablation_mode: report}))
    return 0


def _test_split(data):
    return list(read_dataset(data, "test"))


def cmd_eval(args) -> int:
    test = _test_split(args.data)
    if args.masks:
        preds = [_read_mask(Path(args.masks) / f"{s.id}.png", s) for s in test]
        report = evaluate_dataset(preds, [s.choroid for s in test])
        name = Path(args.masks).name or "masks"
    elif args.model:
        bundle = load_bundle(args.model)
        report = evaluate_model(bundle, test)
        name = bundle.mode
    else:
        # Reference masks scored against themselves: a sanity row.
        report = evaluate_dataset([s.choroid for s in test], [s.choroid for s in test])
        name = "oracle"
    print(format_table({name: report}))
    return 0


def _read_mask(path: Path, sample) -> ChoroidMask:
    if not path.exists():
        raise CLIError(f"sample {sample.id}: predicted mask missing at {path}")
    m = (np.array(Image.open(path)) > 0).astype(np.uint8)
    if m.shape != sample.choroid.shape:
        raise CLIError(f"sample {sample.id}: mask shape {m.shape} differs from image {sample.choroid.shape}")
    return ChoroidMask(m)


def cmd_predict(args) -> int:
    bundle = load_bundle(args.model)
    test = list(read_dataset(args.data, args.split)) if args.split != "all" else list(read_dataset(args.data))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for s, m in zip(test, bundle.predict_masks(test)):
        Image.fromarray(m.mask * 255).save(out / f"{s.id}.png")
    print(f"wrote {len(test)} masks to {out}")
    return 0


def overlay(image: np.ndarray, mask: np.ndarray, color=(255, 0, 255), alpha: float = 0.45) -> np.ndarray:
    """RGB uint8 B-scan with a semi-transparent tint over mask pixels."""
    gray = np.clip(image * 255.0, 0, 255)
    rgb = np.repeat(gray[..., None], 3, axis=2)
    tint = np.array(color, dtype=np.float64)
    m = mask.astype(bool)[..., None]
    out = np.where(m, (1 - alpha) * rgb + alpha * tint, rgb)
    return out.round().astype(np.uint8)


def plot_losses(logs: dict[str, TrainLog], path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for name, log in logs.items():
        recs = [r for r in log.records if "total" in r.losses]
        ax.plot(range(len(recs)), [r.losses["total"] for r in recs], label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("total loss")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def cmd_report(args) -> int:
    test = _test_split(args.data)
    out = Path(args.out)
    (out / "overlays").mkdir(parents=True, exist_ok=True)
    reports: dict[str, MetricsReport] = {}
    logs: dict[str, TrainLog] = {}
    for run in args.runs:
        bundle = load_bundle(run)
        reports[bundle.mode] = evaluate_model(bundle, test)
        log_path = Path(run) / "trainlog.json"
        if log_path.exists():
            logs[bundle.mode] = TrainLog.load(log_path)
        masks = bundle.predict_masks(test[: args.n_overlays])
        safe = bundle.mode.replace("+", "_")
        for s, m in zip(test, masks):
            Image.fromarray(overlay(s.image.pixels, m.mask)).save(out / "overlays" / f"{s.id}_{safe}.png")
    for s in test[: args.n_overlays]:
        Image.fromarray(overlay(s.image.pixels, s.choroid.mask)).save(out / "overlays" / f"{s.id}_gt.png")
    table = format_table(reports)
    (out / "table.txt").write_text(table + "\n")
    with open(out / "table.tsv", "w") as fh:
        fh.write("\t".join(["Method", *TABLE_COLUMNS]) + "\n")
        for name, rep in reports.items():
            fh.write(name + "\t" + rep.to_row("\t") + "\n")
    if logs:
        plot_losses(logs, out / "loss_curves.png")
    print(table)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bionet", description="Biomarker-regularized choroid segmentation")
    sub = p.add_subparsers(dest="command", required=True)

    ph = sub.add_parser("phantom", help="generate a synthetic dataset")
    ph.add_argument("--out", required=True)
    ph.add_argument("--train", type=int, default=64)
    ph.add_argument("--test", type=int, default=16)
    ph.add_argument("--height", type=int, default=128)
    ph.add_argument("--width", type=int, default=128)
    ph.add_argument("--seed", type=int, default=0)
    ph.add_argument("--csi-blur", type=float, default=2.0)
    ph.add_argument("--speckle", type=float, default=0.25)
    ph.set_defaults(func=cmd_phantom)

    tb = sub.add_parser("train-bio", help="stage 1: fit and freeze the thickness regressor")
    tb.add_argument("--data", required=True)
    tb.add_argument("--config")
    tb.add_argument("--out", required=True)
    tb.add_argument("--seed", type=int)
    tb.add_argument("--epochs", type=int)
    tb.set_defaults(func=cmd_train_bio)

    tr = sub.add_parser("train", help="stage 2: train the segmenters for one ablation mode")
    tr.add_argument("--data", required=True)
    tr.add_argument("--config")
    tr.add_argument("--bio")
    tr.add_argument("--mode", choices=ABLATION_MODES, default=None)
    tr.add_argument("--out", required=True)
    tr.add_argument("--seed", type=int)
    tr.add_argument("--epochs", type=int)
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="print the metric row for a model or mask directory")
    ev.add_argument("--data", required=True)
    group = ev.add_mutually_exclusive_group()
    group.add_argument("--model")
    group.add_argument("--masks")
    ev.set_defaults(func=cmd_eval)

    pr = sub.add_parser("predict", help="write binary choroid masks")
    pr.add_argument("--data", required=True)
    pr.add_argument("--model", required=True)
    pr.add_argument("--out", required=True)
    pr.add_argument("--split", choices=("train", "test", "all"), default="test")
    pr.set_defaults(func=cmd_predict)

    rp = sub.add_parser("report", help="metric table across runs, overlays and loss curves")
    rp.add_argument("--data", required=True)
    rp.add_argument("--runs", nargs="+", required=True)
    rp.add_argument("--out", required=True)
    rp.add_argument("--n-overlays", type=int, default=4)
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CLIError, DatasetError, ValueError, OSError, RuntimeError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
