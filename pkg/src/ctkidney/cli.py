"""Command-line entry point: ``ctkidney <command> [options]``.

Exit codes: 0 success, 2 usage/config error, 3 missing prerequisite,
4 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from .augment import BatchStream, dump_augmented, load_and_resize
from .config import RunConfig
from .errors import ConfigError, MissingCheckpoint, MissingPrerequisite, PipelineError
from .manifest import assign_splits, read_manifest, scan_dataset

log = logging.getLogger("ctkidney")

ENSEMBLE = "ensemble"


def _load_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    return cfg.with_overrides(
        seed=args.seed,
        output_dir=args.output_dir,
        variant=args.variant,
        dataset_root=getattr(args, "dataset_root", None),
    )


def _out(cfg: RunConfig) -> Path:
    return Path(cfg.output_dir)


def _echo_config(cfg: RunConfig, where: Path) -> None:
    where.mkdir(parents=True, exist_ok=True)
    (where / "config.json").write_text(cfg.to_json())


def _load_prepared(cfg: RunConfig):
    path = _out(cfg) / "manifest.csv"
    if not path.exists():
        raise MissingPrerequisite(f"{path} not found; run `ctkidney prepare` first")
    if cfg.dataset_root is None:
        raise ConfigError("dataset_root is not set")
    return read_manifest(path, root=cfg.dataset_root)


def _streams(cfg: RunConfig, manifest):
    train_m, test_m = manifest.subset("train"), manifest.subset("test")
    bs = cfg.training.batch_size
    train_s = BatchStream(train_m, cfg.augmentation, bs, shuffle=True, seed=cfg.seed, augment=True)
    test_s = BatchStream(test_m, cfg.augmentation, bs, shuffle=False, seed=cfg.seed, augment=False)
    return train_s, test_s


# ---------------------------------------------------------------- commands

def cmd_fixture(cfg: RunConfig, args) -> int:
    from .fixture import make_fixture

    dest = Path(args.dest) if args.dest else _out(cfg) / "fixture"
    make_fixture(dest, n_per_class=args.per_class, size=args.size, seed=cfg.seed)
    print(dest)
    return 0


def cmd_prepare(cfg: RunConfig, args) -> int:
    if cfg.dataset_root is None:
        raise ConfigError("dataset_root is not set (config or --dataset-root)")
    manifest = scan_dataset(cfg.dataset_root, strict=args.strict)
    manifest = assign_splits(manifest, cfg.train_fraction, cfg.seed)
    out = _out(cfg)
    manifest.write_csv(out / "manifest.csv")
    manifest.write_errors(out / "scan_errors.txt")
    _echo_config(cfg, out)
    counts = manifest.class_counts
    log.info("manifest: %d records %s", len(manifest), counts)
    if args.dump_augmented:
        n, dump_dir = args.dump_augmented
        dump_augmented(manifest.subset("train"), cfg.augmentation, int(n), dump_dir, seed=cfg.seed)
    return 0


def _train_backbone(cfg: RunConfig, family: str, manifest) -> None:
    from .models import attach_head, build_backbone, save_checkpoint
    from .training import train

    spec = cfg.backbone_spec(family)
    model = attach_head(build_backbone(spec, weights_dir=cfg.weights_dir), manifest.codec.num_classes,
                        freeze=cfg.freeze, seed=cfg.seed)
    train_s, val_s = _streams(cfg, manifest)
    mdir = _out(cfg) / family
    classes = manifest.codec.classes
    _, history = train(model, train_s, val_s, cfg.training, checkpoint_dir=mdir / "checkpoints",
                       checkpoint_fn=lambda p, m: save_checkpoint(p, m, classes))
    history.write(mdir / "history.json")
    _echo_config(cfg, mdir)


def _train_ensemble(cfg: RunConfig, manifest) -> None:
    from .ensemble import (
        branches_from_checkpoints,
        build_ensemble,
        save_ensemble_checkpoint,
        train_ensemble,
        write_topology,
    )

    out = _out(cfg)
    paths = [out / f / "checkpoints" / "best.pt" for f in cfg.backbones]
    missing = [str(p) for p in paths if not p.exists()]
    if missing:
        raise MissingPrerequisite(f"ensemble needs every branch checkpoint; missing: {missing}")
    branches = branches_from_checkpoints(paths)
    spec = cfg.ensemble_spec([b.spec for b in branches], manifest.codec.num_classes)
    model = build_ensemble(branches, spec)
    train_s, val_s = _streams(cfg, manifest)
    mdir = out / ENSEMBLE
    classes = manifest.codec.classes
    _, history = train_ensemble(
        model, train_s, val_s, cfg.training, checkpoint_dir=mdir / "checkpoints",
        checkpoint_fn=lambda p, m: save_ensemble_checkpoint(p, m, classes, paths),
    )
    history.write(mdir / "history.json")
    refs = [{"path": p.relative_to(out).as_posix(), "sha256": _sha(p)} for p in paths]
    write_topology(mdir / "ensemble.json", model, refs)
    _echo_config(cfg, mdir)


def _sha(path) -> str:
    from .models import sha256_file

    return sha256_file(path)


def cmd_train(cfg: RunConfig, args) -> int:
    manifest = _load_prepared(cfg)
    if args.model == ENSEMBLE:
        _train_ensemble(cfg, manifest)
    else:
        _train_backbone(cfg, args.model, manifest)
    return 0


def _load_model(cfg: RunConfig, model_name: str):
    ckpt = _out(cfg) / model_name / "checkpoints" / "best.pt"
    if not ckpt.exists():
        raise MissingCheckpoint(f"no checkpoint for {model_name} at {ckpt}; train it first")
    if model_name == ENSEMBLE:
        from .ensemble import load_ensemble_checkpoint

        return load_ensemble_checkpoint(ckpt)
    from .models import load_checkpoint

    return load_checkpoint(ckpt)


def _model_names(cfg: RunConfig, selector: str) -> List[str]:
    if selector == "all":
        return list(cfg.backbones) + [ENSEMBLE]
    return [selector]


def cmd_evaluate(cfg: RunConfig, args) -> int:
    from .metrics import evaluate
    from .reporting import load_report, plot_report, write_comparison, write_report

    out = _out(cfg)
    names = _model_names(cfg, args.model)
    for name in names:
        mdir = out / name
        if args.replot:
            if not (mdir / "report.json").exists():
                raise MissingPrerequisite(f"{mdir / 'report.json'} not found; evaluate first")
            plot_report(load_report(mdir), mdir / "plots", title=name)
            continue
        model, _classes = _load_model(cfg, name)
        manifest = _load_prepared(cfg)
        _, test_s = _streams(cfg, manifest)
        report = evaluate(model, test_s, manifest.codec)
        write_report(report, mdir)
        plot_report(report, mdir / "plots", title=name)
        log.info("%s: macro precision=%.4f recall=%.4f f1=%.4f", name,
                 report.macro["precision"], report.macro["recall"], report.macro["f1"])
    done = [m for m in list(cfg.backbones) + [ENSEMBLE] if (out / m / "report.json").exists()]
    if done:
        write_comparison(out, done)
    return 0


def cmd_explain(cfg: RunConfig, args) -> int:
    from .lime import explain, render_overlay, write_explanation
    from .models import predict_proba

    model, classes = _load_model(cfg, args.model)
    size = model.spec.input_size
    img = load_and_resize(args.image, size, cfg.augmentation.rescale)
    if args.class_ is None:
        target = int(np.argmax(predict_proba(model, img[None])[0]))
    elif args.class_ in classes:
        target = classes.index(args.class_)
    else:
        try:
            target = int(args.class_)
        except ValueError:
            raise ConfigError(f"--class {args.class_!r} is neither an index nor one of {list(classes)}") from None
        if not 0 <= target < len(classes):
            raise ConfigError(f"--class {target} out of range for {len(classes)} classes")
    result = explain(model, img, target, cfg.lime)
    overlay = render_overlay(img, result.superpixels, result)
    dest = _out(cfg) / args.model / "explanations" / Path(args.image).stem
    js, png = write_explanation(dest, result, overlay)
    log.info("explained %s as %s: r2=%.4f top=%s", args.image, classes[target],
             result.local_fidelity_r2, result.top_k[:3])
    print(js)
    return 0


def cmd_report(cfg: RunConfig, args) -> int:
    from .reporting import write_comparison

    out = _out(cfg)
    done = [m for m in list(cfg.backbones) + [ENSEMBLE] if (out / m / "report.json").exists()]
    if not done:
        raise MissingPrerequisite(f"no report.json files under {out}; run `ctkidney evaluate` first")
    path = write_comparison(out, done)
    sys.stdout.write(path.read_text())
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration JSON file")
    common.add_argument("--seed", type=int)
    common.add_argument("--output-dir")
    common.add_argument("--variant", choices=("full_pretrained", "tiny_random"))
    common.add_argument("--dataset-root")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="ctkidney", description="CT kidney classification pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", parents=[common], help="scan the dataset and write manifest.csv")
    p.add_argument("--strict", action="store_true", help="abort on the first unreadable image")
    p.add_argument("--dump-augmented", nargs=2, metavar=("N", "OUT_DIR"),
                   help="write N augmented training samples as PNG")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("fixture", parents=[common], help="write the synthetic 4-class fixture dataset")
    p.add_argument("--dest", help="target directory (default <output-dir>/fixture)")
    p.add_argument("--per-class", type=int, default=10)
    p.add_argument("--size", type=int, default=64)
    p.set_defaults(func=cmd_fixture)

    models = ("efficientnet_v2", "inception_v2", "mobilenet_v2", "vit_b16", ENSEMBLE)
    p = sub.add_parser("train", parents=[common], help="train one backbone or the ensemble")
    p.add_argument("--model", required=True, choices=models)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common], help="score a trained model on the test split")
    p.add_argument("--model", required=True, choices=models + ("all",))
    p.add_argument("--replot", action="store_true", help="re-render plots from report.json only")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("explain", parents=[common], help="LIME explanation for one image")
    p.add_argument("--image", required=True)
    p.add_argument("--model", required=True, choices=models)
    p.add_argument("--class", dest="class_", help="class name or index (default: predicted class)")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("report", parents=[common], help="rebuild comparison.csv from report files")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_config(args)
        return args.func(cfg, args)
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except Exception as exc:  # noqa: BLE001 - exit-code contract
        log.exception("runtime failure")
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
