"""``osteo-ssl`` command line.

Exit codes: 0 success, 1 unexpected failure, 2 invalid config or input,
3 missing manifest or checkpoint, 4 non-finite loss or gradient,
5 output exists and ``--force`` was not given.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from dataclasses import asdict
from pathlib import Path

from . import pipeline
from .augment import AugmentConfig, AugmentError, make_views, view_rng
from .config import ConfigError, RunConfig, config_text, dump_config, load_config
from .corpus import ManifestError, SplitError, SplitSummary, load_manifest, stratified_split, write_split_manifest
from .metrics import MetricError, read_curves, write_curves
from .optim import NonFiniteGradientError
from .phantom import PhantomError, generate_phantom
from .segment import SegmentationError, extract_segment, load_gray, load_mask, save_gray
from .train import AUGMENTATIONS, OBJECTIVES, NonFiniteLossError

EXIT_OK, EXIT_FAIL, EXIT_INVALID, EXIT_MISSING, EXIT_NAN, EXIT_EXISTS = 0, 1, 2, 3, 4, 5


class OutputExists(RuntimeError):
    pass


def _prepare_out(path: Path, force: bool, marker: str | None = None) -> Path:
    """Refuse to reuse a non-empty directory (or one holding ``marker``) unless forced."""
    taken = (path / marker).exists() if marker else path.exists() and any(path.iterdir())
    if taken:
        if not force:
            raise OutputExists(f"{path} already holds outputs; pass --force to overwrite")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


# --- config resolution ----------------------------------------------------------

_FLAG_MAP = {
    "run": ("run_id", "manifest", "split_seed"),
    "train": (
        "objective", "augmentation", "epochs", "batch_size", "base_lr", "final_lr",
        "lars_trust_coeff", "weight_decay", "seed", "temperature", "n_prototypes",
    ),
    "augment": ("global_size", "local_size", "n_local", "nonzero_threshold", "max_attempts"),
    "encoder": ("architecture", "embedding_dim", "projection_dim"),
    "probe": ("probe_epochs", "probe_lr"),
    "phantom": ("n_subjects", "image_size", "positive_fraction", "noise_level", "phantom_seed"),
}
_RENAMES = {"probe_epochs": "epochs", "probe_lr": "lr", "phantom_seed": "seed"}


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config)
    for section, flags in _FLAG_MAP.items():
        values = {_RENAMES.get(f, f): getattr(args, f, None) for f in flags}
        cfg = cfg.with_overrides(section, **values)
    if getattr(args, "seeds", None):
        cfg = cfg.with_overrides("run", seeds=tuple(args.seeds))
    return cfg


def _echo(cfg: RunConfig) -> None:
    print("# resolved config")
    print(config_text(cfg))


def _add_config_flags(p: argparse.ArgumentParser, sections) -> None:
    p.add_argument("--config", type=Path, help="INI config file")
    if "run" in sections:
        p.add_argument("--run-id", dest="run_id")
        p.add_argument("--manifest")
        p.add_argument("--split-seed", dest="split_seed", type=int)
    if "train" in sections:
        p.add_argument("--objective", choices=OBJECTIVES)
        p.add_argument("--augmentation", choices=AUGMENTATIONS)
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch-size", dest="batch_size", type=int)
        p.add_argument("--base-lr", dest="base_lr", type=float)
        p.add_argument("--final-lr", dest="final_lr", type=float)
        p.add_argument("--trust-coeff", dest="lars_trust_coeff", type=float)
        p.add_argument("--weight-decay", dest="weight_decay", type=float)
        p.add_argument("--seed", type=int)
        p.add_argument("--temperature", type=float)
        p.add_argument("--n-prototypes", dest="n_prototypes", type=int)
    if "augment" in sections:
        p.add_argument("--global-size", dest="global_size", type=int)
        p.add_argument("--local-size", dest="local_size", type=int)
        p.add_argument("--n-local", dest="n_local", type=int)
        p.add_argument("--nonzero-threshold", dest="nonzero_threshold", type=float)
        p.add_argument("--max-attempts", dest="max_attempts", type=int)
    if "encoder" in sections:
        p.add_argument("--architecture", choices=("small_cnn", "resnet50"))
        p.add_argument("--embedding-dim", dest="embedding_dim", type=int)
        p.add_argument("--projection-dim", dest="projection_dim", type=int)
    if "probe" in sections:
        p.add_argument("--probe-epochs", dest="probe_epochs", type=int)
        p.add_argument("--probe-lr", dest="probe_lr", type=float)
    if "phantom" in sections:
        p.add_argument("--n-subjects", dest="n_subjects", type=int)
        p.add_argument("--image-size", dest="image_size", type=int)
        p.add_argument("--positive-fraction", dest="positive_fraction", type=float)
        p.add_argument("--noise-level", dest="noise_level", type=float)
        p.add_argument("--phantom-seed", dest="phantom_seed", type=int)


TRAIN_SECTIONS = ("run", "train", "augment", "encoder", "probe")


# --- subcommands ------------------------------------------------------------------

def cmd_phantom(args) -> int:
    cfg = resolve_config(args)
    out = _prepare_out(args.out_dir, args.force, "manifest.csv")
    _echo(cfg)
    manifest = generate_phantom(cfg.phantom, out)
    subjects, records = load_manifest(manifest)
    records = stratified_split(records, cfg.run.ratios, cfg.run.split_seed)
    write_split_manifest(records, {s.subject_id: s.t_score for s in subjects}, out / "splits.csv")
    dump_config(cfg, out / "config.ini")
    print(f"wrote {manifest} ({len(subjects)} subjects, {len(records)} segments)")
    print(SplitSummary.from_records(records))
    return EXIT_OK


def _run_dir(args, cfg: RunConfig, stage: str) -> Path:
    return args.out_dir if args.out_dir else Path(cfg.run.out_dir) / cfg.run.run_id / stage


def cmd_pretrain(args) -> int:
    cfg = resolve_config(args)
    out = _run_dir(args, cfg, "pretrain")
    if args.resume is None:
        out = _prepare_out(out, args.force, pipeline.PRETRAIN_CKPT)
    _echo(cfg)
    path = pipeline.run_pretrain(cfg, out, resume=args.resume)
    print(f"checkpoint: {path}")
    return EXIT_OK


def cmd_probe(args) -> int:
    cfg = resolve_config(args)
    if args.checkpoint is not None and not args.checkpoint.exists():
        raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
    if args.checkpoint is None and not args.random_encoder:
        raise FileNotFoundError("checkpoint not found: pass --checkpoint or --random-encoder")
    out = _prepare_out(_run_dir(args, cfg, "probe"), args.force, pipeline.MODEL_CKPT)
    _echo(cfg)
    summary = pipeline.run_probe(cfg, out, args.checkpoint)
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def cmd_supervised(args) -> int:
    cfg = resolve_config(args).with_overrides("train", objective="supervised")
    out = _prepare_out(_run_dir(args, cfg, "supervised"), args.force, pipeline.MODEL_CKPT)
    _echo(cfg)
    print(json.dumps(pipeline.run_supervised(cfg, out), indent=2))
    return EXIT_OK


def cmd_matrix(args) -> int:
    cfg = resolve_config(args)
    out = args.out_dir or Path(cfg.run.out_dir) / "matrix"
    _echo(cfg)
    rows = pipeline.run_matrix(
        cfg, out, args.objectives or OBJECTIVES, args.augmentations or AUGMENTATIONS, args.workers
    )
    print((out / "summary.md").read_text())
    failed = sum(r["n_failed"] for r in rows)
    if failed:
        print(f"{failed} run(s) failed; see error.txt in their cell directories", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_augment_preview(args) -> int:
    cfg = resolve_config(args)
    try:
        image = load_gray(args.segment)
        if args.mask is not None:
            image = extract_segment(image, load_mask(args.mask))
    except (OSError, ValueError) as exc:
        raise SegmentationError(f"cannot read segment {args.segment}: {exc}") from exc
    out = _prepare_out(args.out_dir, args.force, "views.json")
    sidecar = {}
    for variant in AUGMENTATIONS:
        aug = AugmentConfig(**{**asdict(cfg.augment), "extended": variant == "ext_multicrop"})
        views = make_views(image, aug, view_rng(cfg.train.seed, args.sample_index, args.epoch), str(args.segment))
        names = [f"global_{k}" for k in range(len(views.globals))] + [f"local_{k}" for k in range(len(views.locals))]
        (out / variant).mkdir(exist_ok=True)
        entries = []
        for name, view, frac, fb in zip(names, views.views, views.fractions, views.fallback):
            path = out / variant / f"{name}.png"
            save_gray(view, path)
            entries.append({"view": name, "path": str(path.relative_to(out)), "nonzero_fraction": frac, "fallback": fb})
        sidecar[variant] = {"threshold": aug.nonzero_threshold, "views": entries}
    (out / "views.json").write_text(json.dumps(sidecar, indent=2))
    dump_config(cfg, out / "config.ini")
    for variant, info in sidecar.items():
        fr = ", ".join(f"{v['nonzero_fraction']:.3f}{'*' if v['fallback'] else ''}" for v in info["views"])
        print(f"{variant}: {fr}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = resolve_config(args)
    if not args.checkpoint.exists():
        raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
    out = args.out_dir or args.checkpoint.parent / f"eval_{args.split}"
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.ini")
    print(json.dumps(pipeline.evaluate(args.checkpoint, cfg, out, args.split), indent=2))
    return EXIT_OK


def cmd_plot_curves(args) -> int:
    curves = []
    for path in args.metrics:
        if not path.exists():
            raise FileNotFoundError(f"metrics file not found: {path}")
        curves.extend(read_curves(path).values())
    for path in write_curves(curves, args.out_dir):
        print(path)
    return EXIT_OK


# --- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="osteo-ssl", description="Bone-segment self-supervised learning runs.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic radiograph dataset")
    _add_config_flags(p, ("run", "phantom"))
    p.add_argument("--out-dir", dest="out_dir", type=Path, required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_phantom)

    for name, func, help_ in (
        ("pretrain", cmd_pretrain, "pretext training; writes a checkpoint"),
        ("probe", cmd_probe, "linear probe on a frozen encoder, then test report"),
        ("supervised", cmd_supervised, "end-to-end supervised baseline"),
    ):
        p = sub.add_parser(name, help=help_)
        _add_config_flags(p, TRAIN_SECTIONS)
        p.add_argument("--out-dir", dest="out_dir", type=Path)
        p.add_argument("--force", action="store_true")
        p.set_defaults(func=func)
        if name == "pretrain":
            p.add_argument("--resume", type=Path, help="continue from this pretrain checkpoint")
        if name == "probe":
            p.add_argument("--checkpoint", type=Path)
            p.add_argument("--random-encoder", action="store_true", help="probe an untrained encoder")

    p = sub.add_parser("matrix", help="all objectives x augmentations x seeds")
    _add_config_flags(p, TRAIN_SECTIONS)
    p.add_argument("--out-dir", dest="out_dir", type=Path)
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--objectives", nargs="+", choices=OBJECTIVES)
    p.add_argument("--augmentations", nargs="+", choices=AUGMENTATIONS)
    p.add_argument("--workers", type=int, help="parallel cells (default: OSTEO_SSL_THREADS or cores)")
    p.set_defaults(func=cmd_matrix)

    p = sub.add_parser("augment-preview", help="write both multi-crop variants of one segment")
    _add_config_flags(p, ("train", "augment"))
    p.add_argument("segment", type=Path, help="segment or radiograph PNG")
    p.add_argument("--mask", type=Path, help="bone mask; the segment is extracted first")
    p.add_argument("--out-dir", dest="out_dir", type=Path, required=True)
    p.add_argument("--sample-index", dest="sample_index", type=int, default=0)
    p.add_argument("--epoch", type=int, default=0)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_augment_preview)

    p = sub.add_parser("evaluate", help="score a probe or supervised checkpoint")
    _add_config_flags(p, ("run",))
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--out-dir", dest="out_dir", type=Path)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("plot-curves", help="render metric curves from metrics CSVs")
    p.add_argument("metrics", type=Path, nargs="+")
    p.add_argument("--out-dir", dest="out_dir", type=Path, required=True)
    p.set_defaults(func=cmd_plot_curves)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except OutputExists as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_EXISTS
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (NonFiniteLossError, NonFiniteGradientError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NAN
    except (ConfigError, ManifestError, SplitError, PhantomError, AugmentError, SegmentationError, MetricError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
