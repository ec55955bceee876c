"""Run orchestration shared by the CLI: data preparation, single runs and the
objective x augmentation matrix. Every run directory holds the resolved
config, an append-only ``metrics.csv``, checkpoints and the test report."""

from __future__ import annotations

import csv
import json
import logging
import os
import shutil
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from torch import nn

from .config import RunConfig, dump_config
from .corpus import SegmentRecord, SplitSummary, load_manifest, stratified_split
from .metrics import MetricCurve, append_curve_csv, summary_name, write_report
from .models import EncoderConfig, LinearProbe
from .train import (
    AUGMENTATIONS,
    CHECKPOINT_SCHEMA,
    OBJECTIVES,
    SegmentData,
    SupervisedModel,
    TrainingError,
    encoder_from_checkpoint,
    linear_probe,
    load_checkpoint,
    load_segments,
    predict,
    pretrain,
    save_checkpoint,
    train_supervised,
)

log = logging.getLogger(__name__)

METRICS = ("auc", "f1", "accuracy")
SUMMARY_COLUMNS = [
    "objective",
    "augmentation",
    *(f"{m}_{s}" for m in METRICS for s in ("mean", "std")),
    "n_runs",
    "n_failed",
    *(f"delta_{m}" for m in METRICS),
]
PRETRAIN_CKPT = "pretrain.pt"
MODEL_CKPT = "model.pt"


@dataclass
class PreparedData:
    records: list[SegmentRecord]
    train: SegmentData
    val: SegmentData
    test: SegmentData

    @property
    def summary(self) -> SplitSummary:
        return SplitSummary.from_records(self.records)


def split_records(cfg: RunConfig) -> list[SegmentRecord]:
    """Manifest records with splits; a manifest that already carries splits is used as is."""
    manifest = Path(cfg.run.manifest)
    if not cfg.run.manifest or not manifest.exists():
        raise FileNotFoundError(f"manifest not found: {manifest}")
    _, records = load_manifest(manifest)
    if all(r.split for r in records):
        return records
    return stratified_split(records, cfg.run.ratios, cfg.run.split_seed)


def prepare_data(cfg: RunConfig) -> PreparedData:
    records = split_records(cfg)
    data = load_segments(records)
    return PreparedData(data.records, data.subset("train"), data.subset("val"), data.subset("test"))


def _write_curve(curve: MetricCurve, out: Path) -> None:
    append_curve_csv(curve, out / "metrics.csv")


def _model_checkpoint(kind, encoder, head, enc: EncoderConfig, view_size, cfg: RunConfig) -> dict:
    return {
        "schema": CHECKPOINT_SCHEMA,
        "kind": kind,
        "encoder": encoder.state_dict(),
        "head": head.state_dict(),
        "encoder_config": asdict(enc),
        "view_size": view_size,
        "run_id": cfg.run.run_id,
    }


def load_model(path: str | Path) -> tuple[nn.Module, nn.Module, int]:
    """``(encoder, head, view_size)`` from a probe or supervised checkpoint."""
    ckpt = load_checkpoint(path)
    if ckpt.get("kind") not in ("probe", "supervised"):
        raise TrainingError(f"{path}: not a probe or supervised checkpoint")
    enc = EncoderConfig(**ckpt["encoder_config"])
    encoder = encoder_from_checkpoint({"encoder": ckpt["encoder"]}, enc)
    if ckpt["kind"] == "probe":
        head = LinearProbe(enc.embedding_dim)
    else:
        head = nn.Linear(enc.embedding_dim, 2)
    head.load_state_dict(ckpt["head"])
    return encoder, head, ckpt["view_size"]


def run_pretrain(cfg: RunConfig, out: Path, data: PreparedData | None = None, resume: Path | None = None) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.ini")
    data = data or prepare_data(cfg)
    state = load_checkpoint(resume) if resume is not None else None
    ckpt, curve = pretrain(data.train, cfg.train, cfg.augment, cfg.encoder, f"{cfg.run.run_id}/pretrain", state)
    path = out / PRETRAIN_CKPT
    save_checkpoint(ckpt, path)
    (out / "metrics.csv").unlink(missing_ok=True)  # the checkpoint carries the full curve on resume
    _write_curve(curve, out)
    return path


def run_probe(cfg: RunConfig, out: Path, checkpoint: Path | None, data: PreparedData | None = None) -> dict:
    """Linear probe on a frozen encoder, then the test report. ``checkpoint=None`` probes a random encoder."""
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.ini")
    ckpt = load_checkpoint(checkpoint) if checkpoint is not None else None
    data = data or prepare_data(cfg)
    size = cfg.augment.global_size
    encoder, probe, curve = linear_probe(
        ckpt, data.train, data.val, cfg.probe, cfg.encoder, size, f"{cfg.run.run_id}/probe", cfg.train.seed
    )
    _write_curve(curve, out)
    preds = predict(encoder, probe, data.test, size)
    summary = write_report(cfg.run.run_id, preds, out, {"checkpoint": str(checkpoint) if checkpoint else None})
    save_checkpoint(_model_checkpoint("probe", encoder, probe, cfg.encoder, size, cfg), out / MODEL_CKPT)
    return summary


def run_ssl(cfg: RunConfig, out: Path, data: PreparedData | None = None) -> dict:
    data = data or prepare_data(cfg)
    path = run_pretrain(cfg, out, data)
    return run_probe(cfg, out, path, data)


def run_supervised(cfg: RunConfig, out: Path, data: PreparedData | None = None) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.ini")
    data = data or prepare_data(cfg)
    model, curve = train_supervised(
        data.train, data.val, cfg.train, cfg.augment, cfg.encoder, f"{cfg.run.run_id}/supervised"
    )
    _write_curve(curve, out)
    size = cfg.augment.global_size
    preds = predict(model.encoder, model.classifier, data.test, size)
    summary = write_report(cfg.run.run_id, preds, out)
    save_checkpoint(
        _model_checkpoint("supervised", model.encoder, model.classifier, cfg.encoder, size, cfg), out / MODEL_CKPT
    )
    return summary


def evaluate(checkpoint: Path, cfg: RunConfig, out: Path, split: str = "test") -> dict:
    encoder, head, size = load_model(checkpoint)
    data = load_segments([r for r in split_records(cfg) if r.split == split])
    if len(data) == 0:
        raise TrainingError(f"split {split!r} is empty")
    return write_report(cfg.run.run_id, predict(encoder, head, data, size), out, {"checkpoint": str(checkpoint)})


# --- matrix -------------------------------------------------------------------

def cell_name(objective: str, augmentation: str) -> str:
    return f"{objective}_{augmentation}"


def cell_config(cfg: RunConfig, objective: str, augmentation: str, seed: int) -> RunConfig:
    cfg = cfg.with_overrides("train", objective=objective, augmentation=augmentation, seed=seed)
    return cfg.with_overrides("run", run_id=f"{cell_name(objective, augmentation)}/seed{seed}")


def run_cell(cfg: RunConfig, out: Path) -> dict:
    """One matrix run; failures are written to ``error.txt`` instead of raised."""
    if (out / MODEL_CKPT).exists():
        return json.loads((out / summary_name(cfg.run.run_id)).read_text())
    if out.exists():
        shutil.rmtree(out)  # partial leftovers from an interrupted run
    try:
        if cfg.train.objective == "supervised":
            return run_supervised(cfg, out)
        return run_ssl(cfg, out)
    except Exception as exc:  # noqa: BLE001 - recorded per cell, the matrix goes on
        out.mkdir(parents=True, exist_ok=True)
        (out / "error.txt").write_text(traceback.format_exc())
        log.error("cell %s failed: %s", cfg.run.run_id, exc)
        return {"error": f"{type(exc).__name__}: {exc}"}


def _workers() -> int:
    cap = os.environ.get("OSTEO_SSL_THREADS")
    return max(1, int(cap)) if cap else (os.cpu_count() or 1)


def run_matrix(
    cfg: RunConfig,
    out: Path,
    objectives=OBJECTIVES,
    augmentations=AUGMENTATIONS,
    workers: int | None = None,
) -> list[dict]:
    """Every objective x augmentation x seed; returns the summary rows."""
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.ini")
    jobs = []
    for objective in objectives:
        for augmentation in augmentations:
            for seed in cfg.run.seeds:
                jobs.append((cell_config(cfg, objective, augmentation, seed), out / cell_name(objective, augmentation) / f"seed{seed}"))
    workers = workers or _workers()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_cell, *zip(*jobs)))
    else:
        results = [run_cell(c, o) for c, o in jobs]

    cells: dict[tuple[str, str], list[dict]] = {}
    for (c, _), res in zip(jobs, results):
        cells.setdefault((c.train.objective, c.train.augmentation), []).append(res)
    rows = summarize(cells, objectives, augmentations)
    write_summary(rows, out)
    return rows


def summarize(cells: dict[tuple[str, str], list[dict]], objectives=OBJECTIVES, augmentations=AUGMENTATIONS) -> list[dict]:
    """Mean and std over seeds per cell, plus ext - original deltas per objective."""
    rows = []
    for objective in objectives:
        for augmentation in augmentations:
            results = cells.get((objective, augmentation), [])
            ok = [r for r in results if "error" not in r]
            row = {"objective": objective, "augmentation": augmentation, "n_runs": len(ok), "n_failed": len(results) - len(ok)}
            for m in METRICS:
                vals = np.array([r[m] for r in ok], dtype=float)
                row[f"{m}_mean"] = float(vals.mean()) if len(vals) else float("nan")
                row[f"{m}_std"] = float(vals.std()) if len(vals) else float("nan")
            rows.append(row)
    by_key = {(r["objective"], r["augmentation"]): r for r in rows}
    for r in rows:
        base, ext = by_key.get((r["objective"], "multicrop")), by_key.get((r["objective"], "ext_multicrop"))
        for m in METRICS:
            r[f"delta_{m}"] = ext[f"{m}_mean"] - base[f"{m}_mean"] if base and ext else float("nan")
    return rows


def render_table(rows: list[dict]) -> str:
    """Markdown table: one line per objective, both augmentations side by side, then the deltas."""
    def cell(r, m):
        scale = 100 if m == "accuracy" else 1
        fmt = "{:.2f} ± {:.2f}" if m == "accuracy" else "{:.3f} ± {:.3f}"
        return fmt.format(scale * r[f"{m}_mean"], scale * r[f"{m}_std"])

    head = ["Method"]
    for aug in ("multicrop", "ext_multicrop"):
        head += [f"{aug} AUC", f"{aug} F1", f"{aug} Acc (%)"]
    head += ["Δ AUC", "Δ F1", "Δ Acc (%)"]
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    by_key = {(r["objective"], r["augmentation"]): r for r in rows}
    for objective in dict.fromkeys(r["objective"] for r in rows):
        parts = [objective]
        for aug in ("multicrop", "ext_multicrop"):
            r = by_key.get((objective, aug))
            parts += [cell(r, m) if r else "-" for m in METRICS]
        r = by_key.get((objective, "ext_multicrop")) or by_key.get((objective, "multicrop"))
        parts += [f"{r['delta_auc']:+.3f}", f"{r['delta_f1']:+.3f}", f"{100 * r['delta_accuracy']:+.2f}"]
        lines.append("| " + " | ".join(parts) + " |")
    return "\n".join(lines) + "\n"


def write_summary(rows: list[dict], out: Path) -> None:
    with open(out / "summary.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    (out / "summary.md").write_text(render_table(rows))


def random_encoder_config(cfg: RunConfig, seed: int) -> RunConfig:
    """Config for probing an untrained encoder (the null-signal baseline)."""
    return cfg.with_overrides("run", run_id=f"random/seed{seed}").with_overrides("train", seed=seed)

