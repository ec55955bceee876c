"""Segment-level AUC, F1 and accuracy, plus metric-curve logging and plots.

The positive class is osteoporosis. F1 is the binary F1 of that class and is
defined as 0 when nothing is predicted positive.
"""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

CURVE_COLUMNS = ["run_id", "epoch", "split", "metric", "value"]
REPORT_COLUMNS = ["run_id", "auc", "f1", "accuracy", "n_test", "n_positive"]


class MetricError(ValueError):
    pass


@dataclass
class PredictionSet:
    ids: list[str]
    labels: np.ndarray  # 1 = osteoporosis
    scores: np.ndarray  # positive-class probability

    def __post_init__(self):
        self.labels = np.asarray(self.labels).astype(int)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if not (len(self.ids) == len(self.labels) == len(self.scores)):
            raise MetricError("ids, labels and scores differ in length")
        if len(set(self.ids)) != len(self.ids):
            raise MetricError("segment ids must be unique")
        if not np.all(np.isin(self.labels, (0, 1))):
            raise MetricError("labels must be binary")
        if not np.all(np.isfinite(self.scores)) or np.any((self.scores < 0) | (self.scores > 1)):
            raise MetricError("scores must be finite and in [0, 1]")


def roc_auc(labels, scores) -> float:
    """Mann-Whitney AUC; tied scores count one half."""
    labels = np.asarray(labels).astype(bool)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs both classes")
    ranks = rankdata(scores)  # average ranks for ties
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def f1_accuracy(labels, scores, threshold: float = 0.5) -> tuple[float, float]:
    """Predict osteoporosis when ``score >= threshold``."""
    labels = np.asarray(labels).astype(bool)
    if labels.size == 0:
        raise MetricError("empty prediction set")
    pred = np.asarray(scores, dtype=np.float64) >= threshold
    tp = int(np.sum(pred & labels))
    fp = int(np.sum(pred & ~labels))
    fn = int(np.sum(~pred & labels))
    accuracy = float(np.mean(pred == labels))
    if tp == 0:
        return 0.0, accuracy
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 2 * precision * recall / (precision + recall), accuracy


def score_predictions(preds: PredictionSet, threshold: float = 0.5) -> dict[str, float]:
    f1, acc = f1_accuracy(preds.labels, preds.scores, threshold)
    try:
        auc = roc_auc(preds.labels, preds.scores)
    except MetricError:
        auc = float("nan")
    return {"auc": auc, "f1": f1, "accuracy": acc}


def subject_majority_accuracy(preds: PredictionSet, threshold: float = 0.5) -> float:
    """Accuracy after a per-subject majority vote; ids look like ``subject:bone``."""
    votes: dict[str, list[bool]] = defaultdict(list)
    truth: dict[str, int] = {}
    for sid, lab, s in zip(preds.ids, preds.labels, preds.scores):
        subject = sid.split(":")[0]
        votes[subject].append(s >= threshold)
        truth[subject] = int(lab)
    hits = [int(np.mean(v) > 0.5) == truth[s] for s, v in votes.items()]
    return float(np.mean(hits))


@dataclass
class MetricCurve:
    """Per-epoch ``(epoch, split, metric, value)`` rows of one run."""

    run_id: str
    rows: list[tuple[int, str, str, float]] = field(default_factory=list)

    def add(self, epoch: int, split: str, metric: str, value: float) -> None:
        self.rows.append((int(epoch), split, metric, float(value)))

    def series(self, split: str, metric: str) -> tuple[list[int], list[float]]:
        pts = [(e, v) for e, s, m, v in self.rows if s == split and m == metric]
        return [p[0] for p in pts], [p[1] for p in pts]

    def metrics(self) -> list[str]:
        return sorted({m for _, _, m, _ in self.rows})

    def __eq__(self, other):
        # NaN (undefined AUC on a one-class split) compares equal to itself
        key = lambda c: [(e, s, m, repr(v)) for e, s, m, v in c.rows]
        return isinstance(other, MetricCurve) and self.run_id == other.run_id and key(self) == key(other)


def append_curve_csv(curve: MetricCurve, path: str | Path) -> None:
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(CURVE_COLUMNS)
        for epoch, split, metric, value in curve.rows:
            writer.writerow([curve.run_id, epoch, split, metric, repr(value)])


def read_curves(path: str | Path) -> dict[str, MetricCurve]:
    curves: dict[str, MetricCurve] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            curve = curves.setdefault(row["run_id"], MetricCurve(row["run_id"]))
            curve.add(int(row["epoch"]), row["split"], row["metric"], float(row["value"]))
    return curves


def plot_curve(curve: MetricCurve, path: str | Path, metrics: list[str] | None = None) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    metrics = metrics or curve.metrics()
    fig, axes = plt.subplots(1, len(metrics), figsize=(4 * len(metrics), 3.2), squeeze=False)
    for ax, metric in zip(axes[0], metrics):
        for split in sorted({s for _, s, m, _ in curve.rows if m == metric}):
            x, y = curve.series(split, metric)
            ax.plot(x, y, label=split)
        ax.set_title(metric)
        ax.set_xlabel("epoch")
        ax.legend()
    fig.suptitle(curve.run_id)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def write_curves(curves: list[MetricCurve], out_dir: str | Path, plots: bool = True) -> list[Path]:
    """One ``<run_id>.csv`` per run plus ``plots/<run_id>/curves.png``."""
    if not curves or all(not c.rows for c in curves):
        raise MetricError("no curves to write")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise MetricError(f"cannot create {out}: {exc}") from exc
    written = []
    for curve in curves:
        name = safe_name(curve.run_id)
        path = out / f"{name}.csv"
        path.unlink(missing_ok=True)
        append_curve_csv(curve, path)
        written.append(path)
        if plots and curve.rows:
            plot_dir = out / "plots" / name
            plot_dir.mkdir(parents=True, exist_ok=True)
            plot_curve(curve, plot_dir / "curves.png")
            written.append(plot_dir / "curves.png")
    return written


def safe_name(run_id: str) -> str:
    """Run ids may contain ``/``; file names use ``_`` instead."""
    return run_id.replace("/", "_")


def summary_name(run_id: str) -> str:
    return f"{safe_name(run_id)}_summary.json"


def write_report(run_id: str, preds: PredictionSet, out_dir: str | Path, extra: dict | None = None) -> dict:
    """Append one row to ``report.csv`` and write ``<run_id>_summary.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scores = score_predictions(preds)
    row = {
        "run_id": run_id,
        **scores,
        "n_test": len(preds.ids),
        "n_positive": int(preds.labels.sum()),
    }
    path = out / "report.csv"
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        if new:
            writer.writeheader()
        writer.writerow(row)
    summary = {**row, "subject_majority_accuracy": subject_majority_accuracy(preds), **(extra or {})}
    (out / summary_name(run_id)).write_text(json.dumps(summary, indent=2))
    return summary
