"""Dataset manifest, T-score labelling and subject-level stratified splits."""

from __future__ import annotations

import csv
import itertools
import math
import os
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .segment import BONE_NAMES

MANIFEST_COLUMNS = ["subject_id", "bone_name", "image_path", "mask_path", "t_score"]
SPLITS = ("train", "val", "test")
OSTEOPOROSIS = "osteoporosis"
NORMAL = "normal"
OSTEO_THRESHOLD = -2.5
FRACTION_TOLERANCE = 0.02  # per-split positive fraction vs global
FRACTION_SLACK = FRACTION_TOLERANCE / 2


class ManifestError(ValueError):
    pass


class SplitError(ValueError):
    pass


@dataclass(frozen=True)
class SubjectRecord:
    subject_id: str
    t_score: float
    image_path: Path


@dataclass(frozen=True)
class SegmentRecord:
    subject_id: str
    bone_name: str
    image_path: Path
    mask_path: Path
    label: str
    split: str | None = None

    @property
    def segment_id(self) -> str:
        return f"{self.subject_id}:{self.bone_name}"

    @property
    def positive(self) -> bool:
        return self.label == OSTEOPOROSIS


def label_from_tscore(t_score: float, subject_id: str = "?") -> str:
    """Osteoporosis iff the T-score is strictly below -2.5."""
    if not math.isfinite(t_score):
        raise ManifestError(f"subject {subject_id}: non-finite t_score {t_score!r}")
    return OSTEOPOROSIS if t_score < OSTEO_THRESHOLD else NORMAL


def load_manifest(path: str | Path, check_files: bool = True):
    """Parse a manifest CSV into ``(subjects, segments)``.

    Relative image and mask paths resolve against the manifest's directory.
    An optional ``split`` column (as written by :func:`write_split_manifest`)
    is carried through; ``label`` is always recomputed from ``t_score``.
    All problems are collected and reported together.
    """
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    root = path.parent
    errors: list[str] = []
    subjects: dict[str, SubjectRecord] = {}
    segments: list[SegmentRecord] = []
    seen: set[tuple[str, str]] = set()

    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in MANIFEST_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise ManifestError(f"{path}: missing column(s) {', '.join(missing)}")
        for lineno, row in enumerate(reader, start=2):
            sid = (row["subject_id"] or "").strip()
            bone = (row["bone_name"] or "").strip()
            if not sid:
                errors.append(f"line {lineno}: empty subject_id")
                continue
            if bone not in BONE_NAMES:
                errors.append(f"line {lineno}: unknown bone_name {bone!r}")
                continue
            if (sid, bone) in seen:
                errors.append(f"line {lineno}: duplicate (subject, bone) ({sid}, {bone})")
                continue
            seen.add((sid, bone))
            try:
                t = float(row["t_score"])
                label = label_from_tscore(t, sid)
            except ValueError as exc:
                errors.append(f"line {lineno}: {exc}" if isinstance(exc, ManifestError)
                              else f"line {lineno}: subject {sid}: bad t_score {row['t_score']!r}")
                continue
            image = root / row["image_path"]
            mask = root / row["mask_path"]
            if check_files:
                bad = [str(p) for p in (image, mask) if not os.access(p, os.R_OK)]
                if bad:
                    errors.append(f"line {lineno}: unreadable file(s) {', '.join(bad)}")
                    continue
            known = subjects.get(sid)
            if known is None:
                subjects[sid] = SubjectRecord(sid, t, image)
            elif known.t_score != t:
                errors.append(f"line {lineno}: subject {sid} has conflicting t_scores")
                continue
            split = (row.get("split") or "").strip() or None
            if split is not None and split not in SPLITS:
                errors.append(f"line {lineno}: unknown split {split!r}")
                continue
            segments.append(SegmentRecord(sid, bone, image, mask, label, split))

    if errors:
        raise ManifestError(f"{path}: {len(errors)} problem(s):\n  " + "\n  ".join(errors))
    return list(subjects.values()), segments


def _split_targets(n: int, ratios) -> list[float]:
    total = sum(ratios)
    return [n * r / total for r in ratios]


def stratified_split(
    records: list[SegmentRecord], ratios=(8, 1, 1), seed: int = 0
) -> list[SegmentRecord]:
    """Assign every segment to train/val/test, keeping subjects whole.

    Subjects are shuffled within each class. For the val and test splits a
    small window of candidate per-class subject counts around the ratio
    targets is searched. Combinations whose segment-level positive fractions
    all sit within one point of the global fraction count as equally
    balanced and the one closest to the ratio sizes wins; otherwise the most
    balanced wins. Train takes the rest. Returns new records in input order.
    """
    if not records:
        raise SplitError("no records to split")
    if len(ratios) != len(SPLITS) or any(r <= 0 for r in ratios):
        raise SplitError(f"ratios must be {len(SPLITS)} positive numbers, got {ratios}")

    by_subject: dict[str, list[int]] = defaultdict(list)
    subject_pos: dict[str, bool] = {}
    for k, rec in enumerate(records):
        by_subject[rec.subject_id].append(k)
        if subject_pos.setdefault(rec.subject_id, rec.positive) != rec.positive:
            raise SplitError(f"subject {rec.subject_id} has segments with different labels")
    if len(by_subject) < len(SPLITS):
        raise SplitError(f"{len(by_subject)} subject(s) cannot fill {len(SPLITS)} splits")

    rng = np.random.default_rng(seed)
    pools = {}
    for cls in (True, False):
        ids = sorted(s for s, p in subject_pos.items() if p == cls)
        pools[cls] = [ids[k] for k in rng.permutation(len(ids))]
    seg_count = {s: len(ix) for s, ix in by_subject.items()}
    n_total = len(records)
    n_pos = sum(seg_count[s] for s in pools[True])
    global_frac = n_pos / n_total
    size_targets = _split_targets(n_total, ratios)

    def window(pool, target_subjects):
        lo = max(0, math.floor(target_subjects) - 2)
        hi = min(len(pool), math.ceil(target_subjects) + 2)
        return range(lo, hi + 1)

    cls_targets = {cls: _split_targets(len(pools[cls]), ratios) for cls in pools}
    options = [
        window(pools[cls], cls_targets[cls][k]) for k in (1, 2) for cls in (True, False)
    ]
    best, best_key = None, None
    for pv, nv, pt, nt in itertools.product(*options):
        if pv + pt > len(pools[True]) or nv + nt > len(pools[False]):
            continue
        counts = {
            "val": (pools[True][:pv], pools[False][:nv]),
            "test": (pools[True][pv : pv + pt], pools[False][nv : nv + nt]),
            "train": (pools[True][pv + pt :], pools[False][nv + nt :]),
        }
        dev, size_dev, empty = 0.0, 0.0, False
        for k, name in enumerate(SPLITS):
            pos_ids, neg_ids = counts[name]
            n_p = sum(seg_count[s] for s in pos_ids)
            n = n_p + sum(seg_count[s] for s in neg_ids)
            if n == 0:
                empty = True
                break
            dev = max(dev, abs(n_p / n - global_frac))
            size_dev += abs(n - size_targets[k])
        if empty:
            continue
        # deviations under half the contract tolerance are all acceptable; then prefer exact sizes
        key = (round(max(dev, FRACTION_SLACK), 12), size_dev, dev)
        if best_key is None or key < best_key:
            best, best_key = counts, key
    if best is None:
        raise SplitError("could not find a split with every partition non-empty")

    assignment = {}
    for name, (pos_ids, neg_ids) in best.items():
        for s in (*pos_ids, *neg_ids):
            assignment[s] = name
    return [replace(rec, split=assignment[rec.subject_id]) for rec in records]


@dataclass
class SplitSummary:
    counts: dict[tuple[str, str], int] = field(default_factory=dict)

    @classmethod
    def from_records(cls, records: list[SegmentRecord]) -> "SplitSummary":
        counter = Counter((r.split, r.label) for r in records)
        return cls({(s, lab): counter.get((s, lab), 0) for s in SPLITS for lab in (OSTEOPOROSIS, NORMAL)})

    def size(self, split: str) -> int:
        return self.counts[(split, OSTEOPOROSIS)] + self.counts[(split, NORMAL)]

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def positive_fraction(self, split: str | None = None) -> float:
        if split is None:
            pos = sum(self.counts[(s, OSTEOPOROSIS)] for s in SPLITS)
            return pos / self.total if self.total else 0.0
        n = self.size(split)
        return self.counts[(split, OSTEOPOROSIS)] / n if n else 0.0

    def __str__(self) -> str:
        lines = [f"{'# samples':<14}" + "".join(f"{s:>8}" for s in SPLITS)]
        for lab in (OSTEOPOROSIS, NORMAL):
            lines.append(f"{lab:<14}" + "".join(f"{self.counts[(s, lab)]:>8}" for s in SPLITS))
        lines.append(f"{'total':<14}" + "".join(f"{self.size(s):>8}" for s in SPLITS))
        lines.append(f"{'positive %':<14}" + "".join(f"{100 * self.positive_fraction(s):>8.2f}" for s in SPLITS))
        return "\n".join(lines)


def write_split_manifest(records: list[SegmentRecord], t_scores: dict[str, float], path: str | Path) -> None:
    """Manifest CSV plus ``label`` and ``split`` columns; paths relative to the output file."""
    path = Path(path)
    root = path.parent.resolve()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([*MANIFEST_COLUMNS, "label", "split"])
        for r in records:
            writer.writerow(
                [
                    r.subject_id,
                    r.bone_name,
                    os.path.relpath(Path(r.image_path).resolve(), root),
                    os.path.relpath(Path(r.mask_path).resolve(), root),
                    f"{t_scores[r.subject_id]:.6f}",
                    r.label,
                    r.split or "",
                ]
            )
