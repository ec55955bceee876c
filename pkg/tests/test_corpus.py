import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from osteo_ssl.corpus import (
    MANIFEST_COLUMNS,
    NORMAL,
    OSTEOPOROSIS,
    SPLITS,
    ManifestError,
    SegmentRecord,
    SplitError,
    SplitSummary,
    label_from_tscore,
    load_manifest,
    stratified_split,
    write_split_manifest,
)
from osteo_ssl.segment import BONE_NAMES


def test_label_examples():
    assert label_from_tscore(-3.0) == OSTEOPOROSIS
    assert label_from_tscore(-2.5) == NORMAL
    assert label_from_tscore(0.5) == NORMAL


@pytest.mark.parametrize("bad", [float("nan"), float("inf"), -float("inf")])
def test_label_non_finite(bad):
    with pytest.raises(ManifestError, match="S7"):
        label_from_tscore(bad, "S7")


@given(st.floats(-10, 10), st.floats(-10, 10))
def test_label_monotone(t1, t2):
    lo, hi = min(t1, t2), max(t1, t2)
    if label_from_tscore(hi) == OSTEOPOROSIS:
        assert label_from_tscore(lo) == OSTEOPOROSIS


def _write_manifest(path, rows, columns=MANIFEST_COLUMNS):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        w.writerows(rows)
    return path


def _touch(tmp_path, *names):
    for n in names:
        (tmp_path / n).write_bytes(b"")


def test_manifest_three_rows(tmp_path):
    _touch(tmp_path, "a.png", "m1.png", "m2.png", "b.png", "m3.png")
    p = _write_manifest(
        tmp_path / "m.csv",
        [
            ["A", "ulna", "a.png", "m1.png", "-3.1"],
            ["A", "radius", "a.png", "m2.png", "-3.1"],
            ["B", "metacarpal2", "b.png", "m3.png", "0.2"],
        ],
    )
    subjects, segs = load_manifest(p)
    assert len(segs) == 3 and len(subjects) == 2
    assert [s.label for s in segs] == [OSTEOPOROSIS, OSTEOPOROSIS, NORMAL]
    assert segs[0].image_path == tmp_path / "a.png"


def test_manifest_nan_names_line(tmp_path):
    _touch(tmp_path, "a.png", "m.png")
    p = _write_manifest(tmp_path / "m.csv", [["A", "ulna", "a.png", "m.png", "NaN"]])
    with pytest.raises(ManifestError, match="line 2"):
        load_manifest(p)


def test_manifest_collects_all_problems(tmp_path):
    _touch(tmp_path, "a.png", "m.png")
    p = _write_manifest(
        tmp_path / "m.csv",
        [
            ["A", "ulna", "a.png", "m.png", "-1"],
            ["A", "ulna", "a.png", "m.png", "-1"],
            ["B", "femur", "a.png", "m.png", "-1"],
            ["C", "radius", "missing.png", "m.png", "-1"],
        ],
    )
    with pytest.raises(ManifestError) as exc:
        load_manifest(p)
    msg = str(exc.value)
    assert "duplicate" in msg and "femur" in msg and "missing.png" in msg and "3 problem" in msg


def test_manifest_missing_column(tmp_path):
    p = _write_manifest(tmp_path / "m.csv", [["A", "ulna", "a.png", "m.png"]], MANIFEST_COLUMNS[:-1])
    with pytest.raises(ManifestError, match="t_score"):
        load_manifest(p)


def test_manifest_not_found(tmp_path):
    with pytest.raises(ManifestError):
        load_manifest(tmp_path / "nope.csv")


def test_manifest_segment_count_bounded(small_phantom):
    subjects, segs = load_manifest(small_phantom)
    assert len(segs) <= 7 * len(subjects)
    assert {s.bone_name for s in segs} <= set(BONE_NAMES)


def _records(n_subjects, pos_fraction, seed=0, bones=7):
    rng = np.random.default_rng(seed)
    recs = []
    for k in range(n_subjects):
        label = OSTEOPOROSIS if rng.random() < pos_fraction else NORMAL
        for b in BONE_NAMES[:bones]:
            recs.append(SegmentRecord(f"S{k:03d}", b, "i", "m", label))
    return recs


def test_single_class_ten_segments():
    recs = [SegmentRecord(f"S{k}", "ulna", "i", "m", NORMAL) for k in range(10)]
    s = SplitSummary.from_records(stratified_split(recs))
    assert [s.size(x) for x in SPLITS] == [8, 1, 1]
    assert {s.positive_fraction(x) for x in SPLITS} == {0.0}


def test_split_200_subjects_seed0():
    recs = [
        SegmentRecord(f"S{k:03d}", b, "i", "m", OSTEOPOROSIS if k < 58 else NORMAL)
        for k in range(200)
        for b in BONE_NAMES
    ]
    s = SplitSummary.from_records(stratified_split(recs, seed=0))
    assert s.positive_fraction() == 0.29
    for split in SPLITS:
        assert 0.27 <= s.positive_fraction(split) <= 0.31


def test_split_sizes_near_ratio():
    recs = _records(200, 0.29, seed=2)
    s = SplitSummary.from_records(stratified_split(recs, seed=4))
    n = len(recs)
    for split, r in zip(SPLITS, (0.8, 0.1, 0.1)):
        # subject granularity: within a few subjects (7 segments each) of target
        assert abs(s.size(split) - r * n) <= 4 * 7


def _clinical_like_records():
    """1636 segments, 466 positive, from subjects with 1-14 segments each."""
    groups = [  # (n_subjects, segments each, positive)
        (20, 14, True), (26, 7, True), (1, 4, True),
        (21, 14, False), (125, 7, False), (1, 1, False),
    ]
    recs, k = [], 0
    for n, per, pos in groups:
        for _ in range(n):
            for j in range(per):
                recs.append(SegmentRecord(f"S{k:03d}", BONE_NAMES[j % 7], f"img{j // 7}", "m", OSTEOPOROSIS if pos else NORMAL))
            k += 1
    return recs


def test_clinical_composition_within_tolerance():
    recs = _clinical_like_records()
    assert len(recs) == 1636 and sum(r.positive for r in recs) == 466
    s = SplitSummary.from_records(stratified_split(recs, seed=0))
    # the exact 1307/162/167 depends on which subjects had two radiographs, which is not public
    for split, size in zip(SPLITS, (1307, 162, 167)):
        assert abs(s.size(split) - size) <= 28
        assert abs(s.positive_fraction(split) - s.positive_fraction()) <= 0.02


@settings(max_examples=25, deadline=None)
@given(st.integers(3, 120), st.floats(0.05, 0.95), st.integers(0, 10_000))
def test_split_is_partition_and_atomic(n, frac, seed):
    recs = _records(n, frac, seed=seed, bones=3)
    out = stratified_split(recs, seed=seed)
    assert len(out) == len(recs)
    assert all(r.split in SPLITS for r in out)
    assert [(r.subject_id, r.bone_name) for r in out] == [(r.subject_id, r.bone_name) for r in recs]
    owner = {}
    for r in out:
        assert owner.setdefault(r.subject_id, r.split) == r.split
    assert stratified_split(recs, seed=seed) == out


def test_split_errors():
    with pytest.raises(SplitError):
        stratified_split([])
    with pytest.raises(SplitError):
        stratified_split(_records(2, 0.5))
    with pytest.raises(SplitError):
        stratified_split(_records(20, 0.5), ratios=(8, 0, 2))


def test_summary_counts_sum(small_phantom):
    _, segs = load_manifest(small_phantom)
    s = SplitSummary.from_records(stratified_split(segs))
    assert s.total == len(segs)
    assert "positive %" in str(s)


def test_split_manifest_round_trip(small_phantom, tmp_path):
    subjects, segs = load_manifest(small_phantom)
    out = stratified_split(segs, seed=1)
    path = tmp_path / "splits.csv"
    write_split_manifest(out, {s.subject_id: s.t_score for s in subjects}, path)
    _, back = load_manifest(path)
    assert [(r.segment_id, r.split, r.label) for r in back] == [(r.segment_id, r.split, r.label) for r in out]
    header = path.read_text().splitlines()[0].split(",")
    assert header == [*MANIFEST_COLUMNS, "label", "split"]
    assert math.isclose(sum(1 for _ in back), len(segs))
