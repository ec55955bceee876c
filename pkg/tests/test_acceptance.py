"""Primary acceptance criteria, one test each, every test printing a verdict line.

Criterion 7 trains 6 encoders plus 3 random-encoder probes on a 200-subject
phantom; expect about 10 minutes on one CPU core.
"""

import filecmp
import time

import numpy as np
import pytest

from oracles import auc_pairs, central_fd, max_rel_error
from osteo_ssl import pipeline
from osteo_ssl.augment import AugmentConfig, extended_multi_crop, multi_crop, view_rng
from osteo_ssl.config import RunConfig
from osteo_ssl.corpus import SPLITS, SplitSummary, load_manifest, stratified_split
from osteo_ssl.losses import (
    EmbeddingBatch,
    multicrop_combine,
    simclr_loss,
    sinkhorn_knopp,
    supcon_loss,
    swav_loss,
    vicreg_multicrop,
)
from osteo_ssl.metrics import f1_accuracy, roc_auc
from osteo_ssl.phantom import PhantomSpec, generate_phantom
from osteo_ssl.segment import extract_segment, load_gray, load_mask
from osteo_ssl.train import AUGMENTATIONS, OBJECTIVES


@pytest.fixture(scope="module")
def phantom200(tmp_path_factory):
    out = tmp_path_factory.mktemp("phantom200")
    return generate_phantom(PhantomSpec(n_subjects=200, seed=0), out)


# 1 ---------------------------------------------------------------------------

def test_criterion_1_degenerate_baselines(acceptance):
    t0 = time.perf_counter()
    labels = np.array([1] * 48 + [0] * 119)
    f1_pos, acc_pos = f1_accuracy(labels, np.ones(167))
    f1_neg, acc_neg = f1_accuracy(labels, np.zeros(167))
    elapsed = time.perf_counter() - t0
    ok = (
        round(100 * acc_pos, 2) == 28.74
        and round(f1_pos, 3) == 0.447
        and round(100 * acc_neg, 2) == 71.26
        and f1_neg == 0.0
        and elapsed < 1.0
    )
    acceptance(1, ok, f"positive acc {100 * acc_pos:.2f}% F1 {f1_pos:.3f}; negative acc {100 * acc_neg:.2f}% F1 {f1_neg}; {elapsed:.3f}s")


# 2 ---------------------------------------------------------------------------

def _grad_cases(rng, n_cases=20):
    for _ in range(n_cases):
        n_src = int(rng.integers(2, 9))
        d = int(rng.integers(2, 9))
        n_local = int(rng.integers(0, 3))
        views = [rng.normal(size=(n_src, d)) for _ in range(n_local + 2)]
        labels = rng.integers(0, 2, n_src)
        labels[:2] = (0, 0)  # at least one anchor has a same-class partner
        yield EmbeddingBatch.from_views(views, labels), n_local, d


def _rebatch(batch, z):
    return EmbeddingBatch(z, batch.view_index, batch.source_index, batch.labels)


def _worst_errors(seed=2024):
    rng = np.random.default_rng(seed)
    worst = {}
    cases = list(_grad_cases(rng))
    for name in ("simclr", "supcon", "swav", "vicreg"):
        errs = []
        for batch, n_local, d in cases:
            if name == "simclr":
                fn = lambda b: simclr_loss(b, n_local)  # noqa: E731
            elif name == "supcon":
                fn = lambda b: supcon_loss(b, n_local)  # noqa: E731
            elif name == "vicreg":
                fn = lambda b: vicreg_multicrop(b, n_local)  # noqa: E731
            else:
                protos = rng.normal(size=(4, d))
                protos /= np.linalg.norm(protos, axis=1, keepdims=True)
                report = swav_loss(batch, protos, n_local)
                codes = report.extras["codes"]
                fd_c = central_fd(lambda c: swav_loss(batch, c, n_local, codes=codes).total, protos)
                errs.append(max_rel_error(report.extras["grad_prototypes"], fd_c))
                fn = lambda b: swav_loss(b, protos, n_local, codes=codes)  # noqa: E731
            fd = central_fd(lambda z: fn(_rebatch(batch, z)).total, batch.z, h=1e-5)
            errs.append(max_rel_error(fn(batch).grad_z, fd))
        worst[name] = max(errs)
    return worst, len(cases)


def test_criterion_2_gradient_suite(acceptance):
    t0 = time.perf_counter()
    worst, n = _worst_errors()
    elapsed = time.perf_counter() - t0
    ok = all(e < 1e-4 for e in worst.values()) and elapsed < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    acceptance(2, ok, f"{n} batches per objective, worst relative error: {detail}; {elapsed:.1f}s")


# 3 ---------------------------------------------------------------------------

def test_criterion_3_sinkhorn_marginals(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    row_err = col_err = 0.0
    for n, k in ((8, 4), (16, 8), (32, 4)):
        q = sinkhorn_knopp(rng.normal(size=(n, k)), 0.05, 3)
        row_err = max(row_err, float(np.max(np.abs(q.sum(1) - 1))))
        col_err = max(col_err, float(np.max(np.abs(q.sum(0) - n / k))))
    uniform_err = float(np.max(np.abs(sinkhorn_knopp(np.zeros((16, 8)), 0.05, 3) - 1 / 8)))
    elapsed = time.perf_counter() - t0
    ok = row_err < 1e-6 and col_err < 1e-6 and uniform_err < 1e-12 and elapsed < 10
    acceptance(3, ok, f"row err {row_err:.1e}, column err {col_err:.1e}, uniform err {uniform_err:.1e}; {elapsed:.2f}s")


# 4 ---------------------------------------------------------------------------

def test_criterion_4_combiner_cardinality(acceptance):
    t0 = time.perf_counter()
    counts = {}
    for v_local in (4, 0):
        calls = []

        def pair(zv, zi, v, i):
            calls.append((v, i))
            return 0.0, np.zeros_like(zv), np.zeros_like(zi)

        views = [np.ones((3, 2)) * (k + 1) for k in range(v_local + 2)]
        multicrop_combine(pair, EmbeddingBatch.from_views(views), v_local)
        counts[v_local] = len(calls)
    elapsed = time.perf_counter() - t0
    ok = counts == {4: 10, 0: 2} and elapsed < 1
    acceptance(4, ok, f"V=4 -> {counts[4]} pair terms, V=0 -> {counts[0]}; {elapsed:.3f}s")


# 5 ---------------------------------------------------------------------------

def test_criterion_5_extended_multicrop_guarantee(phantom200, acceptance):
    t0 = time.perf_counter()
    _, records = load_manifest(phantom200)
    segments = [extract_segment(load_gray(r.image_path), load_mask(r.mask_path)) for r in records[:70]]
    base = AugmentConfig()
    ext = AugmentConfig(extended=True)
    ext_bad = ext_fallback = orig_bad = 0
    for draw in range(1000):
        seg = segments[draw % len(segments)]
        e = extended_multi_crop(seg, ext, view_rng(0, draw))
        ext_bad += sum(f < ext.nonzero_threshold for f, fb in zip(e.fractions, e.fallback) if not fb)
        ext_fallback += e.n_fallback
        o = multi_crop(seg, base, view_rng(0, draw))
        orig_bad += sum(f < ext.nonzero_threshold for f in o.fractions)
    elapsed = time.perf_counter() - t0
    ok = ext_bad == 0 and orig_bad >= 1 and elapsed < 120
    acceptance(
        5, ok,
        f"extended: {ext_bad} violating non-fallback views ({ext_fallback} fallbacks); "
        f"original: {orig_bad} violating views of 6000; {elapsed:.1f}s",
    )


# 6 ---------------------------------------------------------------------------

def test_criterion_6_metric_oracles(acceptance):
    rng = np.random.default_rng(99)
    worst = 0.0
    invariant = True
    for k in range(100):
        n = int(rng.integers(4, 60))
        labels = rng.integers(0, 2, n)
        labels[:2] = (0, 1)
        # a coarse grid forces ties in about half the sets
        scores = rng.integers(0, 20, n) / 20 if k % 2 else rng.random(n)
        auc = roc_auc(labels, scores)
        worst = max(worst, abs(auc - auc_pairs(labels, scores)))
        for g in (lambda s: 3 * s + 1, np.exp, lambda s: s**3, lambda s: np.log1p(s)):
            invariant &= roc_auc(labels, g(scores)) == auc
    ok = worst < 1e-12 and invariant
    acceptance(6, ok, f"max |auc - pair count| {worst:.1e} over 100 sets; monotone invariance {'exact' if invariant else 'broken'}")


# 7 ---------------------------------------------------------------------------

def desk_config(manifest) -> RunConfig:
    cfg = RunConfig().with_overrides("run", manifest=str(manifest), seeds=(0, 1, 2))
    cfg = cfg.with_overrides("train", objective="simclr", epochs=10, batch_size=128, base_lr=0.3, lars_trust_coeff=0.02)
    return cfg.with_overrides("augment", global_size=64, local_size=32)


@pytest.mark.slow
def test_criterion_7_phantom_reproduction(phantom200, tmp_path, acceptance):
    t0 = time.perf_counter()
    cfg = desk_config(phantom200)
    rows = pipeline.run_matrix(cfg, tmp_path / "matrix", ("simclr",), AUGMENTATIONS)
    by_aug = {r["augmentation"]: r for r in rows}
    data = pipeline.prepare_data(cfg)
    random_auc = []
    for seed in cfg.run.seeds:
        rcfg = pipeline.random_encoder_config(cfg, seed)
        random_auc.append(pipeline.run_probe(rcfg, tmp_path / "random" / f"seed{seed}", None, data)["auc"])
    elapsed = time.perf_counter() - t0

    failed = sum(r["n_failed"] for r in rows)
    a = failed == 0 and all(by_aug[aug]["auc_mean"] >= 0.85 for aug in AUGMENTATIONS)
    b = by_aug["ext_multicrop"]["f1_mean"] >= by_aug["multicrop"]["f1_mean"]
    c = all(0.35 <= x <= 0.65 for x in random_auc)
    ok = a and b and c and elapsed < 30 * 60
    acceptance(
        7, ok,
        f"(a) {'ok' if a else 'FAIL'} SimCLR test AUC multicrop {by_aug['multicrop']['auc_mean']:.3f}, "
        f"ext {by_aug['ext_multicrop']['auc_mean']:.3f}; "
        f"(b) {'ok' if b else 'FAIL'} F1 ext {by_aug['ext_multicrop']['f1_mean']:.4f} vs multicrop {by_aug['multicrop']['f1_mean']:.4f}; "
        f"(c) {'ok' if c else 'FAIL'} random-encoder AUC {', '.join(f'{x:.3f}' for x in random_auc)}; "
        f"{elapsed / 60:.1f} min",
    )


# 8 ---------------------------------------------------------------------------

def test_criterion_8_determinism(small_phantom, tmp_path, acceptance):
    cfg = RunConfig().with_overrides("run", manifest=str(small_phantom))
    cfg = cfg.with_overrides("train", epochs=2, batch_size=16, base_lr=0.3, lars_trust_coeff=0.02, n_prototypes=8)
    cfg = cfg.with_overrides("augment", global_size=32, local_size=16)
    cfg = cfg.with_overrides("encoder", embedding_dim=32, projection_dim=16).with_overrides("probe", epochs=3)
    mismatched = []
    n = 0
    for objective in OBJECTIVES:
        for aug in AUGMENTATIONS:
            c = pipeline.cell_config(cfg, objective, aug, 0)
            name = pipeline.cell_name(objective, aug)
            for rep in ("a", "b"):
                res = pipeline.run_cell(c, tmp_path / rep / name)
                assert "error" not in res, res
            n += 1
            if not filecmp.cmp(tmp_path / "a" / name / "metrics.csv", tmp_path / "b" / name / "metrics.csv", shallow=False):
                mismatched.append(name)
    acceptance(8, not mismatched, f"{n - len(mismatched)}/{n} configurations gave byte-identical metrics CSVs")


# 9 ---------------------------------------------------------------------------

def test_criterion_9_split_integrity(phantom200, acceptance):
    _, records = load_manifest(phantom200)
    worst = 0.0
    leaks = 0
    for seed in range(50):
        out = stratified_split(records, seed=seed)
        s = SplitSummary.from_records(out)
        worst = max(worst, *(abs(s.positive_fraction(x) - s.positive_fraction()) for x in SPLITS))
        owners = {}
        for r in out:
            owners.setdefault(r.subject_id, set()).add(r.split)
        leaks += sum(len(v) > 1 for v in owners.values())
    ok = worst <= 0.02 + 1e-12 and leaks == 0
    acceptance(9, ok, f"worst positive-fraction deviation {100 * worst:.2f} points, {leaks} leaking subjects over 50 seeds")


def test_acceptance_names_cover_every_criterion():
    names = [n for n in globals() if n.startswith("test_criterion_")]
    assert sorted(int(n.split("_")[2]) for n in names) == list(range(1, 10))
