"""Pretext objectives with analytic gradients w.r.t. the embeddings.

All functions work on float64 numpy arrays and return a :class:`LossReport`
whose ``grad_z`` is d(total)/dz, so the training loop can push it through the
network with ``z.backward(grad_z)``. Every objective is expressed as a pair
loss ``l(z_v, z_i)`` and summed over view pairs by :func:`multicrop_combine`:

    L = sum_{i in {1,2}} sum_{v=1}^{V+2} [v != i] l(z_v, z_i)

Views 1 and 2 are the global crops. Each pair loss is averaged over sources.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

SIMCLR_TEMPERATURE = 0.1
SUPCON_TEMPERATURE = 0.07
SWAV_TEMPERATURE = 0.1
SWAV_EPSILON = 0.05
SWAV_ITERS = 3
VICREG_WEIGHTS = (25.0, 25.0, 1.0)  # invariance, variance, covariance
VICREG_EPS = 1e-4

# pair_loss(z_v, z_i, v, i) -> (value, grad_v, grad_i[, parts])
PairLoss = Callable[..., tuple]


class LossError(ValueError):
    pass


@dataclass
class EmbeddingBatch:
    """Embeddings of every view of every source in a batch.

    ``view_index`` runs 1..V+2 with 1 and 2 the global views.
    """

    z: np.ndarray
    view_index: np.ndarray
    source_index: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=np.float64)
        self.view_index = np.asarray(self.view_index)
        self.source_index = np.asarray(self.source_index)
        if self.labels is not None:
            self.labels = np.asarray(self.labels)
        if self.z.ndim != 2:
            raise LossError(f"z must be 2-D, got shape {self.z.shape}")
        n = len(self.z)
        if len(self.view_index) != n or len(self.source_index) != n:
            raise LossError("view_index and source_index must have one entry per row of z")
        if self.labels is not None and len(self.labels) != n:
            raise LossError("labels must have one entry per row of z")
        if not np.all(np.isfinite(self.z)):
            raise LossError("embeddings contain non-finite values")

    @classmethod
    def from_views(cls, views: list[np.ndarray], labels=None) -> "EmbeddingBatch":
        """Stack per-view ``(S, D)`` blocks; source s of every block is the same segment."""
        n_src = len(views[0])
        z = np.concatenate(views)
        view_index = np.repeat(np.arange(1, len(views) + 1), n_src)
        source_index = np.tile(np.arange(n_src), len(views))
        lab = None if labels is None else np.tile(np.asarray(labels), len(views))
        return cls(z, view_index, source_index, lab)

    def row_table(self, n_views: int) -> tuple[np.ndarray, np.ndarray]:
        """``(rows, sources)``: rows[v-1, s] is the row holding view v of the s-th source."""
        sources = np.unique(self.source_index)
        rows = np.full((n_views, len(sources)), -1)
        pos = {s: k for k, s in enumerate(sources)}
        for r, (v, s) in enumerate(zip(self.view_index, self.source_index)):
            if not 1 <= v <= n_views:
                raise LossError(f"view index {v} outside 1..{n_views}")
            if rows[v - 1, pos[s]] != -1:
                raise LossError(f"source {s} has view {v} twice")
            rows[v - 1, pos[s]] = r
        missing = np.argwhere(rows < 0)
        if len(missing):
            v, k = missing[0]
            raise LossError(f"source {sources[k]} is missing view {v + 1} ({len(missing)} missing in total)")
        return rows, sources

    def source_labels(self, rows: np.ndarray) -> np.ndarray:
        if self.labels is None:
            raise LossError("this objective needs labels")
        lab = self.labels[rows]
        if np.any(lab != lab[0]):
            raise LossError("views of one source carry different labels")
        return lab[0]


@dataclass
class LossReport:
    total: float
    terms: dict[str, float]
    grad_z: np.ndarray
    extras: dict = field(default_factory=dict)


def l2_normalize(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise LossError("zero-norm embedding cannot be normalized")
    return z / norms, norms


def _normalize_backward(grad_n: np.ndarray, n: np.ndarray, norms: np.ndarray) -> np.ndarray:
    return (grad_n - n * np.sum(n * grad_n, axis=1, keepdims=True)) / norms


def _logsumexp(x: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    return np.squeeze(m, axis) + np.log(np.sum(np.exp(x - m), axis=axis))


def _softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(x - np.max(x, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


# --- contrastive family -------------------------------------------------------

def pair_loss_ntxent(z_a, z_b, negatives, temperature: float = SIMCLR_TEMPERATURE) -> float:
    """NT-Xent for one anchor: ``-log softmax`` of the positive among positive + negatives."""
    if temperature <= 0:
        raise LossError("temperature must be positive")
    z_a = np.asarray(z_a, dtype=np.float64)
    z_b = np.asarray(z_b, dtype=np.float64)
    negatives = np.asarray(negatives, dtype=np.float64).reshape(-1, z_a.shape[0])
    for v in (z_a, z_b, *negatives):
        if np.linalg.norm(v) == 0:
            raise LossError("zero-norm embedding")
    logits = np.concatenate([[z_a @ z_b], negatives @ z_a]) / temperature
    return float(_logsumexp(logits, 0) - logits[0])


def _contrastive(anchors, contrast, pos_mask, self_mask, temperature):
    """Mean over anchors of ``-mean_{p in P(a)} log softmax_{k != a}(a.k / t)[p]``.

    Anchors without positives are skipped. Returns (loss, grad_anchors,
    grad_contrast, n_skipped).
    """
    logits = anchors @ contrast.T / temperature
    logits = np.where(self_mask, -np.inf, logits)
    n_pos = pos_mask.sum(axis=1)
    valid = n_pos > 0
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise LossError("no anchor has a positive")
    lse = _logsumexp(logits, 1)
    log_prob = logits - lse[:, None]
    per_anchor = -np.sum(np.where(pos_mask, log_prob, 0.0), axis=1) / np.maximum(n_pos, 1)
    loss = float(per_anchor[valid].mean())

    prob = np.exp(log_prob)  # zero on the self entries
    g = (prob - pos_mask / np.maximum(n_pos, 1)[:, None]) * valid[:, None] / n_valid
    g_logits = g / temperature
    return loss, g_logits @ contrast, g_logits.T @ anchors, int((~valid).sum())


def _contrastive_pair(zv, zi, same):
    """Anchors are the view-v rows; contrast set is views v and i of every source.

    ``same[s, t]`` marks sources that count as positives for each other.
    """
    n = len(zv)
    contrast = np.concatenate([zv, zi])
    self_mask = np.zeros((n, 2 * n), dtype=bool)
    self_mask[np.arange(n), np.arange(n)] = True
    pos = np.concatenate([same, same], axis=1) & ~self_mask
    return contrast, self_mask, pos


def _contrastive_pair_loss(same, temperature, skipped):
    def pair(zv, zi, v, i):
        contrast, self_mask, pos = _contrastive_pair(zv, zi, same)
        loss, g_a, g_c, n_skip = _contrastive(zv, contrast, pos, self_mask, temperature)
        skipped.append(n_skip)
        n = len(zv)
        return loss, g_a + g_c[:n], g_c[n:]

    return pair


def simclr_loss(batch: EmbeddingBatch, n_local: int, temperature: float = SIMCLR_TEMPERATURE) -> LossReport:
    """Multi-crop NT-Xent: the positive of view v is view i of the same source;
    every other source's views v and i are negatives."""
    n, norms = l2_normalize(batch.z)
    rows, sources = batch.row_table(n_local + 2)
    if len(sources) < 2:
        raise LossError("NT-Xent needs at least two sources")
    same = np.eye(len(sources), dtype=bool)
    report = multicrop_combine(
        _contrastive_pair_loss(same, temperature, []), EmbeddingBatch(n, batch.view_index, batch.source_index), n_local
    )
    report.grad_z = _normalize_backward(report.grad_z, n, norms)
    return report


def supcon_loss(batch: EmbeddingBatch, n_local: int, temperature: float = SUPCON_TEMPERATURE) -> LossReport:
    """Multi-crop supervised contrastive loss: every same-label row is a positive."""
    n, norms = l2_normalize(batch.z)
    rows, sources = batch.row_table(n_local + 2)
    if len(sources) < 2:
        raise LossError("all rows come from a single source")
    labels = batch.source_labels(rows)
    same = labels[:, None] == labels[None, :]
    skipped: list[int] = []
    report = multicrop_combine(
        _contrastive_pair_loss(same, temperature, skipped),
        EmbeddingBatch(n, batch.view_index, batch.source_index, batch.labels),
        n_local,
    )
    report.grad_z = _normalize_backward(report.grad_z, n, norms)
    report.extras["skipped_anchors"] = sum(skipped)
    return report


def supcon_flat(z: np.ndarray, labels, temperature: float = SUPCON_TEMPERATURE) -> LossReport:
    """Single-set supervised contrastive loss over all rows of ``z``.

    Rows sharing a label are positives; rows with no partner are skipped and
    counted in ``extras["skipped_anchors"]``.
    """
    labels = np.asarray(labels)
    n, norms = l2_normalize(np.asarray(z, dtype=np.float64))
    self_mask = np.eye(len(n), dtype=bool)
    pos = (labels[:, None] == labels[None, :]) & ~self_mask
    loss, g_a, g_c, n_skip = _contrastive(n, n, pos, self_mask, temperature)
    grad = _normalize_backward(g_a + g_c, n, norms)
    return LossReport(loss, {"supcon": loss}, grad, {"skipped_anchors": n_skip})


# --- SwAV --------------------------------------------------------------------

def sinkhorn_knopp(scores: np.ndarray, epsilon: float = SWAV_EPSILON, n_iters: int = SWAV_ITERS) -> np.ndarray:
    """Balanced soft assignment of N samples to K prototypes.

    Each iteration rescales prototype columns to total N/K and then sample
    rows to total 1, so the returned codes always have unit row sums.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if epsilon <= 0 or n_iters < 1:
        raise LossError("epsilon must be positive and n_iters >= 1")
    if not np.all(np.isfinite(scores)):
        raise LossError("scores contain non-finite values")
    n, k = scores.shape
    # a global shift cancels in the first normalization, unlike a per-row one
    q = np.exp((scores - scores.max()) / epsilon)
    q /= q.sum()
    for _ in range(n_iters):
        q *= (n / k) / q.sum(axis=0, keepdims=True)
        q /= q.sum(axis=1, keepdims=True)
    return q


def swav_loss(
    batch: EmbeddingBatch,
    prototypes: np.ndarray,
    n_local: int,
    temperature: float = SWAV_TEMPERATURE,
    epsilon: float = SWAV_EPSILON,
    n_iters: int = SWAV_ITERS,
    codes: dict[int, np.ndarray] | None = None,
) -> LossReport:
    """Swapped prediction: view v predicts the Sinkhorn code of global view i.

    Codes come from the global views only and are constants for the gradient;
    pass ``codes`` ({1: Q1, 2: Q2}) to reuse fixed codes. The report carries
    ``extras["grad_prototypes"]`` and ``extras["codes"]``.
    """
    prototypes = np.asarray(prototypes, dtype=np.float64)
    if prototypes.ndim != 2 or prototypes.shape[0] < 2:
        raise LossError("need at least K=2 prototypes")
    n, norms = l2_normalize(batch.z)
    rows, _ = batch.row_table(n_local + 2)
    if codes is None:
        codes = {i: sinkhorn_knopp(n[rows[i - 1]] @ prototypes.T, epsilon, n_iters) for i in (1, 2)}
    grad_c = np.zeros_like(prototypes)

    def pair(zv, zi, v, i):
        nonlocal grad_c
        q = codes[i]
        logits = zv @ prototypes.T / temperature
        log_p = logits - _logsumexp(logits, 1)[:, None]
        loss = float(-np.sum(q * log_p) / len(zv))
        g_logits = (np.exp(log_p) * q.sum(axis=1, keepdims=True) - q) / (temperature * len(zv))
        grad_c = grad_c + g_logits.T @ zv
        return loss, g_logits @ prototypes, np.zeros_like(zi)

    report = multicrop_combine(pair, EmbeddingBatch(n, batch.view_index, batch.source_index), n_local)
    report.grad_z = _normalize_backward(report.grad_z, n, norms)
    report.extras.update(grad_prototypes=grad_c, codes=codes)
    return report


# --- VICReg ------------------------------------------------------------------

def _variance_term(x, eps):
    n, d = x.shape
    xc = x - x.mean(axis=0)
    std = np.sqrt((xc**2).sum(axis=0) / (n - 1) + eps)
    active = std < 1.0
    value = float(np.mean(np.maximum(0.0, 1.0 - std)))
    grad = -(active / (d * std)) * xc / (n - 1)
    return value, grad


def _covariance_term(x):
    n, d = x.shape
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / (n - 1)
    off = cov - np.diag(np.diag(cov))
    value = float((off**2).sum() / d)
    grad = 4.0 * xc @ off / (d * (n - 1))
    return value, grad


def vicreg_loss(
    z_a: np.ndarray,
    z_b: np.ndarray,
    inv_weight: float = VICREG_WEIGHTS[0],
    var_weight: float = VICREG_WEIGHTS[1],
    cov_weight: float = VICREG_WEIGHTS[2],
    eps: float = VICREG_EPS,
) -> LossReport:
    """Two-branch VICReg on raw (unnormalized) projections.

    invariance = elementwise MSE between the branches; variance = hinge on the
    per-dimension std, averaged over dimensions and then over the two
    branches; covariance = squared off-diagonal covariance / D, summed over
    branches. ``grad_z`` stacks the gradients for ``z_a`` and ``z_b``.
    """
    z_a = np.asarray(z_a, dtype=np.float64)
    z_b = np.asarray(z_b, dtype=np.float64)
    if z_a.shape != z_b.shape:
        raise LossError(f"branch shapes differ: {z_a.shape} vs {z_b.shape}")
    n, d = z_a.shape
    if n < 2:
        raise LossError("VICReg needs at least 2 rows per branch")

    diff = z_a - z_b
    inv = float(np.mean(diff**2))
    g_inv = 2.0 * diff / diff.size

    var_a, gv_a = _variance_term(z_a, eps)
    var_b, gv_b = _variance_term(z_b, eps)
    var = 0.5 * (var_a + var_b)
    cov_a, gc_a = _covariance_term(z_a)
    cov_b, gc_b = _covariance_term(z_b)
    cov = cov_a + cov_b

    terms = {
        "invariance": inv_weight * inv,
        "variance": var_weight * var,
        "covariance": cov_weight * cov,
    }
    grad_a = inv_weight * g_inv + 0.5 * var_weight * gv_a + cov_weight * gc_a
    grad_b = -inv_weight * g_inv + 0.5 * var_weight * gv_b + cov_weight * gc_b
    return LossReport(sum(terms.values()), terms, np.concatenate([grad_a, grad_b]))


def vicreg_multicrop(
    batch: EmbeddingBatch,
    n_local: int,
    weights: tuple[float, float, float] = VICREG_WEIGHTS,
) -> LossReport:
    def pair(zv, zi, v, i):
        r = vicreg_loss(zv, zi, *weights)
        return r.total, r.grad_z[: len(zv)], r.grad_z[len(zv) :], r.terms

    return multicrop_combine(pair, batch, n_local)


# --- combiner ----------------------------------------------------------------

def multicrop_combine(pair_loss: PairLoss, batch: EmbeddingBatch, n_local: int) -> LossReport:
    """Sum ``pair_loss(z_v, z_i, v, i)`` over i in {1, 2} and v != i.

    ``pair_loss`` receives the per-source rows of the two views (aligned by
    source) and returns ``(value, grad_v, grad_i)`` or ``(value, grad_v,
    grad_i, parts)``. When parts are returned they are accumulated into the
    report's terms, otherwise each pair becomes its own term.
    """
    rows, _ = batch.row_table(n_local + 2)
    grad = np.zeros_like(batch.z)
    terms: dict[str, float] = {}
    total = 0.0
    n_pairs = 0
    for i in (1, 2):
        for v in range(1, n_local + 3):
            if v == i:
                continue
            out = pair_loss(batch.z[rows[v - 1]], batch.z[rows[i - 1]], v, i)
            value, g_v, g_i = out[:3]
            total += value
            grad[rows[v - 1]] += g_v
            grad[rows[i - 1]] += g_i
            if len(out) > 3:
                for name, part in out[3].items():
                    terms[name] = terms.get(name, 0.0) + part
            else:
                terms[f"l({v},{i})"] = value
            n_pairs += 1
    return LossReport(float(total), terms, grad, {"n_pairs": n_pairs})
