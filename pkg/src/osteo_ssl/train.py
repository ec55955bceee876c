"""Two-stage training: pretext learning on multi-crop views, then a linear
probe on the frozen encoder. A fully supervised baseline shares the encoder
and augmentation."""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import losses
from .augment import AugmentConfig, center_view, make_views, view_rng
from .corpus import SegmentRecord
from .metrics import MetricCurve, PredictionSet, score_predictions
from .models import EncoderConfig, LinearProbe, ProjectionHead, build_encoder, state_hash
from .optim import LARC, cosine_lr
from .segment import extract_segment, load_gray, load_mask

log = logging.getLogger(__name__)

OBJECTIVES = ("supervised", "simclr", "supcon", "swav", "vicreg")
AUGMENTATIONS = ("multicrop", "ext_multicrop")
CHECKPOINT_SCHEMA = 1


class TrainingError(RuntimeError):
    pass


class NonFiniteLossError(TrainingError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 128
    epochs: int = 100
    base_lr: float | None = None  # None: 0.6 * batch_size / 256
    final_lr: float = 0.0006
    lars_trust_coeff: float = 0.001
    weight_decay: float = 1e-6
    momentum: float = 0.9
    seed: int = 0
    objective: str = "simclr"
    augmentation: str = "multicrop"
    temperature: float | None = None  # None: objective default
    n_prototypes: int = 300
    sinkhorn_epsilon: float = losses.SWAV_EPSILON
    sinkhorn_iters: int = losses.SWAV_ITERS
    vicreg_weights: tuple[float, float, float] = losses.VICREG_WEIGHTS

    def __post_init__(self):
        self.vicreg_weights = tuple(float(w) for w in self.vicreg_weights)
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.augmentation not in AUGMENTATIONS:
            raise ValueError(f"augmentation must be one of {AUGMENTATIONS}, got {self.augmentation!r}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.peak_lr <= 0 or self.final_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.n_prototypes < 2:
            raise ValueError("n_prototypes must be >= 2")

    @property
    def peak_lr(self) -> float:
        return self.base_lr if self.base_lr is not None else 0.6 * self.batch_size / 256


@dataclass
class ProbeConfig:
    epochs: int = 50
    lr: float = 0.1
    batch_size: int = 128
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.lr <= 0 or self.batch_size < 1:
            raise ValueError("probe epochs, lr and batch_size must be positive")


def config_hash(*configs) -> str:
    blob = json.dumps([asdict(c) for c in configs], sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def set_threads() -> None:
    cap = os.environ.get("OSTEO_SSL_THREADS")
    if cap:
        torch.set_num_threads(max(1, int(cap)))


# --- data --------------------------------------------------------------------

@dataclass
class SegmentData:
    """In-memory bone segments with their labels."""

    ids: list[str]
    images: list[np.ndarray]
    labels: np.ndarray
    records: list[SegmentRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.ids)

    def subset(self, split: str) -> "SegmentData":
        keep = [k for k, r in enumerate(self.records) if r.split == split]
        return SegmentData(
            [self.ids[k] for k in keep],
            [self.images[k] for k in keep],
            self.labels[keep],
            [self.records[k] for k in keep],
        )


def load_segments(records: list[SegmentRecord], padding: int = 8) -> SegmentData:
    """Mask, crop and cache every segment, reading each radiograph once."""
    records = sorted(records, key=lambda r: r.segment_id)
    cache: dict[Path, np.ndarray] = {}
    images = []
    for r in records:
        key = Path(r.image_path)
        if key not in cache:
            cache = {key: load_gray(key)}  # records sorted by subject: one image live at a time
        images.append(extract_segment(cache[key], load_mask(r.mask_path), padding))
    labels = np.array([int(r.positive) for r in records])
    return SegmentData([r.segment_id for r in records], images, labels, records)


def _eval_tensor(images, size):
    return torch.from_numpy(np.stack([center_view(im, size) for im in images])[:, None].astype(np.float32))


@torch.no_grad()
def embed(encoder: nn.Module, data: SegmentData, size: int, batch_size: int = 256) -> np.ndarray:
    """Frozen-encoder features of the deterministic centre views."""
    was_training = encoder.training
    encoder.eval()
    feats = []
    for start in range(0, len(data), batch_size):
        x = _eval_tensor(data.images[start : start + batch_size], size)
        feats.append(encoder(x))
    encoder.train(was_training)
    return torch.cat(feats).numpy()


# --- pretext -----------------------------------------------------------------

def _objective(cfg: TrainConfig, aug: AugmentConfig, z_views, labels, prototypes):
    batch = losses.EmbeddingBatch.from_views(z_views, labels)
    v = aug.n_local
    t = cfg.temperature
    if cfg.objective == "simclr":
        return losses.simclr_loss(batch, v, t or losses.SIMCLR_TEMPERATURE)
    if cfg.objective == "supcon":
        return losses.supcon_loss(batch, v, t or losses.SUPCON_TEMPERATURE)
    if cfg.objective == "swav":
        return losses.swav_loss(
            batch, prototypes, v, t or losses.SWAV_TEMPERATURE, cfg.sinkhorn_epsilon, cfg.sinkhorn_iters
        )
    if cfg.objective == "vicreg":
        return losses.vicreg_multicrop(batch, v, cfg.vicreg_weights)
    raise TrainingError(f"no pretext objective for {cfg.objective!r}")


def _aug_for(cfg: TrainConfig, aug: AugmentConfig) -> AugmentConfig:
    return AugmentConfig(**{**asdict(aug), "extended": cfg.augmentation == "ext_multicrop"})


def _view_tensors(data: SegmentData, idx, aug: AugmentConfig, seed: int, epoch: int):
    views = [make_views(data.images[k], aug, view_rng(seed, int(k), epoch), data.ids[k]) for k in idx]
    g = np.stack([mc.globals for mc in views], 1)  # (2, S, G, G): view-major
    loc = np.stack([mc.locals for mc in views], 1)
    n_fallback = sum(mc.n_fallback for mc in views)
    g = torch.from_numpy(g.reshape(-1, 1, *g.shape[2:]).astype(np.float32))
    loc = torch.from_numpy(loc.reshape(-1, 1, *loc.shape[2:]).astype(np.float32)) if aug.n_local else None
    return g, loc, n_fallback


def save_checkpoint(ckpt: dict, path: str | Path) -> None:
    torch.save(ckpt, path)


def load_checkpoint(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if ckpt.get("schema") != CHECKPOINT_SCHEMA:
        raise TrainingError(f"{path}: unsupported checkpoint schema {ckpt.get('schema')!r}")
    return ckpt


def pretrain(
    data: SegmentData,
    cfg: TrainConfig,
    aug: AugmentConfig,
    enc: EncoderConfig,
    run_id: str = "pretrain",
    resume: dict | None = None,
    epochs: int | None = None,
) -> tuple[dict, MetricCurve]:
    """Pretext training on the segments in ``data``.

    ``resume`` continues from a checkpoint; ``epochs`` stops early after that
    many total epochs (the cosine schedule still spans ``cfg.epochs``).
    Returns the final checkpoint dict and the per-epoch loss curve.
    """
    if cfg.objective == "supervised":
        raise TrainingError("objective 'supervised' has no pretext stage; use train_supervised")
    if len(data) < 2:
        raise TrainingError("pretext training needs at least 2 segments")
    set_threads()
    aug = _aug_for(cfg, aug)
    torch.manual_seed(cfg.seed)
    encoder = build_encoder(enc)
    head = ProjectionHead(enc.embedding_dim, enc.projection_dim)
    params = list(encoder.parameters()) + list(head.parameters())
    prototypes = None
    if cfg.objective == "swav":
        prototypes = nn.Parameter(F.normalize(torch.randn(cfg.n_prototypes, enc.projection_dim), dim=1))
        params.append(prototypes)
    opt = LARC(params, lr=cfg.peak_lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay, trust_coeff=cfg.lars_trust_coeff)

    start_epoch = 0
    curve = MetricCurve(run_id)
    if resume is not None:
        encoder.load_state_dict(resume["encoder"])
        head.load_state_dict(resume["projection"])
        if prototypes is not None:
            prototypes.data.copy_(resume["prototypes"])
        opt.load_state_dict(resume["optimizer"])
        torch.set_rng_state(resume["torch_rng"])
        start_epoch = resume["epoch"]
        curve.rows = list(resume.get("curve", []))

    steps_per_epoch = -(-len(data) // cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    stop = cfg.epochs if epochs is None else min(epochs, cfg.epochs)
    encoder.train()
    head.train()
    for epoch in range(start_epoch, stop):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(data))
        epoch_loss, epoch_terms, n_batches, n_fallback = 0.0, {}, 0, 0
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            if len(idx) < 2:
                continue
            for group in opt.param_groups:
                group["lr"] = cosine_lr(epoch * steps_per_epoch + b, total_steps, cfg.peak_lr, cfg.final_lr)
            g, loc, fb = _view_tensors(data, idx, aug, cfg.seed, epoch)
            n_fallback += fb
            emb = encoder(g) if loc is None else torch.cat([encoder(g), encoder(loc)])
            z = head(emb)
            if prototypes is not None:
                with torch.no_grad():
                    prototypes.data = F.normalize(prototypes.data, dim=1)
            z_np = z.detach().double().numpy()
            z_views = np.split(z_np, aug.n_views)
            labels = data.labels[idx] if cfg.objective == "supcon" else None
            protos = prototypes.detach().double().numpy() if prototypes is not None else None
            report = _objective(cfg, aug, z_views, labels, protos)
            if not np.isfinite(report.total):
                raise NonFiniteLossError(
                    f"non-finite loss at epoch {epoch}, batch {b}: segments {[data.ids[k] for k in idx]}"
                )
            opt.zero_grad()
            z.backward(torch.from_numpy(report.grad_z).to(z.dtype))
            if prototypes is not None:
                prototypes.grad = torch.from_numpy(report.extras["grad_prototypes"]).to(prototypes.dtype)
            opt.step()
            epoch_loss += report.total
            for name, value in report.terms.items():
                epoch_terms[name] = epoch_terms.get(name, 0.0) + value
            n_batches += 1
        curve.add(epoch + 1, "train", "loss", epoch_loss / n_batches)
        for name, value in epoch_terms.items():
            curve.add(epoch + 1, "train", f"term:{name}", value / n_batches)
        curve.add(epoch + 1, "train", "fallback_views", n_fallback)
        log.info("%s epoch %d loss %.4f fallback %d", run_id, epoch + 1, epoch_loss / n_batches, n_fallback)

    ckpt = {
        "schema": CHECKPOINT_SCHEMA,
        "encoder": encoder.state_dict(),
        "projection": head.state_dict(),
        "prototypes": None if prototypes is None else prototypes.detach().clone(),
        "optimizer": opt.state_dict(),
        "epoch": stop,
        "torch_rng": torch.get_rng_state(),
        "config_hash": config_hash(cfg, aug, enc),
        "configs": {"train": asdict(cfg), "augment": asdict(aug), "encoder": asdict(enc)},
        "curve": list(curve.rows),
    }
    return ckpt, curve


# --- downstream --------------------------------------------------------------

def encoder_from_checkpoint(ckpt: dict | None, enc: EncoderConfig, seed: int = 0) -> nn.Module:
    """Encoder with checkpoint weights, or a seeded random one when ``ckpt`` is None."""
    torch.manual_seed(seed)
    encoder = build_encoder(enc)
    if ckpt is not None:
        encoder.load_state_dict(ckpt["encoder"])
    encoder.eval()
    for p in encoder.parameters():
        p.requires_grad_(False)
    return encoder


def _probs(logits: torch.Tensor) -> np.ndarray:
    return torch.softmax(logits, dim=1)[:, 1].detach().double().numpy()


def _log_split_metrics(curve, epoch, split, labels, probs):
    for name, value in score_predictions(PredictionSet([str(k) for k in range(len(labels))], labels, probs)).items():
        curve.add(epoch, split, name, value)


def fit_probe(
    train_x: np.ndarray,
    train_y: np.ndarray,
    cfg: ProbeConfig,
    val_x: np.ndarray | None = None,
    val_y: np.ndarray | None = None,
    run_id: str = "probe",
) -> tuple[LinearProbe, MetricCurve]:
    """Cross-entropy training of a linear layer on fixed features (SGD + cosine)."""
    if len(train_x) == 0:
        raise TrainingError("empty training split")
    if val_x is not None and len(val_x) == 0:
        raise TrainingError("empty validation split")
    torch.manual_seed(cfg.seed)
    mean = train_x.mean(axis=0)
    std = train_x.std(axis=0) + 1e-6
    probe = LinearProbe(train_x.shape[1], mean, std)
    opt = torch.optim.SGD(probe.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    xt = torch.from_numpy(train_x.astype(np.float32))
    yt = torch.from_numpy(train_y.astype(np.int64))
    xv = None if val_x is None else torch.from_numpy(val_x.astype(np.float32))
    steps = -(-len(xt) // cfg.batch_size)
    total = cfg.epochs * steps
    curve = MetricCurve(run_id)
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch, 1]).permutation(len(xt))
        for b in range(steps):
            idx = torch.from_numpy(order[b * cfg.batch_size : (b + 1) * cfg.batch_size])
            for group in opt.param_groups:
                group["lr"] = cosine_lr(epoch * steps + b, total, cfg.lr, 0.0)
            loss = F.cross_entropy(probe(xt[idx]), yt[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
        with torch.no_grad():
            curve.add(epoch + 1, "train", "loss", float(F.cross_entropy(probe(xt), yt)))
            _log_split_metrics(curve, epoch + 1, "train", train_y, _probs(probe(xt)))
            if xv is not None:
                _log_split_metrics(curve, epoch + 1, "val", val_y, _probs(probe(xv)))
    return probe, curve


def linear_probe(
    ckpt: dict | None,
    train: SegmentData,
    val: SegmentData,
    cfg: ProbeConfig,
    enc: EncoderConfig,
    view_size: int,
    run_id: str = "probe",
    encoder_seed: int = 0,
):
    """Train a linear classifier on frozen encoder features.

    Returns ``(encoder, probe, curve)``. ``ckpt=None`` probes a random encoder.
    """
    if len(train) == 0 or len(val) == 0:
        raise TrainingError("linear probe needs non-empty train and val splits")
    encoder = encoder_from_checkpoint(ckpt, enc, encoder_seed)
    before = state_hash(encoder)
    probe, curve = fit_probe(
        embed(encoder, train, view_size), train.labels, cfg, embed(encoder, val, view_size), val.labels, run_id
    )
    if state_hash(encoder) != before:
        raise TrainingError("encoder weights changed during linear probing")
    return encoder, probe, curve


@torch.no_grad()
def predict(encoder: nn.Module, head: nn.Module, data: SegmentData, view_size: int) -> PredictionSet:
    encoder.eval()
    head.eval()
    feats = torch.from_numpy(embed(encoder, data, view_size))
    return PredictionSet(list(data.ids), data.labels, _probs(head(feats)))


class SupervisedModel(nn.Module):
    def __init__(self, enc: EncoderConfig):
        super().__init__()
        self.encoder = build_encoder(enc)
        self.classifier = nn.Linear(enc.embedding_dim, 2)

    def forward(self, x):
        return self.classifier(self.encoder(x))


def train_supervised(
    train: SegmentData,
    val: SegmentData,
    cfg: TrainConfig,
    aug: AugmentConfig,
    enc: EncoderConfig,
    run_id: str = "supervised",
) -> tuple[SupervisedModel, MetricCurve]:
    """End-to-end cross-entropy on the two global views of each segment."""
    if len(train) == 0:
        raise TrainingError("empty training split")
    set_threads()
    aug = _aug_for(cfg, aug)
    torch.manual_seed(cfg.seed)
    model = SupervisedModel(enc)
    opt = LARC(model.parameters(), lr=cfg.peak_lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay, trust_coeff=cfg.lars_trust_coeff)
    steps = -(-len(train) // cfg.batch_size)
    total = cfg.epochs * steps
    curve = MetricCurve(run_id)
    for epoch in range(cfg.epochs):
        model.train()
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train))
        epoch_loss = 0.0
        for b in range(steps):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            if len(idx) < 2:
                continue
            for group in opt.param_groups:
                group["lr"] = cosine_lr(epoch * steps + b, total, cfg.peak_lr, cfg.final_lr)
            g, _, _ = _view_tensors(train, idx, AugmentConfig(**{**asdict(aug), "n_local": 0}), cfg.seed, epoch)
            y = torch.from_numpy(np.tile(train.labels[idx], 2).astype(np.int64))
            loss = F.cross_entropy(model(g), y)
            if not torch.isfinite(loss):
                raise NonFiniteLossError(f"non-finite loss at epoch {epoch}, batch {b}: segments {[train.ids[k] for k in idx]}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += float(loss.detach())
        curve.add(epoch + 1, "train", "loss", epoch_loss / steps)
        model.eval()
        for split, data in (("train", train), ("val", val)):
            if len(data):
                p = predict(model.encoder, model.classifier, data, aug.global_size)
                _log_split_metrics(curve, epoch + 1, split, p.labels, p.scores)
    return model, curve
