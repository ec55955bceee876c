"""Encoders, projection head and linear probe."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn


@dataclass
class EncoderConfig:
    architecture: str = "small_cnn"
    embedding_dim: int = 128
    projection_dim: int = 64

    def __post_init__(self):
        if self.architecture not in ("small_cnn", "resnet50"):
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.embedding_dim < 2 or self.projection_dim < 2:
            raise ValueError("embedding_dim and projection_dim must be >= 2")
        if self.architecture == "resnet50" and self.embedding_dim != 2048:
            raise ValueError("resnet50 produces 2048-d embeddings; set embedding_dim = 2048")
        if self.architecture == "small_cnn" and self.embedding_dim % 8:
            raise ValueError("small_cnn embedding_dim must be a multiple of 8")


def _block(c_in, c_out):
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, padding=1, bias=False),
        nn.BatchNorm2d(c_out),
        nn.ReLU(inplace=True),
        nn.MaxPool2d(2),
    )


class SmallCNN(nn.Module):
    """Four conv blocks and global average pooling; any input size >= 16 px."""

    def __init__(self, embedding_dim: int = 128):
        super().__init__()
        d = embedding_dim
        self.features = nn.Sequential(_block(1, d // 8), _block(d // 8, d // 4), _block(d // 4, d // 2), _block(d // 2, d))
        self.pool = nn.AdaptiveAvgPool2d(1)

    def forward(self, x):
        return torch.flatten(self.pool(self.features(x)), 1)


def _resnet50():
    from torchvision.models import resnet50

    net = resnet50(weights=None)
    net.conv1 = nn.Conv2d(1, 64, kernel_size=7, stride=2, padding=3, bias=False)
    net.fc = nn.Identity()
    return net


def build_encoder(config: EncoderConfig) -> nn.Module:
    if config.architecture == "resnet50":
        return _resnet50()
    return SmallCNN(config.embedding_dim)


class ProjectionHead(nn.Module):
    def __init__(self, in_dim: int, out_dim: int = 64, hidden: int | None = None):
        super().__init__()
        hidden = hidden or in_dim
        self.net = nn.Sequential(
            nn.Linear(in_dim, hidden), nn.BatchNorm1d(hidden), nn.ReLU(inplace=True), nn.Linear(hidden, out_dim)
        )

    def forward(self, x):
        return self.net(x)


class LinearProbe(nn.Module):
    """Affine map from (standardized) embeddings to 2 logits.

    Standardization statistics are fixed buffers, so the logits stay affine in
    the raw embedding.
    """

    def __init__(self, dim: int, mean=None, std=None):
        super().__init__()
        self.register_buffer("mean", torch.zeros(dim) if mean is None else torch.as_tensor(mean, dtype=torch.float32))
        self.register_buffer("std", torch.ones(dim) if std is None else torch.as_tensor(std, dtype=torch.float32))
        self.linear = nn.Linear(dim, 2)

    def forward(self, x):
        return self.linear((x - self.mean) / self.std)

    def affine(self) -> tuple[np.ndarray, np.ndarray]:
        """Equivalent ``(W, b)`` acting on raw embeddings."""
        w = (self.linear.weight / self.std).detach().numpy()
        b = (self.linear.bias - self.linear.weight @ (self.mean / self.std)).detach().numpy()
        return w, b


def state_hash(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
