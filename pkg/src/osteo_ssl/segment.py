"""Mask-based bone segment extraction.

Raw radiographs and per-bone masks are read as single-channel PNGs and
normalized to [0, 1]. A segment is the Hadamard product of image and mask,
cropped to the mask's bounding box. Masks normally come from an external
prompt-driven segmenter; :func:`threshold_segmenter` is a stand-in used for
phantom data.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

BONE_NAMES = (
    "ulna",
    "radius",
    "metacarpal1",
    "metacarpal2",
    "metacarpal3",
    "metacarpal4",
    "metacarpal5",
)

DEFAULT_PADDING = 8


class SegmentationError(ValueError):
    pass


@dataclass
class PointPromptSet:
    """Positive/negative (x, y) point prompts for one bone."""

    bone: str
    positives: list[tuple[int, int]]
    negatives: list[tuple[int, int]] = field(default_factory=list)

    def validate(self, shape: tuple[int, int]) -> None:
        if not self.positives:
            raise SegmentationError(f"{self.bone}: at least one positive prompt required")
        h, w = shape
        for x, y in [*self.positives, *self.negatives]:
            if not (0 <= x < w and 0 <= y < h):
                raise SegmentationError(f"{self.bone}: prompt ({x}, {y}) outside {w}x{h} image")


def load_gray(path: str | Path) -> np.ndarray:
    """Read a single-channel PNG as float64 in [0, 1] (8-bit /255, 16-bit /65535)."""
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim != 2:
        raise SegmentationError(f"{path}: expected a single-channel image, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    if arr.dtype in (np.uint16, np.int32):
        # PIL may surface 16-bit PNGs as mode "I" (int32)
        return arr.astype(np.float64) / 65535.0
    raise SegmentationError(f"{path}: unsupported pixel type {arr.dtype}")


def load_mask(path: str | Path) -> np.ndarray:
    """Read a mask PNG; any non-zero pixel is bone."""
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim != 2:
        raise SegmentationError(f"{path}: expected a single-channel mask, got shape {arr.shape}")
    return arr != 0


def save_gray(image: np.ndarray, path: str | Path, bits: int = 8) -> None:
    if bits == 8:
        data = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    elif bits == 16:
        data = np.round(np.clip(image, 0.0, 1.0) * 65535.0).astype(np.uint16)
    else:
        raise ValueError(f"bits must be 8 or 16, got {bits}")
    Image.fromarray(data).save(path)


def save_mask(mask: np.ndarray, path: str | Path) -> None:
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8)).save(path)


def load_prompts(path: str | Path) -> dict[str, PointPromptSet]:
    """Parse a JSON-lines prompt file, one object per bone."""
    prompts = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            bone = obj["bone"]
            pos = [tuple(map(int, p)) for p in obj["pos"]]
            neg = [tuple(map(int, p)) for p in obj.get("neg", [])]
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise SegmentationError(f"{path}:{lineno}: malformed prompt ({exc})") from exc
        prompts[bone] = PointPromptSet(bone, pos, neg)
    return prompts


def apply_mask(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Zero every pixel outside the mask."""
    if image.shape != mask.shape:
        raise SegmentationError(f"image {image.shape} and mask {mask.shape} differ in shape")
    return np.where(mask.astype(bool), image, 0.0)


def bbox(segment: np.ndarray, padding: int = 0) -> tuple[int, int, int, int]:
    """Inclusive (row0, row1, col0, col1) box around non-zero pixels, padded and clamped."""
    rows = np.flatnonzero(segment.any(axis=1))
    cols = np.flatnonzero(segment.any(axis=0))
    if rows.size == 0:
        raise SegmentationError("segment has no non-zero pixels (empty mask upstream?)")
    h, w = segment.shape
    return (
        max(rows[0] - padding, 0),
        min(rows[-1] + padding, h - 1),
        max(cols[0] - padding, 0),
        min(cols[-1] + padding, w - 1),
    )


def crop_to_bbox(segment: np.ndarray, padding: int = DEFAULT_PADDING) -> np.ndarray:
    r0, r1, c0, c1 = bbox(segment, padding)
    return segment[r0 : r1 + 1, c0 : c1 + 1].copy()


def nonzero_fraction(image: np.ndarray) -> float:
    return float(np.count_nonzero(image > 0)) / image.size


def threshold_segmenter(image: np.ndarray, prompts: PointPromptSet, threshold: float) -> np.ndarray:
    """Connected component of ``image >= threshold`` selected by point prompts.

    Returns the union of components hit by a positive prompt, provided none of
    them also contains a negative prompt.
    """
    prompts.validate(image.shape)
    labels, _ = ndimage.label(image >= threshold)
    chosen = {int(labels[y, x]) for x, y in prompts.positives} - {0}
    if not chosen:
        raise SegmentationError(f"{prompts.bone}: no positive prompt lies on a bright component")
    banned = {int(labels[y, x]) for x, y in prompts.negatives} - {0}
    chosen -= banned
    if not chosen:
        raise SegmentationError(f"{prompts.bone}: every prompted component also holds a negative prompt")
    return np.isin(labels, sorted(chosen))


def extract_segment(
    image: np.ndarray, mask: np.ndarray, padding: int = DEFAULT_PADDING
) -> np.ndarray:
    return crop_to_bbox(apply_mask(image, mask), padding)
