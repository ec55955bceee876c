"""Multi-crop view generation for bone segments.

Each source segment yields 2 global views and ``n_local`` local views. Every
view is independently rotated, flipped and then cropped. The extended variant
redraws a crop until at least ``nonzero_threshold`` of its pixels are bone,
which keeps local views from landing on the empty margins that masking leaves
around a segment.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from scipy import ndimage

from .segment import nonzero_fraction

GLOBAL_SCALE = (0.14, 1.0)
LOCAL_SCALE = (0.05, 0.14)
ASPECT_RANGE = (3.0 / 4.0, 4.0 / 3.0)


class AugmentError(ValueError):
    pass


@dataclass
class AugmentConfig:
    global_size: int = 224
    local_size: int = 96
    n_local: int = 4
    rotation_range: float = 20.0
    hflip_prob: float = 0.5
    vflip_prob: float = 0.5
    global_scale_range: tuple[float, float] = GLOBAL_SCALE
    local_scale_range: tuple[float, float] = LOCAL_SCALE
    nonzero_threshold: float = 0.10
    max_attempts: int = 100
    extended: bool = False

    def __post_init__(self):
        self.global_scale_range = tuple(float(s) for s in self.global_scale_range)
        self.local_scale_range = tuple(float(s) for s in self.local_scale_range)
        self.validate()

    def validate(self) -> None:
        if self.global_size < 2 or self.local_size < 2:
            raise AugmentError("view sizes must be at least 2 pixels")
        if self.n_local < 0:
            raise AugmentError("n_local must be non-negative")
        if not 0.0 <= self.nonzero_threshold < 1.0:
            raise AugmentError(f"nonzero_threshold must lie in [0, 1), got {self.nonzero_threshold}")
        for name in ("global_scale_range", "local_scale_range"):
            lo, hi = getattr(self, name)
            if not 0.0 < lo <= hi <= 1.0:
                raise AugmentError(f"{name} must satisfy 0 < min <= max <= 1, got {(lo, hi)}")
        if self.max_attempts < 1:
            raise AugmentError("max_attempts must be >= 1")
        for name in ("hflip_prob", "vflip_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise AugmentError(f"{name} must be a probability")

    @property
    def n_views(self) -> int:
        return 2 + self.n_local


@dataclass
class MultiCropViews:
    globals: np.ndarray  # (2, global_size, global_size)
    locals: np.ndarray  # (n_local, local_size, local_size)
    source_id: str = ""
    rng_seed: int | None = None
    fractions: list[float] = field(default_factory=list)
    fallback: list[bool] = field(default_factory=list)

    @property
    def views(self) -> list[np.ndarray]:
        return [*self.globals, *self.locals]

    @property
    def n_fallback(self) -> int:
        return sum(self.fallback)


def view_rng(seed: int, sample_index: int, epoch: int = 0) -> np.random.Generator:
    """Independent stream per (seed, sample, epoch), so workers need no shared state."""
    return np.random.default_rng([seed, sample_index, epoch])


def rotate(image: np.ndarray, angle: float) -> np.ndarray:
    """Bilinear rotation about the centre, same shape, zero fill."""
    if angle == 0.0:
        return image.copy()
    out = ndimage.rotate(image, angle, reshape=False, order=1, mode="constant", cval=0.0)
    # bilinear weights can overshoot by float rounding; keep the [0, 1] contract
    return np.clip(out, 0.0, 1.0)


def random_rotate(image: np.ndarray, rng: np.random.Generator, max_angle: float = 20.0) -> np.ndarray:
    return rotate(image, float(rng.uniform(-max_angle, max_angle)))


def flip(image: np.ndarray, horizontal: bool, vertical: bool) -> np.ndarray:
    if horizontal:
        image = image[:, ::-1]
    if vertical:
        image = image[::-1, :]
    return np.ascontiguousarray(image)


def random_flip(
    image: np.ndarray, rng: np.random.Generator, hflip_prob: float = 0.5, vflip_prob: float = 0.5
) -> np.ndarray:
    h = bool(rng.random() < hflip_prob)
    v = bool(rng.random() < vflip_prob)
    return flip(image, h, v)


def resize(image: np.ndarray, size: int) -> np.ndarray:
    out = Image.fromarray(image.astype(np.float32)).resize((size, size), Image.BILINEAR)
    return np.clip(np.asarray(out, dtype=np.float64), 0.0, 1.0)


def crop_box(
    shape: tuple[int, int], scale_range: tuple[float, float], rng: np.random.Generator
) -> tuple[int, int, int, int]:
    """Random-resized-crop box ``(top, left, height, width)``.

    Tries 10 draws of (area fraction, log-uniform aspect); falls back to the
    largest centred box whose aspect ratio is inside the allowed range.
    """
    height, width = shape
    if height < 2 or width < 2:
        raise AugmentError(f"cannot crop a {height}x{width} image")
    area = height * width
    log_lo, log_hi = math.log(ASPECT_RANGE[0]), math.log(ASPECT_RANGE[1])
    for _ in range(10):
        target = area * rng.uniform(*scale_range)
        aspect = math.exp(rng.uniform(log_lo, log_hi))
        w = int(round(math.sqrt(target * aspect)))
        h = int(round(math.sqrt(target / aspect)))
        if 0 < w <= width and 0 < h <= height:
            top = int(rng.integers(0, height - h + 1))
            left = int(rng.integers(0, width - w + 1))
            return top, left, h, w

    in_ratio = width / height
    if in_ratio < ASPECT_RANGE[0]:
        w = width
        h = int(round(w / ASPECT_RANGE[0]))
    elif in_ratio > ASPECT_RANGE[1]:
        h = height
        w = int(round(h * ASPECT_RANGE[1]))
    else:
        w, h = width, height
    return (height - h) // 2, (width - w) // 2, h, w


def sample_crop(
    image: np.ndarray, out_size: int, scale_range: tuple[float, float], rng: np.random.Generator
) -> np.ndarray:
    top, left, h, w = crop_box(image.shape, scale_range, rng)
    return resize(image[top : top + h, left : left + w], out_size)


def rejection_crop(
    image: np.ndarray,
    out_size: int,
    scale_range: tuple[float, float],
    threshold: float,
    max_attempts: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, bool]:
    """Redraw crops until the bone fraction reaches ``threshold``.

    Returns ``(view, fallback)``. After ``max_attempts`` misses the crop with
    the largest non-zero fraction is returned and ``fallback`` is True.
    """
    best, best_frac = None, -1.0
    for _ in range(max_attempts):
        view = sample_crop(image, out_size, scale_range, rng)
        frac = nonzero_fraction(view)
        if frac >= threshold:
            return view, False
        if frac > best_frac:
            best, best_frac = view, frac
    return best, True


def _augment_one(image, size, scale_range, config, rng):
    view = random_rotate(image, rng, config.rotation_range)
    view = random_flip(view, rng, config.hflip_prob, config.vflip_prob)
    if config.extended:
        return rejection_crop(
            view, size, scale_range, config.nonzero_threshold, config.max_attempts, rng
        )
    return sample_crop(view, size, scale_range, rng), False


def _views(image, config, rng, source_id, rng_seed):
    globals_, locals_, fractions, fallback = [], [], [], []
    for k in range(config.n_views):
        is_global = k < 2
        size = config.global_size if is_global else config.local_size
        scale = config.global_scale_range if is_global else config.local_scale_range
        view, fb = _augment_one(image, size, scale, config, rng)
        (globals_ if is_global else locals_).append(view)
        fractions.append(nonzero_fraction(view))
        fallback.append(fb)
    locals_arr = (
        np.stack(locals_) if locals_ else np.zeros((0, config.local_size, config.local_size))
    )
    return MultiCropViews(np.stack(globals_), locals_arr, source_id, rng_seed, fractions, fallback)


def multi_crop(
    image: np.ndarray,
    config: AugmentConfig,
    rng: np.random.Generator,
    source_id: str = "",
    rng_seed: int | None = None,
) -> MultiCropViews:
    """Original multi-crop: no guarantee that a view contains any bone."""
    if config.extended:
        raise AugmentError("multi_crop expects extended=False; use extended_multi_crop")
    return _views(image, config, rng, source_id, rng_seed)


def extended_multi_crop(
    image: np.ndarray,
    config: AugmentConfig,
    rng: np.random.Generator,
    source_id: str = "",
    rng_seed: int | None = None,
) -> MultiCropViews:
    """Multi-crop where every view is rejection-sampled against the bone-fraction threshold."""
    if not config.extended:
        raise AugmentError("extended_multi_crop expects extended=True")
    return _views(image, config, rng, source_id, rng_seed)


def make_views(image, config, rng, source_id="", rng_seed=None) -> MultiCropViews:
    fn = extended_multi_crop if config.extended else multi_crop
    return fn(image, config, rng, source_id, rng_seed)


def center_view(image: np.ndarray, size: int) -> np.ndarray:
    """Deterministic evaluation view: zero-pad to a square, then resize."""
    h, w = image.shape
    side = max(h, w)
    canvas = np.zeros((side, side), dtype=np.float64)
    top, left = (side - h) // 2, (side - w) // 2
    canvas[top : top + h, left : left + w] = image
    return resize(canvas, size)
