"""Procedural hand/wrist radiograph phantoms with per-bone ground truth.

Each subject gets one image with seven capsule-shaped bones (ulna, radius and
five fanned metacarpals). A bone is a bright cortical shell around a dimmer
trabecular core. Cortical thickness shrinks and trabecular porosity grows as
the subject's T-score falls, so the osteoporosis label is visible in the
pixels but mixed with nuisance variation (hand pose, bone size, exposure).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .corpus import MANIFEST_COLUMNS, OSTEO_THRESHOLD
from .segment import BONE_NAMES, save_gray, save_mask

POSITIVE_MODE = (-3.2, 0.6)
NORMAL_MODE = (-0.5, 0.6)
MIN_IMAGE_SIZE = 128
CORTEX_LEVEL = 0.92
CORE_LEVEL = 0.50
RADIUS_JITTER = (0.7, 1.4)  # per-bone size nuisance
BONE_GAIN = (0.6, 1.0)  # per-bone density nuisance

# (axial start, axial end, lateral offset, radius, fan angle in degrees) in
# hand coordinates for a 256 px image; the hand axis points "up" before the
# per-subject pose rotation.
_LAYOUT = {
    "ulna": (-105.0, -18.0, -17.0, 9.0, 0.0),
    "radius": (-105.0, -18.0, 17.0, 11.0, 0.0),
    "metacarpal1": (6.0, 52.0, -30.0, 6.5, -34.0),
    "metacarpal2": (6.0, 66.0, -15.0, 6.5, -14.0),
    "metacarpal3": (6.0, 70.0, 0.0, 6.5, 0.0),
    "metacarpal4": (6.0, 66.0, 15.0, 6.0, 14.0),
    "metacarpal5": (6.0, 58.0, 30.0, 6.0, 30.0),
}


class PhantomError(ValueError):
    pass


@dataclass
class PhantomSpec:
    n_subjects: int = 200
    image_size: int = 256
    positive_fraction: float = 0.29
    noise_level: float = 0.12
    pose_range: tuple[float, float] = (25.0, 55.0)
    seed: int = 0

    def __post_init__(self):
        self.pose_range = tuple(float(a) for a in self.pose_range)
        self.validate()

    def validate(self) -> None:
        if self.n_subjects < 1:
            raise PhantomError("n_subjects must be >= 1")
        if not 0.0 < self.positive_fraction < 1.0:
            raise PhantomError(f"positive_fraction must lie in (0, 1), got {self.positive_fraction}")
        if self.image_size < MIN_IMAGE_SIZE:
            raise PhantomError(
                f"image_size {self.image_size} too small to place 7 bones (need >= {MIN_IMAGE_SIZE})"
            )
        if self.noise_level < 0:
            raise PhantomError("noise_level must be non-negative")


def cortical_fraction(t_score: float) -> float:
    """Cortical shell thickness as a fraction of bone radius; increasing in T-score."""
    return float(np.clip(0.42 + 0.11 * (t_score + 2.5), 0.12, 0.85))


def porosity(t_score: float) -> float:
    """Trabecular void fraction; decreasing in T-score."""
    return float(np.clip(0.30 - 0.06 * (t_score + 2.5), 0.05, 0.6))


def sample_t_scores(n: int, positive_fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Bimodal T-scores with an exact Bernoulli(positive_fraction) class draw.

    The class is drawn first, then the T-score from that class's mode truncated
    to the correct side of the threshold, so the realized balance does not
    depend on how much the two modes overlap.
    """
    positive = rng.random(n) < positive_fraction
    out = np.empty(n)
    for k in range(n):
        mean, sd = POSITIVE_MODE if positive[k] else NORMAL_MODE
        while True:
            t = rng.normal(mean, sd)
            if (t < OSTEO_THRESHOLD) == positive[k]:
                break
        out[k] = t
    return out


def _capsule_distance(yy, xx, p0, p1):
    """Distance from each pixel to the segment p0-p1 (points as (x, y))."""
    d = np.subtract(p1, p0)
    length2 = float(d @ d)
    px, py = xx - p0[0], yy - p0[1]
    s = np.clip((px * d[0] + py * d[1]) / length2, 0.0, 1.0)
    return np.hypot(px - s * d[0], py - s * d[1])


def _bone_geometry(size, pose_deg, scale, jitter):
    """Endpoints (x, y) and radius per bone after pose rotation and scaling."""
    unit = size / 256.0
    c = (size - 1) / 2.0
    theta = math.radians(pose_deg)
    cos_t, sin_t = math.cos(theta), math.sin(theta)

    def to_image(u, w):
        # hand axis "up" is -y; rotate the (lateral, axial) frame by the pose
        x, y = w, -u
        xr = cos_t * x - sin_t * y
        yr = sin_t * x + cos_t * y
        return np.array([c + xr * unit * scale, c + 12 * unit + yr * unit * scale])

    geometry = {}
    for k, (bone, (u0, u1, w0, radius, fan)) in enumerate(_LAYOUT.items()):
        u1 = u0 + (u1 - u0) * jitter[k]
        phi = math.radians(fan)
        start = to_image(u0, w0)
        end = to_image(u0 + (u1 - u0) * math.cos(phi), w0 + (u1 - u0) * math.sin(phi))
        geometry[bone] = (start, end, radius * unit * scale)
    return geometry


def render_subject(t_score: float, spec: PhantomSpec, rng: np.random.Generator):
    """Render one radiograph and its per-bone masks.

    Returns ``(image, masks, prompts)`` where masks maps bone name to a boolean
    array and prompts maps bone name to ``{"pos": [...], "neg": [...]}``.
    """
    size = spec.image_size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    sign = rng.choice([-1.0, 1.0])
    pose = sign * rng.uniform(*spec.pose_range)
    scale = rng.uniform(0.85, 1.05)
    jitter = rng.uniform(0.9, 1.1, size=len(_LAYOUT))
    exposure = rng.uniform(0.75, 1.0)
    geometry = _bone_geometry(size, pose, scale, jitter)

    # soft tissue: a blurred envelope around the bones
    envelope = np.zeros((size, size))
    for start, end, radius in geometry.values():
        envelope = np.maximum(envelope, _capsule_distance(yy, xx, start, end) <= radius + 10 * size / 256)
    image = 0.10 * ndimage.gaussian_filter(envelope.astype(float), 4.0)

    frac = cortical_fraction(t_score)
    pores = porosity(t_score)
    masks, centres = {}, {}
    for bone, (start, end, radius) in geometry.items():
        radius = radius * rng.uniform(*RADIUS_JITTER)
        dist = _capsule_distance(yy, xx, start, end)
        mask = dist <= radius
        if not mask.any():
            raise PhantomError(f"{bone} did not rasterize; image too small")
        shell = dist >= radius * (1.0 - frac)
        # porous trabecular core: blobs of low density
        voids = ndimage.gaussian_filter(rng.normal(size=(size, size)), 1.2)
        voids = voids > np.quantile(voids[mask], 1.0 - pores)
        core_level = CORE_LEVEL * np.where(voids, 0.45, 1.0)
        bone_level = np.where(shell, CORTEX_LEVEL, core_level) * rng.uniform(*BONE_GAIN)
        image = np.where(mask, bone_level, image)
        masks[bone] = mask
        centres[bone] = (start + end) / 2.0

    image = ndimage.gaussian_filter(image, 0.6) * exposure
    if spec.noise_level > 0:
        image = image * (1.0 + spec.noise_level * rng.normal(size=image.shape))
    image = np.clip(image, 0.0, 1.0)
    for mask in masks.values():
        # bone pixels stay strictly positive so masking never erases them
        image[mask] = np.maximum(image[mask], 0.02)

    prompts = {}
    for bone, centre in centres.items():
        pos = [int(round(centre[0])), int(round(centre[1]))]
        neg = [
            [int(round(other[0])), int(round(other[1]))]
            for name, other in centres.items()
            if name != bone and np.linalg.norm(other - centre) < 45 * size / 256
        ]
        prompts[bone] = {"pos": [pos], "neg": neg}
    return image, masks, prompts


def shell_width(image: np.ndarray, mask: np.ndarray) -> float:
    """Estimate cortical shell thickness relative to bone radius.

    Averages intensity over rings at equal distance from the mask edge and
    reports where the ring mean first falls to the midpoint between the outer
    shell level and the core level.
    """
    depth = ndimage.distance_transform_edt(mask)
    radius = depth.max()
    rings = np.floor(depth[mask]).astype(int)
    values = image[mask]
    counts = np.bincount(rings)
    profile = np.bincount(rings, weights=values) / np.maximum(counts, 1)
    valid = counts >= 5
    profile, depths = profile[valid], np.flatnonzero(valid)
    outer = profile[: max(2, len(profile) // 3)].max()
    inner = np.median(profile[depths >= 0.75 * depths.max()]) if len(profile) > 2 else profile[-1]
    mid = 0.5 * (outer + inner)
    peak = int(np.argmax(profile))
    for k in range(peak, len(profile) - 1):
        if profile[k + 1] < mid <= profile[k]:
            step = (profile[k] - mid) / (profile[k] - profile[k + 1])
            return float((depths[k] + step * (depths[k + 1] - depths[k])) / radius)
    return float(depths[-1] / radius)


def rule_classifier(image: np.ndarray, mask: np.ndarray) -> bool:
    """Hand-written reference rule: thin measured cortex means osteoporosis."""
    return shell_width(image, mask) < RULE_CUTOFF


# measured width is biased by blur and pixelation; calibrated on noise-free renders
RULE_CUTOFF = 0.425


def generate_phantom(spec: PhantomSpec, out_dir: str | Path) -> Path:
    """Write images, masks, prompts and a corpus manifest under ``out_dir``.

    Returns the manifest path. Deterministic given ``spec.seed``.
    """
    spec.validate()
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(exist_ok=True)
    (out / "prompts").mkdir(exist_ok=True)

    seeds = np.random.SeedSequence(spec.seed)
    t_scores = sample_t_scores(spec.n_subjects, spec.positive_fraction, np.random.default_rng(seeds.spawn(1)[0]))
    subject_seeds = seeds.spawn(spec.n_subjects)
    rows = []
    width = max(3, len(str(spec.n_subjects - 1)))
    for k in range(spec.n_subjects):
        sid = f"S{k:0{width}d}"
        image, masks, prompts = render_subject(t_scores[k], spec, np.random.default_rng(subject_seeds[k]))
        image_path = out / "images" / f"{sid}.png"
        save_gray(image, image_path, bits=16)
        with open(out / "prompts" / f"{sid}.jsonl", "w") as fh:
            for bone in BONE_NAMES:
                fh.write(json.dumps({"bone": bone, **prompts[bone]}) + "\n")
        for bone in BONE_NAMES:
            mask_path = out / "masks" / f"{sid}_{bone}.png"
            save_mask(masks[bone], mask_path)
            rows.append(
                {
                    "subject_id": sid,
                    "bone_name": bone,
                    "image_path": str(image_path.relative_to(out)),
                    "mask_path": str(mask_path.relative_to(out)),
                    "t_score": f"{t_scores[k]:.6f}",
                }
            )

    manifest = out / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    (out / "phantom_spec.json").write_text(json.dumps(asdict(spec), indent=2))
    return manifest
