"""Procedural lesion images with per-color masks and image-level labels.

One sample is built in four steps: a lesion shape (and an independent
attribute blob inside it), a two-tone skin background, lesion painting where
the first color of the drawn combination fills the lesion and every further
color claims a sub-region of what is still base-colored, and finally the
lesion/border masks derived from the color masks.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import noise
from .palette import COLOR_NAMES, NUM_TONES, ColorBank, SkinTonePalette, DEFAULT_DARK_TONE, DEFAULT_LIGHT_TONE


class DegenerateMaskError(RuntimeError):
    """Raised when no acceptable lesion shape was found within the retry budget."""


@dataclass
class LesionPrior:
    source: str = "procedural"          # procedural | directory
    mask_dir: Optional[str] = None
    noise_scale: float = 3.0
    octaves: int = 3
    threshold: float = 0.5
    morph_radius: int = 1
    envelope_weight: float = 0.7
    target_area: tuple = (0.10, 0.36)  # area of the ellipse the blob grows around
    area_range: tuple = (0.05, 0.45)   # accepted blob area, fraction of the image
    max_retries: int = 16

    def __post_init__(self):
        if self.source not in ("procedural", "directory"):
            raise ValueError(f"lesion source must be 'procedural' or 'directory', got {self.source!r}")
        if self.source == "directory" and not self.mask_dir:
            raise ValueError("directory lesion source needs mask_dir")
        lo, hi = self.area_range
        if not 0 <= lo < hi <= 1:
            raise ValueError(f"area_range must satisfy 0 <= min < max <= 1, got {self.area_range}")
        self.area_range = (float(lo), float(hi))
        self.target_area = tuple(float(v) for v in self.target_area)
        if self.max_retries < 1:
            raise ValueError("max_retries must be >= 1")


@dataclass
class SynSkinConfig:
    image_size: int = 64
    light_tone: tuple = DEFAULT_LIGHT_TONE
    dark_tone: tuple = DEFAULT_DARK_TONE
    skin_jitter: int = 4                # per-pixel, both skin and lesion
    background_threshold: tuple = (0.35, 0.65)
    background_scale: float = 4.0
    attribute_threshold: tuple = (0.3, 0.6)
    subregion_fraction: tuple = (0.12, 0.28)  # of the lesion area, per extra color
    subregion_scale: float = 3.0
    min_region_px: int = 12
    subregion_retries: int = 8
    border_radius: int = 2
    lesion: LesionPrior = field(default_factory=LesionPrior)
    colors: ColorBank = field(default_factory=ColorBank)

    def __post_init__(self):
        if isinstance(self.lesion, dict):
            self.lesion = LesionPrior(**self.lesion)
        if isinstance(self.colors, dict):
            self.colors = ColorBank.from_dict(self.colors)
        if self.image_size < 8:
            raise ValueError(f"image_size must be >= 8, got {self.image_size}")
        lo, hi = self.subregion_fraction
        if not 0 < lo <= hi < 1:
            raise ValueError(f"subregion_fraction must satisfy 0 < lo <= hi < 1, got {self.subregion_fraction}")
        self.palette = SkinTonePalette.ramp(self.light_tone, self.dark_tone)

    @property
    def shape(self) -> tuple:
        return (self.image_size, self.image_size)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        d["lesion"] = dataclasses.asdict(self.lesion)
        d["colors"] = self.colors.to_dict()
        return _plain(d)

    @classmethod
    def from_dict(cls, d: dict) -> "SynSkinConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown synskin config keys: {sorted(unknown)}")
        d = dict(d)
        for k in ("light_tone", "dark_tone", "background_threshold", "attribute_threshold",
                  "subregion_fraction"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    return x


@dataclass
class SynSample:
    image: np.ndarray          # (H, W, 3) uint8
    lesion_mask: np.ndarray    # (H, W) bool
    border_mask: np.ndarray
    color_masks: np.ndarray    # (6, H, W) bool, order of COLOR_NAMES
    labels: np.ndarray         # (6,) uint8
    seed: int
    combo: int

    def check(self) -> None:
        """Raise AssertionError if any mask/label invariant is broken."""
        present = self.color_masks.reshape(len(COLOR_NAMES), -1).any(axis=1)
        assert np.array_equal(present.astype(np.uint8), self.labels), "labels disagree with masks"
        assert np.array_equal(self.color_masks.any(axis=0), self.lesion_mask), "lesion != union"
        assert (self.color_masks.sum(axis=0) <= 1).all(), "color masks overlap"


# -- step 1: shapes ---------------------------------------------------------

def _ellipse_envelope(rng, shape, area: float) -> np.ndarray:
    h, w = shape
    r = np.sqrt(area * h * w / np.pi)
    aspect = rng.uniform(0.65, 1.0)
    ry, rx = r * np.sqrt(aspect), r / np.sqrt(aspect)
    cy = h / 2 + rng.normal(0, 0.06 * h)
    cx = w / 2 + rng.normal(0, 0.06 * w)
    theta = rng.uniform(0, np.pi)
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    dist = np.sqrt((u / rx) ** 2 + (v / ry) ** 2)
    # 1 at the center, 0.5 on the ellipse, 0 at twice its radius
    return np.clip(1 - dist / 2, 0, 1)


def _load_mask(path: Path, shape) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        im = im.convert("L")
        if im.size != (shape[1], shape[0]):
            im = im.resize((shape[1], shape[0]), Image.NEAREST)
        return np.asarray(im) > 127


def list_mask_files(mask_dir) -> list:
    d = Path(mask_dir)
    if not d.is_dir():
        raise FileNotFoundError(f"mask directory not found: {d}")
    files = sorted(p for p in d.iterdir() if p.suffix.lower() in (".png", ".bmp", ".jpg", ".jpeg"))
    if not files:
        raise FileNotFoundError(f"mask directory is empty: {d}")
    return files


def sample_lesion_mask(rng, prior: LesionPrior, shape=(64, 64)) -> np.ndarray:
    """One binary lesion mask: a noisy blob or a file from ``prior.mask_dir``."""
    if prior.source == "directory":
        files = list_mask_files(prior.mask_dir)
        return _load_mask(files[int(rng.integers(len(files)))], shape)
    lo, hi = prior.area_range
    for _ in range(prior.max_retries):
        env = _ellipse_envelope(rng, shape, rng.uniform(*prior.target_area))
        blob = noise.noise_texture(rng, shape, prior.threshold, prior.morph_radius,
                                   scale=prior.noise_scale, octaves=prior.octaves,
                                   envelope=env, envelope_weight=prior.envelope_weight)
        blob = noise.fill_holes(noise.largest_component(blob))
        if lo <= blob.mean() <= hi:
            return blob
    raise DegenerateMaskError(
        f"no lesion blob with area fraction in [{lo}, {hi}] after {prior.max_retries} tries")


def sample_attribute_mask(rng, lesion_mask: np.ndarray, threshold=(0.3, 0.6), morph_radius: int = 1) -> np.ndarray:
    """Independent noise blob clipped to the lesion."""
    blob = noise.noise_texture(rng, lesion_mask.shape, rng.uniform(*threshold), morph_radius)
    return blob & lesion_mask


# -- step 2: skin -----------------------------------------------------------

def gen_background(rng, palette: SkinTonePalette, shape=(64, 64), jitter: int = 4,
                   threshold=(0.35, 0.65), scale: float = 4.0) -> tuple[np.ndarray, int]:
    """Skin image from two consecutive tones; returns (image, lower tone index)."""
    i = int(rng.integers(0, NUM_TONES - 1))
    patches = noise.noise_texture(rng, shape, rng.uniform(*threshold), 1, scale=scale)
    img = np.empty((*shape, 3), dtype=np.int16)
    img[:] = palette[i]
    img[patches] = palette[i + 1]
    img += rng.integers(-jitter, jitter + 1, size=img.shape, dtype=np.int16)
    return np.clip(img, 0, 255).astype(np.uint8), i


# -- step 3: lesion colors ----------------------------------------------------

def _carve_region(rng, candidate: np.ndarray, target_px: float, scale: float) -> np.ndarray:
    """Top ``target_px`` pixels of fresh value noise within ``candidate``, opened."""
    field_ = noise.value_noise(rng, candidate.shape, scale=scale)
    vals = field_[candidate]
    q = 1.0 - min(1.0, target_px / vals.size)
    region = candidate & (field_ >= np.quantile(vals, q))
    return noise.opening(region, 1) & candidate


def apply_lesion_colors(background: np.ndarray, lesion_mask: np.ndarray, attr_mask: Optional[np.ndarray],
                        combo, rng, bank: ColorBank | None = None, cfg: SynSkinConfig | None = None):
    """Paint ``combo`` into the lesion; returns (image, (6, H, W) color masks).

    Each extra color is carved from pixels still holding the first color,
    preferring the attribute region when it has room. A color whose region
    stays below ``min_region_px`` after all retries is dropped.
    """
    bank = bank or ColorBank()
    cfg = cfg or SynSkinConfig()
    combo = tuple(combo)
    if not combo:
        raise ValueError("combo must be non-empty")
    bad = [c for c in combo if c not in COLOR_NAMES]
    if bad:
        raise ValueError(f"combo references unknown color(s) {bad}")
    lesion_mask = np.asarray(lesion_mask, dtype=bool)
    index = {n: k for k, n in enumerate(COLOR_NAMES)}
    labels = np.full(lesion_mask.shape, -1, dtype=np.int8)
    labels[lesion_mask] = index[combo[0]]
    lesion_px = int(lesion_mask.sum())
    for name in combo[1:]:
        base = labels == index[combo[0]]
        target = rng.uniform(*cfg.subregion_fraction) * lesion_px
        target = min(target, base.sum() - cfg.min_region_px)
        if target < cfg.min_region_px:
            continue
        region = None
        for attempt in range(cfg.subregion_retries):
            cand = base
            if attr_mask is not None and attempt < cfg.subregion_retries // 2:
                inside = base & attr_mask
                if inside.sum() >= 1.5 * target:
                    cand = inside
            r = _carve_region(rng, cand, target, cfg.subregion_scale)
            if r.sum() >= cfg.min_region_px and (base & ~r).sum() >= cfg.min_region_px:
                region = r
                break
        if region is not None:
            labels[region] = index[name]

    img = background.astype(np.int16).copy()
    masks = np.zeros((len(COLOR_NAMES), *lesion_mask.shape), dtype=bool)
    for k, name in enumerate(COLOR_NAMES):
        m = labels == k
        masks[k] = m
        if not m.any():
            continue
        tint = np.asarray(bank.anchors[name]) + rng.integers(-bank.jitter, bank.jitter + 1, size=3)
        img[m] = tint
    jitter = cfg.skin_jitter
    speckle = rng.integers(-jitter, jitter + 1, size=img.shape, dtype=np.int16)
    img[lesion_mask] += speckle[lesion_mask]
    return np.clip(img, 0, 255).astype(np.uint8), masks


# -- step 4: masks ------------------------------------------------------------

def derive_masks(color_masks: np.ndarray, radius: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Lesion = union of the color masks; border = dilation XOR erosion."""
    color_masks = np.asarray(color_masks, dtype=bool)
    lesion = color_masks.any(axis=0)
    if not lesion.any():
        return lesion, np.zeros_like(lesion)
    border = noise.dilate(lesion, radius) ^ noise.erode(lesion, radius, outside=False)
    return lesion, border


# -- whole samples --------------------------------------------------------------

def sample_seed(master_seed: int, index: int) -> int:
    """64-bit per-sample seed mixed from the master seed and sample index."""
    ss = np.random.SeedSequence([int(master_seed), int(index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def generate_sample(seed: int, cfg: SynSkinConfig | None = None) -> SynSample:
    cfg = cfg or SynSkinConfig()
    rng = np.random.default_rng(seed)
    combo_id = int(rng.choice(len(cfg.colors.combinations), p=cfg.colors.weights))
    lesion = sample_lesion_mask(rng, cfg.lesion, cfg.shape)
    attr = sample_attribute_mask(rng, lesion, cfg.attribute_threshold)
    skin, _ = gen_background(rng, cfg.palette, cfg.shape, cfg.skin_jitter,
                             cfg.background_threshold, cfg.background_scale)
    image, masks = apply_lesion_colors(skin, lesion, attr, cfg.colors.combo(combo_id), rng, cfg.colors, cfg)
    lesion_mask, border = derive_masks(masks, cfg.border_radius)
    labels = masks.reshape(len(COLOR_NAMES), -1).any(axis=1).astype(np.uint8)
    return SynSample(image, lesion_mask, border, masks, labels, int(seed), combo_id)
