"""Skin tones and lesion colors."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..model import CONCEPT_NAMES

COLOR_NAMES = CONCEPT_NAMES
NUM_TONES = 29

DEFAULT_LIGHT_TONE = (246, 224, 206)
DEFAULT_DARK_TONE = (120, 82, 62)

DEFAULT_ANCHORS = {
    "light_brown": (192, 144, 96),
    "dark_brown": (101, 67, 33),
    "black": (25, 20, 18),
    "blue_gray": (102, 123, 142),
    "red": (180, 50, 50),
    "white": (235, 230, 225),
}

# First color paints the whole lesion, the rest become sub-regions. Weights
# were fitted so each color's marginal frequency lands near
# LB .500, DB .602, BK .384, BG .536, RD .214, WH .327.
DEFAULT_COMBINATIONS = (
    (("light_brown",), 0.030),
    (("dark_brown",), 0.034),
    (("black",), 0.022),
    (("blue_gray",), 0.031),
    (("red",), 0.012),
    (("white",), 0.017),
    (("light_brown", "dark_brown"), 0.038),
    (("light_brown", "black"), 0.025),
    (("light_brown", "blue_gray"), 0.035),
    (("light_brown", "red"), 0.016),
    (("light_brown", "white"), 0.022),
    (("dark_brown", "black"), 0.031),
    (("dark_brown", "blue_gray"), 0.038),
    (("dark_brown", "red"), 0.023),
    (("dark_brown", "white"), 0.028),
    (("blue_gray", "black"), 0.027),
    (("black", "white"), 0.013),
    (("blue_gray", "red"), 0.018),
    (("blue_gray", "white"), 0.024),
    (("light_brown", "dark_brown", "black"), 0.030),
    (("light_brown", "dark_brown", "blue_gray"), 0.039),
    (("light_brown", "dark_brown", "red"), 0.022),
    (("light_brown", "dark_brown", "white"), 0.027),
    (("light_brown", "blue_gray", "black"), 0.026),
    (("light_brown", "black", "white"), 0.011),
    (("light_brown", "blue_gray", "red"), 0.017),
    (("light_brown", "blue_gray", "white"), 0.023),
    (("dark_brown", "blue_gray", "black"), 0.032),
    (("dark_brown", "black", "red"), 0.012),
    (("dark_brown", "black", "white"), 0.018),
    (("dark_brown", "blue_gray", "red"), 0.024),
    (("dark_brown", "blue_gray", "white"), 0.029),
    (("blue_gray", "black", "white"), 0.014),
    (("light_brown", "dark_brown", "blue_gray", "black"), 0.034),
    (("light_brown", "dark_brown", "black", "red"), 0.014),
    (("light_brown", "dark_brown", "black", "white"), 0.020),
    (("light_brown", "dark_brown", "blue_gray", "red"), 0.027),
    (("light_brown", "dark_brown", "blue_gray", "white"), 0.030),
    (("light_brown", "blue_gray", "black", "white"), 0.016),
    (("dark_brown", "blue_gray", "black", "red"), 0.017),
    (("dark_brown", "blue_gray", "black", "white"), 0.022),
    (("dark_brown", "blue_gray", "red", "white"), 0.012),
)


def luminance(rgb) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=np.float64)
    return rgb @ np.array([0.2126, 0.7152, 0.0722])


@dataclass
class SkinTonePalette:
    """29 RGB skin tones ordered from light to dark."""

    tones: np.ndarray

    def __post_init__(self):
        tones = np.asarray(self.tones)
        if tones.shape != (NUM_TONES, 3):
            raise ValueError(f"palette needs {NUM_TONES} RGB tones, got shape {tones.shape}")
        if tones.min() < 0 or tones.max() > 255:
            raise ValueError("tones must be 8-bit RGB values")
        if not (np.diff(luminance(tones)) < 0).all():
            raise ValueError("tones must be strictly ordered light to dark by luminance")
        self.tones = tones.astype(np.uint8)

    @classmethod
    def ramp(cls, light=DEFAULT_LIGHT_TONE, dark=DEFAULT_DARK_TONE) -> "SkinTonePalette":
        t = np.linspace(0.0, 1.0, NUM_TONES)[:, None]
        tones = np.rint((1 - t) * np.asarray(light, float) + t * np.asarray(dark, float))
        return cls(tones)

    def __len__(self):
        return NUM_TONES

    def __getitem__(self, i) -> np.ndarray:
        return self.tones[i]


@dataclass
class ColorBank:
    """Named lesion colors plus weighted color combinations."""

    anchors: dict = field(default_factory=lambda: dict(DEFAULT_ANCHORS))
    jitter: int = 12
    combinations: tuple = DEFAULT_COMBINATIONS

    def __post_init__(self):
        unknown = set(self.anchors) - set(COLOR_NAMES)
        missing = set(COLOR_NAMES) - set(self.anchors)
        if unknown or missing:
            raise ValueError(f"anchors must name exactly {COLOR_NAMES}; "
                             f"unknown={sorted(unknown)} missing={sorted(missing)}")
        self.anchors = {k: tuple(int(v) for v in self.anchors[k]) for k in COLOR_NAMES}
        if self.jitter < 0:
            raise ValueError(f"jitter must be >= 0, got {self.jitter}")
        combos = []
        for names, weight in self.combinations:
            names = tuple(names)
            if not names:
                raise ValueError("color combinations must be non-empty")
            bad = [n for n in names if n not in COLOR_NAMES]
            if bad:
                raise ValueError(f"combination {names} references unknown color(s) {bad}")
            if len(set(names)) != len(names):
                raise ValueError(f"combination {names} repeats a color")
            if not weight > 0:
                raise ValueError(f"combination {names} has non-positive weight {weight}")
            combos.append((names, float(weight)))
        if not combos:
            raise ValueError("color bank needs at least one combination")
        total = sum(w for _, w in combos)
        if abs(total - 1.0) > 1e-6:
            raise ValueError(f"combination weights must sum to 1, got {total}")
        self.combinations = tuple(combos)

    @property
    def weights(self) -> np.ndarray:
        w = np.array([w for _, w in self.combinations])
        return w / w.sum()

    def combo(self, i: int) -> tuple:
        return self.combinations[i][0]

    def implied_marginals(self) -> dict:
        """Probability that each color appears, assuming no region is dropped."""
        out = dict.fromkeys(COLOR_NAMES, 0.0)
        for (names, _), w in zip(self.combinations, self.weights):
            for n in names:
                out[n] += float(w)
        return out

    def to_dict(self) -> dict:
        return {
            "anchors": {k: list(v) for k, v in self.anchors.items()},
            "jitter": self.jitter,
            "combinations": [[list(n), w] for n, w in self.combinations],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ColorBank":
        d = dict(d)
        if "combinations" in d:
            d["combinations"] = tuple((tuple(n), float(w)) for n, w in d["combinations"])
        return cls(**d)
