"""Value noise and the binary morphology used to shape lesions and regions."""
from __future__ import annotations

import numpy as np
from scipy import ndimage

# keeps normalized noise strictly inside (0, 1) so thresholds 0 and 1 are total
_EDGE = 1e-6


def disk(radius: int) -> np.ndarray:
    """Boolean disk structuring element, ``x^2 + y^2 <= r^2``."""
    r = int(radius)
    if r < 0:
        raise ValueError(f"radius must be >= 0, got {radius}")
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return (xx * xx + yy * yy) <= r * r


def _lattice_interp(lattice: np.ndarray, height: int, width: int) -> np.ndarray:
    """Smoothstep interpolation of a (cy+1, cx+1) lattice onto a pixel grid."""
    cy, cx = lattice.shape[0] - 1, lattice.shape[1] - 1
    y = (np.arange(height) + 0.5) * (cy / height)
    x = (np.arange(width) + 0.5) * (cx / width)
    y0 = np.minimum(np.floor(y).astype(int), cy - 1)
    x0 = np.minimum(np.floor(x).astype(int), cx - 1)
    ty = y - y0
    tx = x - x0
    ty = ty * ty * (3 - 2 * ty)
    tx = tx * tx * (3 - 2 * tx)
    rows0 = lattice[y0]
    rows1 = lattice[y0 + 1]
    top = rows0[:, x0] * (1 - tx) + rows0[:, x0 + 1] * tx
    bottom = rows1[:, x0] * (1 - tx) + rows1[:, x0 + 1] * tx
    return top * (1 - ty)[:, None] + bottom * ty[:, None]


def squash(field: np.ndarray) -> np.ndarray:
    """Min-max into the open interval (0, 1); constant fields map to 0.5."""
    lo, hi = float(field.min()), float(field.max())
    if hi <= lo:
        return np.full(field.shape, 0.5)
    return _EDGE + (field - lo) / (hi - lo) * (1 - 2 * _EDGE)


def value_noise(rng, shape, scale: float = 4.0, octaves: int = 3,
                persistence: float = 0.5, lacunarity: float = 2.0) -> np.ndarray:
    """Multi-octave value noise normalized into (0, 1).

    ``scale`` is the lattice cell count across the image for the coarsest
    octave; each further octave multiplies it by ``lacunarity`` and its
    amplitude by ``persistence``.
    """
    height, width = shape
    if octaves < 1:
        raise ValueError(f"octaves must be >= 1, got {octaves}")
    total = np.zeros((height, width))
    amp, freq = 1.0, float(scale)
    for _ in range(octaves):
        cells = max(1, int(round(freq)))
        lattice = rng.random((cells + 1, cells + 1))
        total += amp * _lattice_interp(lattice, height, width)
        amp *= persistence
        freq *= lacunarity
    return squash(total)


def erode(mask: np.ndarray, radius: int, outside: bool = True) -> np.ndarray:
    """Binary erosion; ``outside`` is the value assumed beyond the frame."""
    if radius <= 0:
        return mask.copy()
    return ndimage.binary_erosion(mask, structure=disk(radius), border_value=int(outside))


def dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    if radius <= 0:
        return mask.copy()
    return ndimage.binary_dilation(mask, structure=disk(radius), border_value=0)


def opening(mask: np.ndarray, radius: int) -> np.ndarray:
    return dilate(erode(mask, radius), radius)


def closing(mask: np.ndarray, radius: int) -> np.ndarray:
    return erode(dilate(mask, radius), radius)


def noise_texture(rng, shape, threshold: float, morph_radius: int = 1, *,
                  scale: float = 4.0, octaves: int = 3, persistence: float = 0.5,
                  envelope: np.ndarray | None = None, envelope_weight: float = 0.0) -> np.ndarray:
    """Thresholded value noise cleaned with an open then a close.

    With an ``envelope`` (values in [0, 1]) the field becomes
    ``(1 - w) * noise + w * envelope`` before thresholding, which biases the
    foreground toward the envelope's high region.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    field = value_noise(rng, shape, scale, octaves, persistence)
    if envelope is not None:
        if envelope.shape != tuple(shape):
            raise ValueError(f"envelope shape {envelope.shape} != {tuple(shape)}")
        w = float(envelope_weight)
        field = (1 - w) * field + w * np.clip(envelope, _EDGE, 1 - _EDGE)
    mask = field > threshold
    return closing(opening(mask, morph_radius), morph_radius)


def largest_component(mask: np.ndarray) -> np.ndarray:
    """Largest 4-connected foreground component (ties go to the lowest label)."""
    labels, count = ndimage.label(mask)
    if count == 0:
        return np.zeros_like(mask, dtype=bool)
    sizes = np.bincount(labels.ravel())[1:]
    return labels == (int(np.argmax(sizes)) + 1)


def fill_holes(mask: np.ndarray) -> np.ndarray:
    return ndimage.binary_fill_holes(mask)


def count_components(mask: np.ndarray) -> int:
    return int(ndimage.label(mask)[1])
