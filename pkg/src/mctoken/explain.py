"""Per-concept localization maps built from recorded attention.

Pipeline for one batch: concept-to-patch attention of the visual (and text)
concept layers is averaged over heads and layers, the two branches are
summed, multiplied by the rectified patch CAM, smoothed by a row-stochastic
patch-to-patch affinity, upsampled and min-max normalized per concept.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .model import AttentionTrace, ConceptTokenTransformer, predict


@dataclass
class LocalizationMap:
    """Nonnegative per-concept maps of shape (..., H, W, C)."""

    values: np.ndarray
    normalized: bool = False
    concept_names: Sequence[str] = field(default_factory=tuple)

    @property
    def shape(self):
        return self.values.shape


# stage name -> (use_cam, use_affinity)
MAP_STAGES = {"attention": (False, False), "cam_product": (True, False), "refined": (True, True)}


def _grid_side(m: int) -> int:
    n = math.isqrt(m)
    if n * n != m:
        raise ValueError(f"{m} patches do not form a square grid")
    return n


def extract_concept_attention(trace: AttentionTrace, branch: str = "visual") -> np.ndarray:
    """Head- and layer-averaged concept-to-patch attention as (B, N, N, C)."""
    if branch not in ("visual", "text"):
        raise ValueError(f"branch must be 'visual' or 'text', got {branch!r}")
    layers = getattr(trace, branch)
    if not layers:
        raise ValueError(f"trace has no {branch} concept-attention layers")
    avg = np.mean([a.mean(axis=1) for a in layers], axis=0)  # (B, C, M)
    b, c, m = avg.shape
    n = _grid_side(m)
    return np.ascontiguousarray(avg.transpose(0, 2, 1)).reshape(b, n, n, c)


def patch_affinity(trace: AttentionTrace, num_layers: int | None = None) -> np.ndarray:
    """Row-normalized patch-to-patch attention of the last self-attention layers.

    ``num_layers`` defaults to ``ceil(l / 2)`` of the ``l`` recorded layers.
    """
    if not trace.patch:
        raise ValueError("trace has no patch self-attention layers")
    k = math.ceil(len(trace.patch) / 2) if num_layers is None else int(num_layers)
    if not 1 <= k <= len(trace.patch):
        raise ValueError(f"num_layers must be in [1, {len(trace.patch)}], got {k}")
    aff = np.mean([a.mean(axis=1) for a in trace.patch[-k:]], axis=0)
    return row_normalize(aff)


def row_normalize(aff: np.ndarray) -> np.ndarray:
    aff = np.asarray(aff)
    if (aff < 0).any():
        raise ValueError("affinity must be nonnegative")
    s = aff.sum(axis=-1, keepdims=True)
    return np.divide(aff, s, out=np.zeros_like(aff), where=s > 0)


def fuse_vtc(a_vc: np.ndarray, a_tc: Optional[np.ndarray] = None) -> np.ndarray:
    """Elementwise sum of the visual and text concept maps."""
    if a_tc is None:
        return np.array(a_vc, copy=True)
    if np.shape(a_vc) != np.shape(a_tc):
        raise ValueError(f"shape mismatch: {np.shape(a_vc)} vs {np.shape(a_tc)}")
    return a_vc + a_tc


def fuse_pcam(a_pcam: np.ndarray, a_vtc: np.ndarray, rectify: bool = True) -> np.ndarray:
    """Elementwise product of the (rectified) patch CAM with the token maps."""
    if np.shape(a_pcam) != np.shape(a_vtc):
        raise ValueError(f"shape mismatch: {np.shape(a_pcam)} vs {np.shape(a_vtc)}")
    if rectify:
        a_pcam = np.maximum(a_pcam, 0)
    return a_pcam * a_vtc


def refine_affinity(affinity: np.ndarray, maps: np.ndarray) -> np.ndarray:
    """Propagate (..., N, N, C) maps through an (..., M, M) patch affinity.

    Row ``i*N + j`` of the affinity weights every source patch ``k*N + l``.
    """
    *lead, n, n2, c = maps.shape
    m = n * n2
    if affinity.shape[-2:] != (m, m):
        raise ValueError(f"affinity shape {affinity.shape[-2:]} does not match {m} patches")
    flat = maps.reshape(*lead, m, c)
    return (affinity @ flat).reshape(*lead, n, n2, c)


def _interp_matrix(src: int, dst: int) -> np.ndarray:
    """(dst, src) bilinear weights, half-pixel centers, edges clamped."""
    w = np.zeros((dst, src))
    pos = (np.arange(dst) + 0.5) * (src / dst) - 0.5
    pos = np.clip(pos, 0, src - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, src - 1)
    frac = pos - lo
    w[np.arange(dst), lo] += 1 - frac
    w[np.arange(dst), hi] += frac
    return w


def bilinear_upsample(maps: np.ndarray, height: int, width: int) -> np.ndarray:
    """Resize (..., h, w, C) maps to (..., height, width, C)."""
    h, w = maps.shape[-3], maps.shape[-2]
    if height < h or width < w:
        raise ValueError(f"target size {(height, width)} smaller than {(h, w)}")
    if (h, w) == (height, width):
        return np.array(maps, copy=True)
    wy = _interp_matrix(h, height)
    wx = _interp_matrix(w, width)
    return np.einsum("yh,...hwc,xw->...yxc", wy, maps, wx, optimize=True)


def minmax_normalize(maps: np.ndarray) -> np.ndarray:
    """Scale each concept channel to [0, 1]; constant channels become zeros."""
    lo = maps.min(axis=(-3, -2), keepdims=True)
    hi = maps.max(axis=(-3, -2), keepdims=True)
    span = hi - lo
    out = np.zeros_like(maps, dtype=np.float64)
    np.divide(maps - lo, span, out=out, where=span > 0)
    return out


def upsample_normalize(maps: np.ndarray, height: int, width: int) -> np.ndarray:
    return minmax_normalize(bilinear_upsample(maps, height, width))


def threshold_maps(maps: np.ndarray, tau: float, probs: Optional[np.ndarray] = None) -> dict[int, np.ndarray]:
    """Binary masks ``map >= tau`` for one image's (H, W, C) normalized maps.

    Only concepts with predicted probability >= 0.5 get a mask.
    """
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    c = maps.shape[-1]
    keep = range(c) if probs is None else [i for i in range(c) if probs[i] >= 0.5]
    return {i: maps[..., i] >= tau for i in keep}


@dataclass
class ExplainConfig:
    """Which refinement stages build the maps (see ``MAP_STAGES``)."""

    affinity_layers: Optional[int] = None
    use_affinity: bool = True
    use_cam: bool = True
    batch_size: int = 64


class ConceptLocalizer:
    """Builds normalized localization maps for a trained model."""

    def __init__(self, model: ConceptTokenTransformer, config: ExplainConfig | None = None,
                 concept_names: Sequence[str] = ()):
        self.model = model
        self.config = config or ExplainConfig()
        self.concept_names = tuple(concept_names)

    def raw_maps(self, output) -> np.ndarray:
        """Grid-resolution maps (B, N, N, C) from one forward output."""
        trace = output.trace
        a_vc = extract_concept_attention(trace, "visual")
        a_tc = extract_concept_attention(trace, "text") if trace.text else None
        a = fuse_vtc(a_vc, a_tc)
        if self.config.use_cam:
            a = fuse_pcam(np.asarray(output.cam.data, dtype=np.float64), a)
        if self.config.use_affinity:
            a = refine_affinity(patch_affinity(trace, self.config.affinity_layers), a)
        return a

    def explain(self, images: np.ndarray) -> tuple[LocalizationMap, np.ndarray]:
        """Normalized (B, H, W, C) maps and (B, C) concept probabilities."""
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[None]
        h, w = images.shape[1:3]
        maps, probs = [], []
        for out in self.model.infer(images, self.config.batch_size, record_trace=True):
            maps.append(upsample_normalize(self.raw_maps(out), h, w))
            probs.append(predict(out.scores))
        if not maps:
            c = self.model.config.num_concepts
            return LocalizationMap(np.zeros((0, h, w, c)), True, self.concept_names), np.zeros((0, c))
        return (LocalizationMap(np.concatenate(maps), True, self.concept_names),
                np.concatenate(probs).astype(np.float64))

    def stage_maps(self, images: np.ndarray) -> dict[str, np.ndarray]:
        """Normalized maps after each pipeline stage, from a single forward pass.

        Keys follow ``MAP_STAGES``; the current config only decides the
        affinity depth, not which stages are built.
        """
        images = np.asarray(images)
        h, w = images.shape[1:3]
        out: dict[str, list] = {name: [] for name in MAP_STAGES}
        for o in self.model.infer(images, self.config.batch_size, record_trace=True):
            tc = extract_concept_attention(o.trace, "text") if o.trace.text else None
            a = fuse_vtc(extract_concept_attention(o.trace, "visual"), tc)
            prod = fuse_pcam(np.asarray(o.cam.data, dtype=np.float64), a)
            aff = patch_affinity(o.trace, self.config.affinity_layers)
            for name, raw in (("attention", a), ("cam_product", prod), ("refined", refine_affinity(aff, prod))):
                out[name].append(upsample_normalize(raw, h, w))
        return {name: np.concatenate(v) for name, v in out.items() if v}

    def __call__(self, images: np.ndarray) -> np.ndarray:
        return self.explain(images)[0].values
