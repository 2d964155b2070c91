"""Classification, localization and explanation-quality metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.stats import rankdata


# -- classification -----------------------------------------------------------

def _check_pair(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValueError(f"scores shape {scores.shape} != labels shape {labels.shape}")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    return scores, labels.astype(bool)


def f1_binary(pred: np.ndarray, truth: np.ndarray) -> float:
    """F1 of one concept; 1 when there is nothing to find and nothing found."""
    tp = int(np.sum(pred & truth))
    fp = int(np.sum(pred & ~truth))
    fn = int(np.sum(~pred & truth))
    if tp + fp + fn == 0:
        return 1.0
    return 2 * tp / (2 * tp + fp + fn)


def multilabel_stats(scores, labels, tau: float = 0.5) -> tuple[float, float, np.ndarray]:
    """(elementwise accuracy, macro F1, per-concept F1) at threshold ``tau``."""
    scores, labels = _check_pair(scores, labels)
    if scores.ndim == 1:
        scores, labels = scores[:, None], labels[:, None]
    if scores.shape[0] == 0:
        raise ValueError("multilabel_stats needs at least one sample")
    pred = scores >= tau
    acc = float(np.mean(pred == labels))
    per = np.array([f1_binary(pred[:, c], labels[:, c]) for c in range(scores.shape[1])])
    return acc, float(per.mean()), per


def auc(scores, labels) -> Optional[float]:
    """Mann-Whitney AUC with ties worth one half; None if only one class is present."""
    scores, labels = _check_pair(scores, labels)
    scores, labels = scores.ravel(), labels.ravel()
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)  # average ranks for ties
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def macro_auc(scores, labels) -> tuple[Optional[float], list]:
    """Mean AUC over concepts that have both classes, plus the per-concept list."""
    scores, labels = _check_pair(scores, labels)
    per = [auc(scores[:, c], labels[:, c]) for c in range(scores.shape[1])]
    defined = [a for a in per if a is not None]
    return (float(np.mean(defined)) if defined else None), per


# -- localization -------------------------------------------------------------

def dice(pred_mask, gt_mask) -> float:
    a = np.asarray(pred_mask, dtype=bool)
    b = np.asarray(gt_mask, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.sum(a & b)) / total


def cl_score(f1: float, dice_value: float) -> float:
    for name, v in (("f1", f1), ("dice", dice_value)):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"{name} must lie in [0, 1], got {v}")
    return math.sqrt(f1 * dice_value)


def true_positive_pairs(probs, labels, threshold: float = 0.5) -> list[tuple[int, int]]:
    """(image, concept) pairs that are present and predicted present."""
    probs = np.asarray(probs)
    labels = np.asarray(labels).astype(bool)
    hits = (probs >= threshold) & labels
    return [(int(i), int(c)) for i, c in zip(*np.nonzero(hits))]


def localization_dice(maps, pairs, masks, tau: float) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean Dice of ``maps >= tau`` against masks over the given pairs.

    ``maps`` is (n, H, W, C), ``masks`` (n, C, H, W). Returns the mean, the
    per-pair values and the per-concept means (NaN where a concept has no pair).
    """
    maps = np.asarray(maps)
    c = maps.shape[-1]
    vals = np.array([dice(maps[i, :, :, k] >= tau, masks[i, k]) for i, k in pairs])
    per = np.full(c, np.nan)
    for k in range(c):
        sel = [v for (i, kk), v in zip(pairs, vals) if kk == k]
        if sel:
            per[k] = float(np.mean(sel))
    mean = float(vals.mean()) if len(vals) else float("nan")
    return mean, vals, per


def whole_lesion_dice(pairs, masks, lesion_masks) -> float:
    """Dice obtained by predicting the full lesion for every pair."""
    vals = [dice(lesion_masks[i], masks[i, k]) for i, k in pairs]
    return float(np.mean(vals)) if vals else float("nan")


# -- explanation quality ------------------------------------------------------

def sparseness(values) -> Optional[float]:
    """Gini index of |values|; None for an all-zero map."""
    v = np.sort(np.abs(np.asarray(values, dtype=np.float64)).ravel())
    n = v.size
    total = v.sum()
    if n == 0 or total == 0:
        return None
    i = np.arange(1, n + 1)
    return float(np.sum((2 * i - n - 1) * v) / (n * total))


def pointing_game(saliency, gt_mask) -> Optional[int]:
    """1 if the first row-major argmax of the map is inside the mask, else 0.

    None when the mask is empty.
    """
    saliency = np.asarray(saliency)
    gt = np.asarray(gt_mask, dtype=bool)
    if saliency.shape != gt.shape:
        raise ValueError(f"map shape {saliency.shape} != mask shape {gt.shape}")
    if not gt.any():
        return None
    return int(gt.ravel()[int(np.argmax(saliency.ravel()))])


def patch_order(saliency: np.ndarray, patch: int) -> np.ndarray:
    """Patch indices (row-major) sorted by summed map value, largest first."""
    h, w = saliency.shape
    if h % patch or w % patch:
        raise ValueError(f"patch size {patch} does not divide map shape {(h, w)}")
    sums = saliency.reshape(h // patch, patch, w // patch, patch).sum(axis=(1, 3)).ravel()
    return np.argsort(-sums, kind="stable")


def selectivity(model: Callable[[np.ndarray], np.ndarray], image: np.ndarray, saliency: np.ndarray,
                concept: int, patch: int = 8, step_fraction: float = 1 / 16,
                baseline: np.ndarray | None = None, require_predicted: bool = True) -> tuple[float, np.ndarray]:
    """Area under the score curve as the most salient patches are removed.

    ``model`` maps (B, H, W, 3) images to (B, C) probabilities. Patches are
    replaced by the matching pixels of ``baseline`` (zeros if omitted) in
    chunks of ``step_fraction`` of all patches. Returns (area, curve); the
    curve has one entry per removal step including the untouched image, and
    the area is the trapezoid rule over removed fraction in [0, 1].
    """
    image = np.asarray(image)
    h, w = image.shape[:2]
    baseline = np.zeros_like(image) if baseline is None else np.asarray(baseline, dtype=image.dtype)
    order = patch_order(np.asarray(saliency), patch)
    m = order.size
    step = step_fraction * m
    if step < 1 or abs(step - round(step)) > 1e-9 or m % round(step):
        raise ValueError(f"step_fraction {step_fraction} must split {m} patches into whole steps")
    step = int(round(step))
    gw = w // patch
    batch = [image.copy()]
    cur = image.copy()
    for start in range(0, m, step):
        for p in order[start:start + step]:
            r, c = divmod(int(p), gw)
            ys, xs = slice(r * patch, (r + 1) * patch), slice(c * patch, (c + 1) * patch)
            cur[ys, xs] = baseline[ys, xs]
        batch.append(cur.copy())
    probs = np.asarray(model(np.stack(batch)))
    if require_predicted and probs[0, concept] < 0.5:
        raise ValueError(f"concept {concept} is not predicted for this image")
    curve = probs[:, concept].astype(np.float64)
    xs = np.linspace(0.0, 1.0, curve.size)
    return float(np.trapezoid(curve, xs)), curve


def map_difference(a, b) -> float:
    """Mean absolute difference of two [0, 1] maps on a 0-255 scale."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"map shapes differ: {a.shape} vs {b.shape}")
    return float(np.mean(np.abs(a - b)) * 255.0)


def shift_offsets(count: int, shift: int) -> list[tuple[int, int]]:
    base = [(shift, 0), (-shift, 0), (0, shift), (0, -shift)]
    return [base[i % 4] for i in range(count)]


def continuity(explainer: Callable[[np.ndarray], np.ndarray], image: np.ndarray, count: int = 4,
               shift: int = 2, concepts: Sequence[int] | None = None, patch: int | None = None,
               mode: str = "shift", noise_std: float = 0.02, seed: int = 0,
               reference: np.ndarray | None = None) -> float:
    """Average map change under small input perturbations (lower is steadier).

    ``explainer`` maps (B, H, W, 3) images to (B, H, W, C) normalized maps.
    In ``shift`` mode the image is rolled by +-``shift`` pixels along each
    axis and the new map is rolled back before comparing; ``noise`` mode adds
    seeded Gaussian noise instead.
    """
    image = np.asarray(image)
    if patch is not None and shift >= patch:
        raise ValueError(f"shift {shift} must be smaller than the patch size {patch}")
    if mode not in ("shift", "noise"):
        raise ValueError(f"unknown continuity mode {mode!r}")
    if mode == "shift":
        offsets = shift_offsets(count, shift)
        perturbed = [np.roll(image, off, axis=(0, 1)) for off in offsets]
    else:
        rng = np.random.default_rng(seed)
        perturbed = [np.clip(image + rng.normal(0, noise_std, image.shape), 0, 1).astype(image.dtype)
                     for _ in range(count)]
    if reference is None:
        maps = np.asarray(explainer(np.stack([image, *perturbed])))
        reference, outs = maps[0], maps[1:]
    else:
        outs = np.asarray(explainer(np.stack(perturbed))) if perturbed else np.zeros((0,) + reference.shape)
    sel = slice(None) if concepts is None else list(concepts)
    diffs = []
    for j, out in enumerate(outs):
        if mode == "shift":
            dy, dx = offsets[j]
            out = np.roll(out, (-dy, -dx), axis=(0, 1))
        diffs.append(map_difference(out[..., sel], reference[..., sel]))
    return float(np.mean(diffs)) if diffs else 0.0


# -- report ---------------------------------------------------------------------

@dataclass
class MetricReport:
    acc: float
    auc: Optional[float]
    f1: float
    dice: Optional[float] = None
    cl_score: Optional[float] = None
    selectivity: Optional[float] = None
    sparseness: Optional[float] = None
    pointing_game: Optional[float] = None
    continuity: Optional[float] = None
    per_concept: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("acc", "f1", "dice", "cl_score", "pointing_game", "sparseness", "auc"):
            v = getattr(self, name)
            if v is not None and not (0.0 <= v <= 1.0 or math.isnan(v)):
                raise ValueError(f"{name}={v} outside [0, 1]")
        if self.dice is not None and self.cl_score is not None and not math.isnan(self.dice):
            if abs(self.cl_score - math.sqrt(self.f1 * self.dice)) > 1e-9:
                raise ValueError("cl_score must equal sqrt(f1 * dice)")

    def scalars(self) -> dict:
        names = ("acc", "auc", "f1", "dice", "cl_score", "selectivity", "sparseness",
                 "pointing_game", "continuity")
        return {k: getattr(self, k) for k in names}

    def to_dict(self) -> dict:
        out = {}
        for k, v in self.scalars().items():
            out[k] = {"mean": _clean(v), "per_concept": _clean(self.per_concept.get(k)),
                      "n": self.counts.get(k)}
        return out


def _clean(v):
    if v is None:
        return None
    if isinstance(v, (list, tuple, np.ndarray)):
        return [_clean(x) for x in v]
    v = float(v)
    return None if math.isnan(v) else v
