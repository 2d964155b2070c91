"""Training objectives: per-branch multilabel soft margin losses, the
concept-token separation regularizer, and their weighted total."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .autodiff import Tensor, ops

LOSS_MODES = ("separate", "mean", "both")


def mlsm(logits: Tensor, targets) -> Tensor:
    """Multilabel soft margin loss averaged over concepts (and the batch).

    Uses ``softplus(z) - y*z`` which equals ``-[y log s(z) + (1-y) log(1-s(z))]``
    without evaluating ``log(sigmoid)``.
    """
    y = np.asarray(targets)
    if y.shape != logits.shape:
        raise ValueError(f"targets shape {y.shape} != logits shape {logits.shape}")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("targets must be 0/1")
    y = y.astype(logits.dtype)
    per = ops.softplus(logits) - logits * y
    return ops.mean(per)


def separation_loss(tokens_per_layer: Sequence[Tensor]) -> Tensor:
    """Cross-entropy between token self-similarity rows and the identity.

    Each entry is (C, D) or (B, C, D). Rows are L2-normalized, ``S = T T^T``
    is softmaxed row-wise and the diagonal log-probability is averaged over
    rows, batch and layers.
    """
    if not tokens_per_layer:
        raise ValueError("separation_loss needs at least one layer of tokens")
    total = None
    for tokens in tokens_per_layer:
        c = tokens.shape[-2]
        if c < 2:
            raise ValueError(f"separation_loss needs at least 2 concept tokens, got {c}")
        unit = ops.l2_normalize(tokens, axis=-1)
        sim = ops.matmul(unit, ops.swapaxes(unit, -1, -2))
        logp = ops.log_softmax(sim, axis=-1)
        eye = np.eye(c, dtype=tokens.dtype)
        ce = -ops.mean(ops.sum(logp * eye, axis=-1))
        total = ce if total is None else total + ce
    return total * (1.0 / len(tokens_per_layer))


def mean_logit_loss(y_vc: Tensor, y_p: Tensor | None, y_tc: Tensor | None, targets) -> Tensor:
    """MLSM of the arithmetic mean of whichever branch logits are present."""
    branches = [b for b in (y_vc, y_p, y_tc) if b is not None]
    total = branches[0]
    for b in branches[1:]:
        total = total + b
    return mlsm(total * (1.0 / len(branches)), targets)


@dataclass
class LossWeights:
    alpha: float = 1.0  # visual
    beta: float = 1.0   # patch
    gamma: float = 1.0  # text
    delta: float = 1.0  # separation
    mean: float = 1.0   # mean-logit term (ablation)

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "delta", "mean"):
            v = float(getattr(self, name))
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {name} must be finite and >= 0, got {v}")
            setattr(self, name, v)


@dataclass
class LossReport:
    total: Tensor
    terms: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)

    def values(self) -> dict:
        out = {k: float(v.data) for k, v in self.terms.items()}
        out["total"] = float(self.total.data)
        return out


def total_loss(
    y_vc: Tensor,
    y_p: Tensor,
    y_tc: Optional[Tensor],
    visual_layer_tokens: Sequence[Tensor],
    targets,
    weights: LossWeights | None = None,
    mode: str = "separate",
    separation: bool = True,
) -> LossReport:
    """Weighted sum of the active loss terms.

    ``mode`` picks the ablation configuration: ``separate`` (per-branch MLSM
    on visual, patch and, when present, text logits), ``mean`` (one MLSM on
    the averaged logits) or ``both``. ``separation`` toggles the token
    regularizer. Inactive terms are left out of ``terms``.
    """
    weights = weights or LossWeights()
    if mode not in LOSS_MODES:
        raise ValueError(f"unknown loss mode {mode!r}; expected one of {LOSS_MODES}")
    active: dict[str, tuple[float, Tensor]] = {}
    if mode in ("separate", "both"):
        active["concepts_visual"] = (weights.alpha, mlsm(y_vc, targets))
        active["concepts_patch"] = (weights.beta, mlsm(y_p, targets))
        if y_tc is not None:
            active["concepts_text"] = (weights.gamma, mlsm(y_tc, targets))
    if mode in ("mean", "both"):
        active["concepts_mean"] = (weights.mean, mean_logit_loss(y_vc, y_p, y_tc, targets))
    if separation:
        active["separation"] = (weights.delta, separation_loss(visual_layer_tokens))
    if not any(w > 0 for w, _ in active.values()):
        raise ValueError("all active loss weights are zero")
    total = None
    for w, term in active.values():
        piece = term * w
        total = piece if total is None else total + piece
    return LossReport(total, {k: t for k, (_, t) in active.items()},
                      {k: w for k, (w, _) in active.items()})
