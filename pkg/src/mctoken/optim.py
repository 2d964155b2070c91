"""Adam with decoupled weight decay."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .autodiff import Tensor


class AdamW:
    """Adam moments plus weight decay applied directly to the parameters.

    ``decay_filter`` decides per parameter name whether weight decay applies;
    by default 1-D tensors (biases, norm gains, layer scales) are exempt.
    """

    def __init__(self, named_params: Sequence[tuple[str, Tensor]], lr: float = 4e-5,
                 betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.05,
                 decay_filter=None):
        if not lr >= 0:
            raise ValueError(f"lr must be >= 0, got {lr}")
        b1, b2 = betas
        if not (0 <= b1 < 1 and 0 <= b2 < 1):
            raise ValueError(f"betas must lie in [0, 1), got {betas}")
        self.named = list(named_params)
        self.lr = float(lr)
        self.betas = (float(b1), float(b2))
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        decay_filter = decay_filter or (lambda name, p: p.data.ndim >= 2)
        self.decays = [bool(decay_filter(n, p)) for n, p in self.named]
        self.m = [np.zeros_like(p.data) for _, p in self.named]
        self.v = [np.zeros_like(p.data) for _, p in self.named]
        self.step_count = 0

    def zero_grad(self) -> None:
        for _, p in self.named:
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.betas
        t = self.step_count
        c1 = 1 - b1 ** t
        c2 = 1 - b2 ** t
        for k, (_, p) in enumerate(self.named):
            g = p.grad
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            if self.decays[k] and self.weight_decay:
                p.data *= 1 - self.lr * self.weight_decay
            p.data -= (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict:
        out = {"step": np.array(self.step_count, dtype=np.int64)}
        for k, (name, _) in enumerate(self.named):
            out[f"m.{name}"] = self.m[k]
            out[f"v.{name}"] = self.v[k]
        return out

    def load_state_dict(self, state: dict) -> None:
        self.step_count = int(state["step"])
        for k, (name, p) in enumerate(self.named):
            for key, buf in ((f"m.{name}", self.m), (f"v.{name}", self.v)):
                if key not in state:
                    raise KeyError(f"optimizer state missing {key}")
                arr = np.asarray(state[key])
                if arr.shape != p.data.shape:
                    raise ValueError(f"optimizer state {key} has shape {arr.shape}, expected {p.data.shape}")
                buf[k] = arr.astype(p.data.dtype, copy=True)
