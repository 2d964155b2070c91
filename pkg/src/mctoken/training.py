"""Training loop, model construction and checkpoint conversion."""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import metrics
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import DataError, DivergenceError, ExperimentConfig, TrainConfig
from .model import ConceptTokenTransformer, ModelConfig, TextConceptBank, build_text_bank
from .objectives import LossWeights, total_loss
from .optim import AdamW
from .synskin.dataset import SynSkinData, load_dataset


def to_float(images: np.ndarray) -> np.ndarray:
    """uint8 RGB -> float32 in [0, 1]; float input is passed through as float32."""
    images = np.asarray(images)
    if images.dtype == np.uint8:
        return images.astype(np.float32) / np.float32(255.0)
    return images.astype(np.float32, copy=False)


def build_text(cfg: ExperimentConfig) -> TextConceptBank | None:
    m = cfg.model
    if not m.needs_text_bank:
        return None
    return build_text_bank(cfg.text.embedding_file, num_concepts=m.num_concepts, text_dim=m.text_dim,
                           embed_dim=m.embed_dim, seed=cfg.text.seed, projection=cfg.text.projection,
                           init_std=m.init_std)


def build_model(cfg: ExperimentConfig) -> ConceptTokenTransformer:
    return ConceptTokenTransformer(cfg.model, build_text(cfg), dtype=np.float32)


# -- checkpoint conversion ------------------------------------------------------------

def model_tensors(model: ConceptTokenTransformer) -> dict:
    out = {f"param.{k}": v for k, v in model.state_dict().items()}
    if model.text_bank is not None:
        out["text.embeddings"] = model.text_bank.embeddings
        out["text.projection"] = model.text_bank.projection
    if model.text_tokens is not None:
        out["buffer.text_tokens"] = model.text_tokens.data
    return out


def restore_model(ckpt: Checkpoint) -> tuple[ConceptTokenTransformer, ExperimentConfig]:
    cfg = ExperimentConfig.from_dict(ckpt.metadata["config"])
    bank = None
    if cfg.model.needs_text_bank:
        text = ckpt.group("text")
        bank = TextConceptBank(text["embeddings"].astype(np.float64), text["projection"].astype(np.float64))
    model = ConceptTokenTransformer(cfg.model, bank, dtype=np.float32)
    model.load_state_dict(ckpt.group("param"))
    if model.text_tokens is not None:
        model.text_tokens.data[...] = ckpt.tensors["buffer.text_tokens"]
    return model, cfg


def load_model(path) -> tuple[ConceptTokenTransformer, ExperimentConfig, Checkpoint]:
    ckpt = load_checkpoint(path)
    model, cfg = restore_model(ckpt)
    return model, cfg, ckpt


# -- batching -------------------------------------------------------------------------

class EpochPlan:
    """Seeded sample order; optionally interleaves a second source.

    With a mix source every slot picks the mix source with probability
    ``mix_weight`` and takes the next index from that source's shuffled
    order, reshuffling a source once it is exhausted.
    """

    def __init__(self, n_main: int, n_mix: int = 0, mix_weight: float = 0.0):
        self.n_main, self.n_mix, self.mix_weight = n_main, n_mix, mix_weight

    def order(self, rng) -> list[tuple[int, int]]:
        if not self.n_mix or self.mix_weight == 0:
            return [(0, int(i)) for i in rng.permutation(self.n_main)]
        total = self.n_main + self.n_mix
        pick = rng.random(total) < self.mix_weight
        queues = {0: list(rng.permutation(self.n_main)), 1: list(rng.permutation(self.n_mix))}
        sizes = {0: self.n_main, 1: self.n_mix}
        out = []
        for p in pick:
            src = int(p)
            if not queues[src]:
                queues[src] = list(rng.permutation(sizes[src]))
            out.append((src, int(queues[src].pop(0))))
        return out


# -- training -------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: ConceptTokenTransformer
    history: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_f1: float = float("nan")
    final_loss: float = float("nan")
    steps: int = 0
    best_path: Optional[Path] = None
    last_path: Optional[Path] = None


def validation_scores(model, images, labels, batch_size: int = 64) -> dict:
    probs = model.predict_proba(to_float(images), batch_size)
    acc, f1, _ = metrics.multilabel_stats(probs, labels)
    auc, _ = metrics.macro_auc(probs, labels)
    return {"acc": acc, "f1": f1, "auc": auc}


def _checkpoint_meta(cfg: ExperimentConfig, epoch: int, step: int, rng, extra: dict) -> dict:
    return {"format": "mctoken", "config": cfg.to_dict(), "epoch": epoch, "step": step,
            "rng": rng.bit_generator.state, **extra}


def _write_ckpt(path, cfg, model, opt, epoch, rng, extra) -> None:
    tensors = model_tensors(model)
    tensors.update({f"optim.{k}": v for k, v in opt.state_dict().items() if k != "step"})
    meta = _checkpoint_meta(cfg, epoch, opt.step_count, rng, extra)
    save_checkpoint(path, meta, tensors)


def fit(model: ConceptTokenTransformer, cfg: ExperimentConfig, train_x, train_y, val_x=None, val_y=None,
        out_dir=None, mix_x=None, mix_y=None, resume: Checkpoint | None = None,
        log: Callable[[str], None] | None = None) -> TrainResult:
    """Train ``model`` in place on uint8 or float images.

    With ``out_dir`` writes ``train_log.jsonl`` (one line per step and per
    epoch), ``last.ckpt`` every epoch and ``best.ckpt`` whenever validation
    macro-F1 improves (or every epoch when there is no validation set).
    """
    tc = cfg.train
    train_x = to_float(train_x)
    train_y = np.asarray(train_y)
    mix_x = None if mix_x is None else to_float(mix_x)
    weights = LossWeights(tc.alpha, tc.beta, tc.gamma, tc.delta, tc.mean_weight)
    opt = AdamW(model.named_parameters(), lr=tc.lr, betas=tc.betas, eps=tc.adam_eps,
                weight_decay=tc.weight_decay)
    rng = np.random.default_rng(tc.seed)
    plan = EpochPlan(len(train_x), 0 if mix_x is None else len(mix_x), tc.mix_weight)
    result = TrainResult(model)
    start_epoch = 0
    if resume is not None:
        opt.load_state_dict({"step": resume.metadata["step"], **resume.group("optim")})
        rng.bit_generator.state = resume.metadata["rng"]
        start_epoch = int(resume.metadata["epoch"]) + 1
        result.best_val_f1 = resume.metadata.get("best_val_f1", float("nan"))
        result.best_epoch = resume.metadata.get("best_epoch", -1)

    out = None if out_dir is None else Path(out_dir)
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "train_log.jsonl", "a" if resume is not None else "w")
    sources = [(train_x, train_y)] + ([(mix_x, np.asarray(mix_y))] if mix_x is not None else [])
    try:
        for epoch in range(start_epoch, tc.epochs):
            order = plan.order(rng)
            flips = rng.random(len(order)) < tc.hflip
            terms_sum: dict = {}
            n_steps = 0
            for s in range(0, len(order), tc.batch_size):
                chunk = order[s:s + tc.batch_size]
                x = np.stack([sources[src][0][i] for src, i in chunk])
                y = np.stack([sources[src][1][i] for src, i in chunk])
                f = flips[s:s + tc.batch_size]
                x[f] = x[f, :, ::-1]
                o = model(x)
                rep = total_loss(o.scores.visual, o.scores.patch, o.scores.text, o.visual_layer_tokens,
                                 y, weights, mode=tc.loss_mode, separation=tc.separation)
                vals = rep.values()
                record = {"type": "step", "epoch": epoch, "step": opt.step_count + 1,
                          "loss": {k: float(v) for k, v in vals.items()}}
                if not all(math.isfinite(v) for v in vals.values()):
                    if log_fh:
                        log_fh.write(json.dumps(record) + "\n")
                    raise DivergenceError(
                        f"non-finite loss at epoch {epoch}, step {opt.step_count + 1}: {vals}")
                opt.zero_grad()
                rep.total.backward()
                opt.step()
                if log_fh:
                    log_fh.write(json.dumps(record) + "\n")
                for k, v in vals.items():
                    terms_sum[k] = terms_sum.get(k, 0.0) + v
                n_steps += 1
                result.final_loss = vals["total"]
                if tc.max_steps is not None and opt.step_count >= tc.max_steps:
                    break
            epoch_rec = {"type": "epoch", "epoch": epoch, "steps": opt.step_count,
                         "train_loss": {k: v / max(n_steps, 1) for k, v in terms_sum.items()}}
            improved = True
            if val_x is not None and len(val_x):
                val = validation_scores(model, val_x, val_y, cfg.eval.batch_size)
                epoch_rec["val"] = val
                improved = not (val["f1"] <= result.best_val_f1)  # NaN best -> improved
            if improved:
                result.best_epoch = epoch
                result.best_val_f1 = epoch_rec.get("val", {}).get("f1", float("nan"))
            result.history.append(epoch_rec)
            if log:
                log(json.dumps(epoch_rec))
            if out is not None:
                log_fh.write(json.dumps(epoch_rec) + "\n")
                log_fh.flush()
                extra = {"best_epoch": result.best_epoch, "best_val_f1": result.best_val_f1,
                         "val": epoch_rec.get("val")}
                _write_ckpt(out / "last.ckpt", cfg, model, opt, epoch, rng, extra)
                if improved:
                    _write_ckpt(out / "best.ckpt", cfg, model, opt, epoch, rng, extra)
            if tc.max_steps is not None and opt.step_count >= tc.max_steps:
                break
    finally:
        if log_fh:
            log_fh.close()
    result.steps = opt.step_count
    if out is not None:
        result.best_path = out / "best.ckpt"
        result.last_path = out / "last.ckpt"
    return result


def _load_split(path, what: str) -> SynSkinData:
    try:
        return load_dataset(path, masks=False)
    except (FileNotFoundError, ValueError) as exc:
        raise DataError(f"cannot load {what} data from {path}: {exc}") from exc


def train(cfg: ExperimentConfig, out_dir, resume=None, log=None) -> TrainResult:
    """Train from the dataset directories named in ``cfg.train``."""
    tc = cfg.train
    tc.check_paths()
    train_data = _load_split(tc.train_data, "training")
    if len(train_data) == 0:
        raise DataError(f"training set {tc.train_data} is empty")
    val = _load_split(tc.val_data, "validation") if tc.val_data else None
    mix = _load_split(tc.mix_data, "mix") if tc.mix_data else None
    for d in (train_data, val, mix):
        if d is not None and len(d) and d.labels.shape[1] != cfg.model.num_concepts:
            raise DataError(f"{d.root}: {d.labels.shape[1]} label columns, model has {cfg.model.num_concepts} concepts")
        if d is not None and len(d) and d.images.shape[1:3] != (cfg.model.image_size,) * 2:
            raise DataError(f"{d.root}: images are {d.images.shape[1:3]}, model expects {cfg.model.image_size}")
    ckpt = None
    if resume is not None:
        ckpt = load_checkpoint(resume)
        model, _ = restore_model(ckpt)
    else:
        model = build_model(cfg)
    out = Path(out_dir)
    t0 = time.perf_counter()
    result = fit(model, cfg, train_data.images, train_data.labels,
                 None if val is None else val.images, None if val is None else val.labels,
                 out, None if mix is None else mix.images, None if mix is None else mix.labels,
                 resume=ckpt, log=log)
    (out / "timing.json").write_text(json.dumps({"train_seconds": time.perf_counter() - t0}) + "\n")
    return result
