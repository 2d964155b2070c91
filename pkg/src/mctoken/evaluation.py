"""Test-set evaluation, report files and map export."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from . import metrics
from .config import DataError, ExperimentConfig
from .explain import ConceptLocalizer
from .model import ConceptTokenTransformer
from .synskin.dataset import SynSkinData
from .training import to_float

REPORT_VERSION = 1
BRANCHES = ("visual", "patch", "text")


@dataclass
class Evaluation:
    """Everything computed by :func:`evaluate_model`.

    ``report`` holds the headline metrics (Dice and CL-score at
    ``cfg.eval.tau``); ``extra`` maps additional metric names to
    (mean, per_concept, n) triples.
    """

    report: metrics.MetricReport
    dice_by_tau: dict
    best_tau: Optional[float]
    best_dice: Optional[float]
    extra: dict = field(default_factory=dict)
    probs: Optional[np.ndarray] = None
    maps: Optional[np.ndarray] = None

    def metric_table(self) -> dict:
        table = self.report.to_dict()
        for name, (mean, per, n) in self.extra.items():
            table[name] = {"mean": metrics._clean(mean), "per_concept": metrics._clean(per), "n": n}
        return table


def _nanmean(values) -> float:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else float("nan")


def _per_concept(pairs, values, c: int) -> list:
    out = []
    for k in range(c):
        sel = [v for (i, kk), v in zip(pairs, values) if kk == k and v is not None]
        out.append(float(np.mean(sel)) if sel else None)
    return out


def branch_probabilities(model: ConceptTokenTransformer, images, batch_size: int = 64) -> dict:
    """Per-branch sigmoid probabilities; branches the variant lacks are omitted."""
    out: dict = {}
    for o in model.infer(images, batch_size, record_trace=False):
        for name in BRANCHES:
            t = getattr(o.scores, name)
            if t is not None:
                out.setdefault(name, []).append(1.0 / (1.0 + np.exp(-np.asarray(t.data, np.float64))))
    return {k: np.concatenate(v) for k, v in out.items()}


def check_compatible(model: ConceptTokenTransformer, data: SynSkinData) -> None:
    cfg = model.config
    if len(data) == 0:
        raise DataError(f"dataset {data.root} is empty")
    if data.labels.shape[1] != cfg.num_concepts:
        raise DataError(f"dataset {data.root} has {data.labels.shape[1]} concepts, "
                        f"checkpoint has {cfg.num_concepts}")
    if data.images.shape[1:3] != (cfg.image_size, cfg.image_size):
        raise DataError(f"dataset images are {data.images.shape[1:3]}, model expects {cfg.image_size}")
    if data.color_masks is None or data.lesion_masks is None:
        raise DataError(f"dataset {data.root} was loaded without masks")


def evaluate_model(model: ConceptTokenTransformer, cfg: ExperimentConfig, data: SynSkinData,
                   xai: bool = True) -> Evaluation:
    """Classification, localization and explanation metrics on ``data``.

    Localization and explanation metrics are restricted to (image, concept)
    pairs that are both labelled and predicted present.
    """
    check_compatible(model, data)
    ec = cfg.eval
    images = to_float(data.images)
    labels = data.labels
    c = labels.shape[1]
    localizer = ConceptLocalizer(model, cfg.explain)
    lmap, probs = localizer.explain(images)
    maps = lmap.values
    acc, f1, per_f1 = metrics.multilabel_stats(probs, labels)
    auc, per_auc = metrics.macro_auc(probs, labels)
    pairs = metrics.true_positive_pairs(probs, labels)

    dice_by_tau, dice_per = {}, {}
    for tau in sorted(set(ec.taus) | {ec.tau}):
        mean, _, per = metrics.localization_dice(maps, pairs, data.color_masks, tau)
        dice_by_tau[tau], dice_per[tau] = mean, per
    finite = {t: d for t, d in dice_by_tau.items() if t in ec.taus and np.isfinite(d)}
    best_tau = max(finite, key=lambda t: (finite[t], -t)) if finite else None
    dice = dice_by_tau[ec.tau]
    cl = metrics.cl_score(f1, dice) if np.isfinite(dice) else float("nan")

    spars = [metrics.sparseness(maps[i, :, :, k]) for i, k in pairs]
    points = [metrics.pointing_game(maps[i, :, :, k], data.color_masks[i, k]) for i, k in pairs]
    areas = [float(data.color_masks[i, k].mean()) for i, k in pairs]

    extra = {}
    for tau, d in dice_by_tau.items():
        extra[f"dice_tau_{tau:g}"] = (d, dice_per[tau], len(pairs))
    if best_tau is not None:
        extra["dice_best"] = (dice_by_tau[best_tau], dice_per[best_tau], len(pairs))
        extra["best_tau"] = (best_tau, None, None)
    whole = [metrics.dice(data.lesion_masks[i], data.color_masks[i, k]) for i, k in pairs]
    extra["dice_whole_lesion"] = (_nanmean(whole), _per_concept(pairs, whole, c), len(pairs))
    extra["pointing_game_area_baseline"] = (_nanmean(areas), _per_concept(pairs, areas, c), len(pairs))
    # best-threshold Dice of every map stage, whichever one the config reports
    if pairs:
        for stage, stage_maps in localizer.stage_maps(images).items():
            sweep = {t: metrics.localization_dice(stage_maps, pairs, data.color_masks, t) for t in ec.taus}
            t_best = max(sweep, key=lambda t: (sweep[t][0], -t))
            extra[f"dice_best_{stage}"] = (sweep[t_best][0], sweep[t_best][2], len(pairs))
            extra[f"best_tau_{stage}"] = (t_best, None, None)

    for name, bp in branch_probabilities(model, images, ec.batch_size).items():
        b_acc, b_f1, b_per = metrics.multilabel_stats(bp, labels)
        b_auc, b_auc_per = metrics.macro_auc(bp, labels)
        extra[f"{name}_branch_f1"] = (b_f1, b_per, len(labels))
        extra[f"{name}_branch_auc"] = (b_auc, b_auc_per, len(labels))

    sel_mean = cont_mean = None
    sel_per = cont_n = None
    sel_n = 0
    if xai and pairs:
        rng = np.random.default_rng(0)
        take = sorted(rng.permutation(len(pairs))[:ec.selectivity_pairs].tolist())
        chosen = [pairs[j] for j in take]
        base = images.mean(axis=0)
        predict = lambda x: model.predict_proba(x, ec.batch_size)
        areas_sel = [metrics.selectivity(predict, images[i], maps[i, :, :, k], k,
                                         patch=model.config.patch_size, step_fraction=ec.selectivity_step,
                                         baseline=base)[0] for i, k in chosen]
        if areas_sel:
            sel_mean, sel_per, sel_n = float(np.mean(areas_sel)), _per_concept(chosen, areas_sel, c), len(chosen)
    if xai:
        vals = []
        for i in range(min(ec.continuity_images, len(images))):
            concepts = np.nonzero(probs[i] >= 0.5)[0]
            if concepts.size == 0:
                continue
            vals.append(metrics.continuity(localizer, images[i], count=ec.continuity_count,
                                           shift=ec.continuity_shift, concepts=concepts.tolist(),
                                           patch=model.config.patch_size, reference=maps[i]))
        cont_mean, cont_n = (float(np.mean(vals)), len(vals)) if vals else (None, 0)

    report = metrics.MetricReport(
        acc=acc, auc=auc, f1=f1, dice=dice, cl_score=cl,
        selectivity=sel_mean,
        sparseness=_nanmean(spars) if pairs else None,
        pointing_game=_nanmean(points) if pairs else None,
        continuity=cont_mean,
        per_concept={"acc": None, "auc": per_auc, "f1": per_f1, "dice": dice_per[ec.tau],
                     "selectivity": sel_per, "sparseness": _per_concept(pairs, spars, c),
                     "pointing_game": _per_concept(pairs, points, c)},
        counts={"acc": len(labels), "auc": len(labels), "f1": len(labels), "dice": len(pairs),
                "cl_score": len(pairs), "selectivity": sel_n if xai else None,
                "sparseness": len(pairs), "pointing_game": len(pairs), "continuity": cont_n},
    )
    return Evaluation(report, dice_by_tau, best_tau,
                      None if best_tau is None else dice_by_tau[best_tau], extra, probs, maps)


# -- report files ---------------------------------------------------------------------

def write_report(ev: Evaluation, out_dir, dataset: str, variant: str, run_hash: str | None = None) -> dict:
    """Write ``report.json`` and ``report.csv``; returns the JSON payload."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = ev.metric_table()
    payload = {"format_version": REPORT_VERSION, "dataset": dataset, "variant": variant,
               "run_sha256": run_hash, "metrics": table}
    (out / "report.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    write_report_rows(out / "report.csv", report_rows(table, dataset, variant))
    return payload


def report_rows(table: dict, dataset: str, variant: str) -> list[dict]:
    return [{"dataset": dataset, "variant": variant, "metric": name,
             "mean": "" if entry["mean"] is None else repr(entry["mean"]),
             "n": "" if entry["n"] is None else entry["n"]}
            for name, entry in sorted(table.items())]


def write_report_rows(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["dataset", "variant", "metric", "mean", "n"], lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


# -- map export -----------------------------------------------------------------------

def heat_colormap(values: np.ndarray) -> np.ndarray:
    """Fixed black-red-yellow-white ramp: [0, 1] -> uint8 RGB."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    rgb = np.stack([np.clip(3 * v, 0, 1), np.clip(3 * v - 1, 0, 1), np.clip(3 * v - 2, 0, 1)], axis=-1)
    return np.round(255 * rgb).astype(np.uint8)


def overlay(image: np.ndarray, heat: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Blend the heat tint over ``image`` with opacity ``alpha * heat``."""
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    a = (alpha * np.clip(heat, 0, 1))[..., None]
    out = (1 - a) * img.astype(np.float64) + a * heat_colormap(heat).astype(np.float64)
    return np.round(out).astype(np.uint8)


def export_maps(maps: np.ndarray, probs: np.ndarray, images: np.ndarray, indices, names, out_dir,
                sources=None) -> dict:
    """Write map and overlay PNGs for predicted concepts plus ``maps/index.json``."""
    out = Path(out_dir)
    (out / "maps").mkdir(parents=True, exist_ok=True)
    entries = []
    for j, idx in enumerate(indices):
        predicted = [k for k in range(len(names)) if probs[j, k] >= 0.5]
        entry = {"index": int(idx), "scores": {n: float(probs[j, k]) for k, n in enumerate(names)},
                 "predicted": [names[k] for k in predicted], "maps": {}, "overlays": {}}
        if sources is not None:
            entry["source"] = str(sources[j])
        for k in predicted:
            name = names[k]
            stem = f"{int(idx):06d}.png"
            mpath = out / "maps" / name / stem
            opath = out / "overlays" / name / stem
            mpath.parent.mkdir(parents=True, exist_ok=True)
            opath.parent.mkdir(parents=True, exist_ok=True)
            m = maps[j, :, :, k]
            Image.fromarray(np.round(255 * np.clip(m, 0, 1)).astype(np.uint8), mode="L").save(mpath)
            Image.fromarray(overlay(images[j], m), mode="RGB").save(opath)
            entry["maps"][name] = str(mpath.relative_to(out))
            entry["overlays"][name] = str(opath.relative_to(out))
        if not predicted:
            entry["note"] = "no concept predicted"
        entries.append(entry)
    index = {"concepts": list(names), "images": entries}
    (out / "maps" / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    return index


def read_image(path, size: int) -> np.ndarray:
    try:
        with Image.open(path) as im:
            img = np.asarray(im.convert("RGB"))
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    if img.shape[:2] != (size, size):
        raise DataError(f"image {path} is {img.shape[1]}x{img.shape[0]}, model expects {size}x{size}")
    return img
