"""Multi-run drivers: seeded repeats, the pooling/loss grid and variant comparison."""
from __future__ import annotations

import csv
import hashlib
import json
import platform
from pathlib import Path

import numpy as np

from .config import DataError, ExperimentConfig
from .evaluation import evaluate_model, export_maps, report_rows, write_report, write_report_rows
from .model import CONCEPT_NAMES, VARIANTS
from .synskin.dataset import load_dataset
from .training import TrainResult, load_model, train, to_float

POOLINGS = ("gap", "gmp", "gwrp")
LOSS_SETTINGS = {"separate": "separate", "mean-only": "mean", "both": "both"}


def versions() -> dict:
    import scipy
    from importlib.metadata import PackageNotFoundError, version

    try:
        pkg = version("artifact")
    except PackageNotFoundError:
        pkg = "unknown"
    return {"python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__,
            "mctoken": pkg}


def write_run_json(out_dir, cfg: ExperimentConfig, command: str, extra: dict | None = None) -> str:
    """Write ``run.json`` (no timestamps) and return its SHA-256."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = {"command": command, "config": cfg.to_dict(), "versions": versions(), **(extra or {})}
    raw = (json.dumps(payload, indent=2, sort_keys=True) + "\n").encode()
    (out / "run.json").write_bytes(raw)
    return hashlib.sha256(raw).hexdigest()


def _test_data(cfg: ExperimentConfig):
    path = cfg.train.test_data
    if path is None:
        return None
    if not Path(path).is_dir():
        raise DataError(f"train.test_data directory not found: {path}")
    try:
        return load_dataset(path)
    except (FileNotFoundError, ValueError) as exc:
        raise DataError(f"cannot load test data from {path}: {exc}") from exc


def train_and_evaluate(cfg: ExperimentConfig, out_dir, command: str = "train", xai: bool = True,
                       export: bool = False, log=None) -> tuple[TrainResult, dict | None]:
    """Train, then evaluate the best checkpoint on ``train.test_data`` if set."""
    out = Path(out_dir)
    run_hash = write_run_json(out, cfg, command)
    result = train(cfg, out, log=log)
    test = _test_data(cfg)
    if test is None:
        return result, None
    model, _, _ = load_model(result.best_path)
    ev = evaluate_model(model, cfg, test, xai=xai)
    payload = write_report(ev, out, Path(cfg.train.test_data).name, cfg.model.variant, run_hash)
    if export:
        export_maps(ev.maps, ev.probs, test.images, test.indices, CONCEPT_NAMES, out)
    return result, payload


def seed_runs(cfg: ExperimentConfig, seeds, out_dir, log=None) -> list[dict]:
    """Repeat training with each train seed and write ``seeds.csv`` with per-seed and mean values."""
    out = Path(out_dir)
    rows = []
    for s in seeds:
        run_cfg = cfg.replace(train={"seed": int(s)}, model={"seed": int(s)})
        _, payload = train_and_evaluate(run_cfg, out / f"seed_{s}", command="train", log=log)
        row = {"seed": s}
        if payload:
            row.update({k: payload["metrics"][k]["mean"] for k in ("acc", "auc", "f1", "dice", "cl_score")})
        rows.append(row)
    if rows and len(rows[0]) > 1:
        keys = [k for k in rows[0] if k != "seed"]
        mean = {"seed": "mean"}
        for k in keys:
            vals = [r[k] for r in rows if r.get(k) is not None]
            mean[k] = float(np.mean(vals)) if vals else None
        rows.append(mean)
    with open(out / "seeds.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return rows


def ablate(cfg: ExperimentConfig, out_dir, log=None) -> list[dict]:
    """Train every pooling x loss-setting cell with shared seed and data.

    Writes ``ablation.csv`` (one row per cell) and one sub-directory per run.
    """
    out = Path(out_dir)
    write_run_json(out, cfg, "ablate")
    rows = []
    for pooling in POOLINGS:
        for label, mode in LOSS_SETTINGS.items():
            run_cfg = cfg.replace(model={"pooling": pooling}, train={"loss_mode": mode})
            result, payload = train_and_evaluate(run_cfg, out / f"{pooling}_{label}", command="ablate", xai=False)
            m = payload["metrics"] if payload else {}
            rows.append({
                "pooling": pooling,
                "separate_losses": mode in ("separate", "both"),
                "mean_loss": mode in ("mean", "both"),
                "dice": m.get("dice", {}).get("mean"),
                "dice_best": m.get("dice_best", {}).get("mean"),
                "f1": m.get("f1", {}).get("mean"),
                "final_loss": result.final_loss,
                "converged": bool(np.isfinite(result.final_loss)),
            })
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return rows


def compare(cfg: ExperimentConfig, out_dir, variants=VARIANTS, log=None) -> list[dict]:
    """Train and evaluate each model variant; writes ``comparison.csv`` and
    a combined ``report.csv``. Per-variant map exports live in each run dir."""
    out = Path(out_dir)
    write_run_json(out, cfg, "compare")
    rows, long_rows = [], []
    fields = ("acc", "auc", "f1", "dice", "dice_best", "cl_score", "sparseness", "pointing_game",
              "selectivity", "continuity", "visual_branch_f1", "patch_branch_f1", "text_branch_f1",
              "text_branch_auc")
    for variant in variants:
        run_cfg = cfg.replace(model={"variant": variant})
        result, payload = train_and_evaluate(run_cfg, out / variant, command="compare", export=True)
        if payload is None:
            raise DataError("compare needs train.test_data")
        m = payload["metrics"]
        row = {"variant": variant, "final_loss": result.final_loss}
        row.update({k: m[k]["mean"] if k in m else None for k in fields})
        rows.append(row)
        long_rows += report_rows(m, payload["dataset"], variant)
    with open(out / "comparison.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    write_report_rows(out / "report.csv", long_rows)
    return rows


def explain_checkpoint(ckpt_path, out_dir, image_paths=(), data_dir=None) -> dict:
    """Map and overlay export for single images or a whole dataset."""
    from .evaluation import read_image
    from .explain import ConceptLocalizer

    model, cfg, _ = load_model(ckpt_path)
    if data_dir is not None:
        try:
            data = load_dataset(data_dir, masks=False)
        except (FileNotFoundError, ValueError) as exc:
            raise DataError(f"cannot load data from {data_dir}: {exc}") from exc
        images, indices, sources = data.images, data.indices, None
    else:
        images = np.stack([read_image(p, cfg.model.image_size) for p in image_paths])
        indices, sources = list(range(len(images))), [str(p) for p in image_paths]
    lmap, probs = ConceptLocalizer(model, cfg.explain).explain(to_float(images))
    return export_maps(lmap.values, probs, images, indices, CONCEPT_NAMES[:cfg.model.num_concepts],
                       out_dir, sources=sources)
