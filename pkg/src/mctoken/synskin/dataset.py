"""Writing and reading generated datasets on disk.

Layout under ``out_dir``::

    images/000000.png               8-bit RGB
    masks/lesion/000000.png         8-bit gray, 0/255
    masks/border/000000.png
    masks/color/<name>/000000.png
    labels.csv                      index,<six colors>,combo,seed
    manifest.json
"""
from __future__ import annotations

import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .generator import SynSample, SynSkinConfig, generate_sample, sample_seed
from .palette import COLOR_NAMES

FORMAT_VERSION = 1
LABEL_HEADER = ["index", *COLOR_NAMES, "combo", "seed"]


def _name(idx: int) -> str:
    return f"{idx:06d}.png"


def _save_png(array: np.ndarray, path: Path) -> None:
    try:
        Image.fromarray(array).save(path, format="PNG", optimize=False, compress_level=6)
    except OSError as exc:
        raise OSError(f"failed to write {path}: {exc}") from exc


def write_sample(sample: SynSample, idx: int, out_dir: Path) -> None:
    out_dir = Path(out_dir)
    _save_png(sample.image, out_dir / "images" / _name(idx))
    _save_png(sample.lesion_mask.astype(np.uint8) * 255, out_dir / "masks" / "lesion" / _name(idx))
    _save_png(sample.border_mask.astype(np.uint8) * 255, out_dir / "masks" / "border" / _name(idx))
    for k, name in enumerate(COLOR_NAMES):
        _save_png(sample.color_masks[k].astype(np.uint8) * 255, out_dir / "masks" / "color" / name / _name(idx))


def _make_dirs(out_dir: Path) -> None:
    try:
        for sub in ["images", "masks/lesion", "masks/border", *[f"masks/color/{n}" for n in COLOR_NAMES]]:
            (out_dir / sub).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directories under {out_dir}: {exc}") from exc


def _work(args):
    idx, seed, cfg_dict, out_dir = args
    cfg = SynSkinConfig.from_dict(cfg_dict)
    s = generate_sample(seed, cfg)
    write_sample(s, idx, Path(out_dir))
    return idx, s.labels.tolist(), s.combo, seed


def generate_dataset(config: SynSkinConfig | None, count: int, master_seed: int, out_dir,
                     workers: int = 1, start: int = 0) -> dict:
    """Generate ``count`` samples into ``out_dir`` and return the manifest.

    Sample ``i`` uses ``sample_seed(master_seed, start + i)`` so the output is
    a pure function of (config, count, master_seed, start) regardless of
    ``workers``.
    """
    config = config or SynSkinConfig()
    if count < 0:
        raise ValueError(f"count must be >= 0, got {count}")
    out_dir = Path(out_dir)
    _make_dirs(out_dir)
    cfg_dict = config.to_dict()
    jobs = [(start + i, sample_seed(master_seed, start + i), cfg_dict, str(out_dir)) for i in range(count)]
    if workers > 1 and count > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_work, jobs, chunksize=max(1, count // (8 * workers))))
    else:
        rows = []
        for idx, seed, _, _ in jobs:
            s = generate_sample(seed, config)
            write_sample(s, idx, out_dir)
            rows.append((idx, s.labels.tolist(), s.combo, seed))
    rows.sort(key=lambda r: r[0])

    label_path = out_dir / "labels.csv"
    try:
        with open(label_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LABEL_HEADER)
            for idx, labels, combo, seed in rows:
                w.writerow([idx, *labels, combo, seed])
    except OSError as exc:
        raise OSError(f"failed to write {label_path}: {exc}") from exc

    counts = dict.fromkeys(COLOR_NAMES, 0)
    for _, labels, _, _ in rows:
        for name, v in zip(COLOR_NAMES, labels):
            counts[name] += int(v)
    manifest = {
        "format_version": FORMAT_VERSION,
        "master_seed": int(master_seed),
        "count": int(count),
        "start": int(start),
        "config": cfg_dict,
        "color_counts": counts,
        "implied_marginals": config.colors.implied_marginals(),
        "samples": [{"index": idx, "labels": labels, "combo": combo, "seed": seed}
                    for idx, labels, combo, seed in rows],
    }
    man_path = out_dir / "manifest.json"
    try:
        man_path.write_text(json.dumps(manifest, indent=1) + "\n")
    except OSError as exc:
        raise OSError(f"failed to write {man_path}: {exc}") from exc
    return manifest


@dataclass
class SynSkinData:
    """A loaded dataset; masks are None when loading was asked to skip them."""

    images: np.ndarray                  # (n, H, W, 3) uint8
    labels: np.ndarray                  # (n, 6) uint8
    indices: np.ndarray
    color_masks: Optional[np.ndarray] = None   # (n, 6, H, W) bool
    lesion_masks: Optional[np.ndarray] = None  # (n, H, W) bool
    root: Optional[Path] = None

    def __len__(self):
        return len(self.indices)

    def subset(self, rows) -> "SynSkinData":
        rows = np.asarray(rows, dtype=np.intp)
        pick = lambda a: None if a is None else a[rows]
        return SynSkinData(self.images[rows], self.labels[rows], self.indices[rows],
                           pick(self.color_masks), pick(self.lesion_masks), self.root)


def read_labels(root) -> tuple[np.ndarray, np.ndarray]:
    """(indices, labels) from ``labels.csv``."""
    path = Path(root) / "labels.csv"
    if not path.is_file():
        raise FileNotFoundError(f"labels file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:1 + len(COLOR_NAMES)] != LABEL_HEADER[:1 + len(COLOR_NAMES)]:
            raise ValueError(f"{path}: unexpected header {header}")
        rows = [r for r in reader if r]
    idx = np.array([int(r[0]) for r in rows], dtype=np.int64)
    labels = np.array([[int(v) for v in r[1:1 + len(COLOR_NAMES)]] for r in rows], dtype=np.uint8).reshape(-1, len(COLOR_NAMES))
    return idx, labels


def _read_png(path: Path) -> np.ndarray:
    if not path.is_file():
        raise FileNotFoundError(f"missing dataset file: {path}")
    with Image.open(path) as im:
        return np.asarray(im)


def load_dataset(root, masks: bool = True, limit: Optional[int] = None) -> SynSkinData:
    root = Path(root)
    idx, labels = read_labels(root)
    if limit is not None:
        idx, labels = idx[:limit], labels[:limit]
    images = np.stack([_read_png(root / "images" / _name(i)) for i in idx]) if len(idx) else np.zeros((0, 0, 0, 3), np.uint8)
    if images.ndim != 4 or images.shape[-1] != 3:
        raise ValueError(f"{root}: images must be RGB, got array of shape {images.shape}")
    color = lesion = None
    if masks and len(idx):
        color = np.stack([np.stack([_read_png(root / "masks" / "color" / n / _name(i)) > 127 for n in COLOR_NAMES])
                          for i in idx])
        lesion = np.stack([_read_png(root / "masks" / "lesion" / _name(i)) > 127 for i in idx])
    return SynSkinData(images, labels, idx, color, lesion, root)
