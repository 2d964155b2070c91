"""Synthetic dermoscopy-like images with per-color region masks."""
from .dataset import SynSkinData, generate_dataset, load_dataset, read_labels, write_sample
from .generator import (
    DegenerateMaskError,
    LesionPrior,
    SynSample,
    SynSkinConfig,
    apply_lesion_colors,
    derive_masks,
    gen_background,
    generate_sample,
    sample_attribute_mask,
    sample_lesion_mask,
    sample_seed,
)
from .noise import noise_texture, value_noise
from .palette import COLOR_NAMES, ColorBank, SkinTonePalette

__all__ = [
    "COLOR_NAMES", "ColorBank", "DegenerateMaskError", "LesionPrior", "SkinTonePalette",
    "SynSample", "SynSkinConfig", "SynSkinData", "apply_lesion_colors", "derive_masks",
    "gen_background", "generate_dataset", "generate_sample", "load_dataset", "noise_texture",
    "read_labels", "sample_attribute_mask", "sample_lesion_mask", "sample_seed", "value_noise",
    "write_sample",
]
