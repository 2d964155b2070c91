import pytest

from mctoken.config import ExperimentConfig
from mctoken.synskin import SynSkinConfig, generate_dataset

TINY_MODEL = dict(image_size=32, embed_dim=32, heads=2, depth=4, patch_layers=2, text_layers=1,
                  visual_layers=1, text_dim=16)


def tiny_tree(root, **train):
    return {
        "model": dict(TINY_MODEL),
        "synskin": {"image_size": 32},
        "train": {"lr": 1e-3, "batch_size": 8, "epochs": 2, "train_data": str(root / "train"),
                  "val_data": str(root / "val"), "test_data": str(root / "test"), **train},
        "eval": {"selectivity_pairs": 4, "continuity_images": 4},
    }


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    """Small 32px train/val/test splits shared by the harness tests."""
    root = tmp_path_factory.mktemp("tiny")
    cfg = SynSkinConfig(image_size=32)
    generate_dataset(cfg, 32, 0, root / "train")
    generate_dataset(cfg, 12, 1, root / "val")
    generate_dataset(cfg, 12, 2, root / "test")
    return root


@pytest.fixture
def tiny_cfg(tiny_data):
    return ExperimentConfig.from_dict(tiny_tree(tiny_data))
