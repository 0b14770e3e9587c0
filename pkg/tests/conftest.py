import sys
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parent.parent
for path in (ROOT, ROOT / "tests"):
    if str(path) not in sys.path:
        sys.path.insert(0, str(path))

from core.core_config import parse_config  # noqa: E402

GOLDEN_DIR = ROOT / "tests" / "golden"
SAMPLES_DIR = ROOT / "samples"

# d_model 12 over 2 heads gives head_dim 6 = (2, 2, 2) rope axes
SMALL_CONFIG = {
    "d_model": 12,
    "heads": 2,
    "blocks": 1,
    "ffn_mult": 2,
    "frames": 2,
    "latent_height": 4,
    "latent_width": 4,
    "channels": 3,
    "lora_rank": 2,
    "lora_alpha": 4.0,
    "train_steps": 3,
    "sample_steps": 2,
    "dataset_size": 2,
    "eval_count": 1,
    "log_every": 1,
}


@pytest.fixture
def small_config():
    return parse_config(overrides=SMALL_CONFIG)


@pytest.fixture
def make_config():
    def factory(**overrides):
        return parse_config(overrides={**SMALL_CONFIG, **overrides})
    return factory


@pytest.fixture
def golden_dir():
    return GOLDEN_DIR


@pytest.fixture
def samples_dir():
    return SAMPLES_DIR
