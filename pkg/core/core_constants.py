"""
Centralized constants for the PolyVivid conditioning stack.
- Paths (DATA_DIR, DB_PATH)
- Sub-seed purpose constants
- TensorFile header bytes
"""

from pathlib import Path

# ============================================================================
# CENTRALIZED PATHS - Import these everywhere
# ============================================================================
DATA_DIR = Path("data")
DB_PATH = DATA_DIR / "polyvivid_runs.db"

# ============================================================================
# SUB-SEED PURPOSES - derive_seed(seed, purpose) = seed ^ purpose
# ============================================================================
SEED_BASE_WEIGHTS = 0x0000_0000_B45E_0001
SEED_LORA_DOWN = 0x0000_0000_10BA_0002
SEED_ADAPTER_ENCODER = 0x0000_0000_ADA9_0003
SEED_MOCK_ENCODERS = 0x0000_0000_E7C0_0004
SEED_DATASET = 0x0000_0000_DA7A_0005
SEED_TRAIN_NOISE = 0x0000_0000_791A_0006
SEED_SAMPLE_NOISE = 0x0000_0000_5A3F_0007
SEED_EVAL = 0x0000_0000_E7A1_0008

UINT64_MASK = (1 << 64) - 1


def derive_seed(seed: int, purpose: int) -> int:
    """Per-purpose sub-seed from the single run seed."""
    return (int(seed) ^ purpose) & UINT64_MASK


# ============================================================================
# TENSORFILE FORMAT
# ============================================================================
TENSORFILE_MAGIC = b"PVTD"
TENSORFILE_VERSION = 0x01
DTYPE_F64_LE = 0x01
TENSORFILE_SUFFIX = ".pvtd"
MANIFEST_NAME = "manifest.json"

# ============================================================================
# TOKEN TEMPLATE
# ============================================================================
SEP_TOKEN = "<SEP>"
IDENTITY_SENTENCE = "The {word} looks like <image {index}>."
IDENTITY_LEAD_IN = "The {word} looks like"
DEFAULT_SEM_GRID = (4, 4)
DEFAULT_VAE_GRID = (2, 2)
