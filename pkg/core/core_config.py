"""
Run configuration.
- RunConfig dataclass with defaults (DEFAULT_CONFIG is derived from it)
- JSON config load/save (key-sorted, like every other written document)
- parse_config: defaults <- file <- flag overrides, strict key checking
"""

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Union

from core.core_errors import ConfigError
from utilities.util_tensorfile import atomic_write_text, dumps_document

logger = logging.getLogger(__name__)

INJECTION_MODES = ("attention_inherited", "token_concat", "adapter")
ROPE_MODES = ("interaction_3d", "sequential")


@dataclass
class RunConfig:
    seed: int = 7
    # Model dims
    d_model: int = 32
    heads: int = 4
    blocks: int = 2
    ffn_mult: int = 2
    rope_theta: float = 10000.0
    # Video / subject grids
    frames: int = 4
    latent_height: int = 8
    latent_width: int = 8
    channels: int = 4
    sem_grid: List[int] = field(default_factory=lambda: [2, 2])
    vae_grid: List[int] = field(default_factory=lambda: [2, 2])
    # Conditioning switches
    mode: str = "attention_inherited"
    injection: bool = True
    interaction: bool = True
    rope_mode: str = "interaction_3d"
    lora_rank: int = 8
    lora_alpha: float = 16.0
    # Training / sampling
    train_steps: int = 500
    sample_steps: int = 16
    learning_rate: float = 0.01
    dataset_size: int = 16
    max_subjects: int = 2
    eval_count: int = 8
    log_every: int = 50
    # Consolidation
    tau_dist: float = 0.3
    tau_clip: float = 0.25
    node_cap: int = 2000

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


DEFAULT_CONFIG: Dict[str, Any] = RunConfig().to_dict()

_POSITIVE_INTS = (
    "d_model", "heads", "blocks", "ffn_mult", "frames", "latent_height", "latent_width",
    "channels", "lora_rank", "train_steps", "sample_steps", "dataset_size", "max_subjects",
    "eval_count", "log_every", "node_cap",
)


# ============================================================================
# CONFIG FILE MANAGEMENT
# ============================================================================
def load_config(path: Union[str, Path]) -> Dict[str, Any]:
    """Read a JSON config document; an empty file means all defaults."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as e:
        raise ConfigError(str(path), f"cannot read config: {e}") from None
    if not text.strip():
        return {}
    try:
        document = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(str(path), f"invalid JSON: {e}") from None
    if not isinstance(document, dict):
        raise ConfigError(str(path), "config document must be an object")
    return document


def save_config(config: RunConfig, path: Union[str, Path]) -> None:
    atomic_write_text(path, dumps_document(config.to_dict()))
    logger.info(f"Config saved to {path}")


def parse_override(text: str) -> Dict[str, Any]:
    """`key=value` from the command line; the value is read as JSON when it parses."""
    if "=" not in text:
        raise ConfigError(text, "override must look like key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return {key.strip(): value}


def parse_config(path: Optional[Union[str, Path]] = None,
                 overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """Merge defaults <- file <- overrides and validate the result."""
    merged = dict(DEFAULT_CONFIG)
    for source in (load_config(path) if path else {}, dict(overrides or {})):
        for key, value in source.items():
            if key not in DEFAULT_CONFIG:
                raise ConfigError(key, "unknown config key")
            merged[key] = value

    kwargs = {}
    for f in fields(RunConfig):
        kwargs[f.name] = _coerce(f.name, merged[f.name], DEFAULT_CONFIG[f.name])
    config = RunConfig(**kwargs)
    validate_config(config)
    return config


def _coerce(key: str, value: Any, default: Any) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if (not isinstance(value, list) or len(value) != 2
                or not all(isinstance(v, int) and not isinstance(v, bool) for v in value)):
            raise ConfigError(key, f"expected a [width, height] pair of integers, got {value!r}")
        return list(value)
    if not isinstance(value, str):
        raise ConfigError(key, f"expected a string, got {value!r}")
    return value


def validate_config(config: RunConfig) -> None:
    for key in _POSITIVE_INTS:
        if getattr(config, key) < 1:
            raise ConfigError(key, f"must be positive, got {getattr(config, key)}")
    if config.seed < 0 or config.seed >= 2 ** 64:
        raise ConfigError("seed", "must fit in an unsigned 64-bit integer")
    if config.mode not in INJECTION_MODES:
        raise ConfigError("mode", f"must be one of {', '.join(INJECTION_MODES)}, got {config.mode!r}")
    if config.rope_mode not in ROPE_MODES:
        raise ConfigError("rope_mode", f"must be one of {', '.join(ROPE_MODES)}, got {config.rope_mode!r}")
    if config.d_model % config.heads:
        raise ConfigError("heads", f"d_model {config.d_model} is not divisible by {config.heads} heads")
    if config.head_dim % 2 or config.head_dim < 6:
        raise ConfigError("heads", f"head_dim {config.head_dim} must be even and at least 6")
    for key in ("sem_grid", "vae_grid"):
        if min(getattr(config, key)) < 1:
            raise ConfigError(key, "grid sides must be positive")
    if config.max_subjects > 3:
        raise ConfigError("max_subjects", "synthetic scenes hold at most 3 subjects")
    if config.lora_alpha <= 0 or config.learning_rate <= 0 or config.rope_theta <= 0:
        raise ConfigError("lora_alpha/learning_rate/rope_theta", "must be positive")
    if not 0.0 <= config.tau_clip <= 1.0:
        raise ConfigError("tau_clip", f"must lie in [0, 1], got {config.tau_clip}")
    if not 0.0 < config.tau_dist <= 2.0:
        raise ConfigError("tau_dist", f"must lie in (0, 2], got {config.tau_dist}")
