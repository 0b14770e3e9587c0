"""
Mock encoders and synthetic multi-subject scenes for the toy pipeline.

Scenes are latent videos of shape (frames, height, width, channels) on a
zero background. Each subject is a small (w, h, channels) patch with its own
color and texture, drawn in its own horizontal lane and translated left or
right as the prompt says.
"""

import hashlib
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from core.core_config import RunConfig
from core.core_constants import SEED_DATASET, derive_seed
from core.core_errors import ConfigError, LayoutError
from core.core_numerics import Rng
from layers.layer_tokens import SubjectSpec

logger = logging.getLogger(__name__)

SUBJECT_WORDS = ("man", "woman", "dog", "cat", "guitar", "car", "ball", "bird")
DIRECTIONS = ("left", "right")


def token_hash(token: str) -> int:
    return int.from_bytes(hashlib.sha256(token.lower().encode("utf-8")).digest()[:8], "little")


class MockEncoders:
    """
    Seeded stand-ins for the language model and the VAE.
    - text_embed: token -> fixed random vector (seeded by seed ^ hash(token))
    - vae_encode / vae_decode: p -> E p and z -> E^T z with E (d x C) orthonormal columns
    - sem_encode: resample the image to the sem grid, then a separate random map
    """

    def __init__(self, seed: int, d_model: int, channels: int):
        if channels > d_model:
            raise ConfigError("channels", f"{channels} channels do not fit in d_model {d_model}")
        self.seed = seed
        self.d_model = d_model
        self.channels = channels
        rng = Rng(seed)
        q, _ = np.linalg.qr(rng.normal((d_model, channels)))
        self.vae_matrix = q
        self.sem_matrix = rng.normal((d_model, channels), scale=1.0 / np.sqrt(channels))

    def text_embed(self, tokens: Sequence[str]) -> np.ndarray:
        rows = [Rng(self.seed ^ token_hash(tok)).normal(self.d_model) for tok in tokens]
        return np.stack(rows) if rows else np.zeros((0, self.d_model))

    def vae_encode(self, pixels: np.ndarray) -> np.ndarray:
        """(n x C) pixels -> (n x d) tokens."""
        return np.asarray(pixels, dtype=np.float64).reshape(-1, self.channels) @ self.vae_matrix.T

    def vae_decode(self, tokens: np.ndarray) -> np.ndarray:
        return np.asarray(tokens, dtype=np.float64) @ self.vae_matrix

    def sem_encode(self, image: np.ndarray, sem_grid: Tuple[int, int]) -> np.ndarray:
        w, h = image.shape[:2]
        sw, sh = sem_grid
        rows = np.minimum(((np.arange(sw) + 0.5) * w / sw).astype(int), w - 1)
        cols = np.minimum(((np.arange(sh) + 0.5) * h / sh).astype(int), h - 1)
        pixels = image[rows][:, cols].reshape(-1, self.channels)
        return pixels @ self.sem_matrix.T


@dataclass
class SyntheticScene:
    frames: int
    height: int
    width: int
    words: List[str]
    directions: List[str]
    images: List[np.ndarray]                    # per subject, (w, h, C)
    placements: List[List[Tuple[int, int]]]     # per subject, per frame: top-left (row, col)
    video: np.ndarray                           # (frames, height, width, C)

    @property
    def prompt(self) -> str:
        clauses = [f"a {word} moves {d}" for word, d in zip(self.words, self.directions)]
        text = " and ".join(clauses)
        return text[0].upper() + text[1:]

    def subjects(self, sem_grid: Tuple[int, int], vae_grid: Tuple[int, int]) -> List[SubjectSpec]:
        return [SubjectSpec(word, tuple(sem_grid), tuple(vae_grid)) for word in self.words]

    def region(self, video: np.ndarray, subject: int, frame: int) -> np.ndarray:
        """Flattened pixels of `video` under subject's placement in `frame`."""
        w, h = self.images[subject].shape[:2]
        row, col = self.placements[subject][frame]
        return video[frame, row:row + w, col:col + h, :].reshape(-1)


def place_subjects(count: int, directions: Sequence[str], frames: int, height: int, width: int,
                   patch: Tuple[int, int]) -> List[List[Tuple[int, int]]]:
    """One lane per subject; `right` starts at the left edge and moves right, `left` the reverse."""
    w, h = patch
    lane = height // count
    if lane < w or width < h:
        raise LayoutError(f"{count} subjects of {w}x{h} do not fit a {height}x{width} frame")
    span = width - h
    step = max(1, span // max(frames - 1, 1)) if span else 0
    placements = []
    for k, direction in enumerate(directions):
        row = k * lane + (lane - w) // 2
        cols = [min(step * f, span) for f in range(frames)]
        if direction == "left":
            cols = [span - c for c in cols]
        placements.append([(row, c) for c in cols])
    return placements


def make_scene(rng: Rng, config: RunConfig) -> SyntheticScene:
    w, h = config.vae_grid
    count = int(rng.integers(1, config.max_subjects + 1, 1)[0])
    order = rng.permutation(len(SUBJECT_WORDS))[:count]
    words = [SUBJECT_WORDS[i] for i in order]
    directions = [DIRECTIONS[i] for i in rng.integers(0, 2, count)]

    images = []
    for _ in range(count):
        color = rng.normal(config.channels)
        texture = rng.normal((w, h, config.channels), scale=0.5)
        images.append(color[None, None, :] + texture)

    placements = place_subjects(count, directions, config.frames, config.latent_height,
                                config.latent_width, (w, h))
    video = np.zeros((config.frames, config.latent_height, config.latent_width, config.channels))
    for image, track in zip(images, placements):
        for f, (row, col) in enumerate(track):
            video[f, row:row + w, col:col + h, :] = image
    return SyntheticScene(config.frames, config.latent_height, config.latent_width,
                          words, directions, images, placements, video)


def make_dataset(seed: int, count: int, config: Optional[RunConfig] = None) -> List[SyntheticScene]:
    """Deterministic list of `count` scenes."""
    if count < 1:
        raise ConfigError("dataset_size", f"must be >= 1, got {count}")
    config = config or RunConfig()
    rng = Rng(derive_seed(seed, SEED_DATASET))
    scenes = [make_scene(rng, config) for _ in range(count)]
    logger.info(f"Built {count} synthetic scenes (seed {seed})")
    return scenes
