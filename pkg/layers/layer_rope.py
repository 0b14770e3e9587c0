"""
Text-image interaction 3D-RoPE.

Index rules for a condition stream:
    TEXT            (t, 0, 0), consecutive t starting at 1
    IMG_SEM of k    (m + 1, i // h - w // 2, i % h - h // 2),  i = 0 .. w*h - 1
    IMG_VAE of k    (m + 2, same spatial layout as its IMG_SEM grid)
where m is the last TEXT index before subject k's IMG_SEM block. The next
subject's TEXT block resumes at m + 3.

Rotation: the head dimension is split into (d_t, d_y, d_x); axis a owns
d_a / 2 adjacent pairs rotated by idx_a * theta ** (-2j / d_a).
"""

import logging
from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from core.core_errors import LayoutError, NumericsError
from core.core_numerics import Tensor, rotate_pairs
from layers.layer_tokens import TokenKind, TokenStream, validate_stream

logger = logging.getLogger(__name__)


class RopeIndex(NamedTuple):
    t: int
    y: int
    x: int


def default_partition(head_dim: int) -> Tuple[int, int, int]:
    """Split head_dim into even parts as equally as possible, remainder to t then y."""
    pairs = head_dim // 2
    base, rem = divmod(pairs, 3)
    return 2 * (base + (rem > 0)), 2 * (base + (rem > 1)), 2 * base


@dataclass(frozen=True)
class RopeConfig:
    head_dim: int
    partition: Optional[Tuple[int, int, int]] = None
    theta: float = 10000.0

    def __post_init__(self):
        if self.head_dim < 2 or self.head_dim % 2:
            raise NumericsError(f"rope head_dim must be even, got {self.head_dim}")
        partition = tuple(self.partition) if self.partition else default_partition(self.head_dim)
        if len(partition) != 3 or any(d < 2 or d % 2 for d in partition):
            raise NumericsError(f"rope partition {partition} needs three even parts >= 2")
        if sum(partition) != self.head_dim:
            raise NumericsError(f"rope partition {partition} does not sum to head_dim {self.head_dim}")
        if self.theta <= 0:
            raise NumericsError(f"rope theta must be positive, got {self.theta}")
        object.__setattr__(self, "partition", partition)

    def frequencies(self) -> List[np.ndarray]:
        """Per-axis inverse frequencies theta ** (-2j / d_a)."""
        return [self.theta ** (-2.0 * np.arange(d // 2) / d) for d in self.partition]


# ============================================================================
# INDEX ASSIGNMENT
# ============================================================================
def assign_text_indices(start_t: int, count: int) -> List[RopeIndex]:
    return [RopeIndex(start_t + j, 0, 0) for j in range(max(count, 0))]


def _centered_grid(t: int, w: int, h: int) -> List[RopeIndex]:
    if w < 1 or h < 1:
        raise LayoutError(f"grid must be at least 1x1, got {w}x{h}")
    return [RopeIndex(t, i // h - w // 2, i % h - h // 2) for i in range(w * h)]


def assign_image_sem_indices(m1: int, w: int, h: int) -> List[RopeIndex]:
    return _centered_grid(m1 + 1, w, h)


def assign_image_vae_indices(m1: int, w: int, h: int) -> List[RopeIndex]:
    return _centered_grid(m1 + 2, w, h)


def assign_stream(stream: TokenStream) -> List[RopeIndex]:
    """One index per token of a well-formed stream, in stream order."""
    validate_stream(stream)
    indices: List[RopeIndex] = []
    next_text_t = 1
    last_text_t = 0
    anchors = {}  # subject_id -> last TEXT index before its IMG_SEM block

    for seg in stream.segments():
        count = seg.stop - seg.start
        if seg.kind is TokenKind.TEXT:
            indices += assign_text_indices(next_text_t, count)
            last_text_t = next_text_t + count - 1
        elif seg.kind is TokenKind.IMG_SEM:
            w, h = stream.subjects[seg.subject_id].sem_grid
            indices += assign_image_sem_indices(last_text_t, w, h)
            anchors[seg.subject_id] = last_text_t
            next_text_t = last_text_t + 3
        else:
            w, h = stream.subjects[seg.subject_id].vae_grid
            indices += assign_image_vae_indices(anchors[seg.subject_id], w, h)
    return indices


def assign_sequential(stream: TokenStream) -> List[RopeIndex]:
    """Plain 1D ramp (seq_pos, 0, 0) over the whole stream."""
    validate_stream(stream)
    return [RopeIndex(e.seq_pos, 0, 0) for e in stream.entries]


def assign_video_indices(frames: int, height: int, width: int, t_offset: int = 0) -> List[RopeIndex]:
    """(frame, row, col) grid for row-major video tokens, spatially centered."""
    return [
        RopeIndex(t_offset + f, r - height // 2, c - width // 2)
        for f in range(frames) for r in range(height) for c in range(width)
    ]


def assign_spatial_indices(w: int, h: int) -> List[RopeIndex]:
    """Centered grid at t = 0."""
    return _centered_grid(0, w, h)


# ============================================================================
# ROTATION
# ============================================================================
def rope_tables(indices: Sequence[RopeIndex], cfg: RopeConfig) -> Tuple[np.ndarray, np.ndarray]:
    """cos/sin tables of shape (len(indices), head_dim // 2)."""
    idx = np.asarray(indices, dtype=np.float64).reshape(-1, 3)
    angles = np.concatenate(
        [np.outer(idx[:, axis], freqs) for axis, freqs in enumerate(cfg.frequencies())], axis=1
    )
    return np.cos(angles), np.sin(angles)


def rope_rotate(x: Tensor, indices: Sequence[RopeIndex], cfg: RopeConfig) -> Tensor:
    """Rotate every row of x (n x head_dim) by its own index."""
    if x.data.ndim != 2 or x.dims[1] != cfg.head_dim or x.dims[0] != len(indices):
        raise NumericsError(f"rope: dims {x.dims} do not match {len(indices)} indices of head_dim {cfg.head_dim}")
    cos, sin = rope_tables(indices, cfg)
    return rotate_pairs(x, cos, sin)


def apply_rope(vec: Tensor, idx: RopeIndex, cfg: RopeConfig) -> Tensor:
    if vec.dims != (cfg.head_dim,):
        raise NumericsError(f"apply_rope: dims {vec.dims} do not match head_dim {cfg.head_dim}")
    return rope_rotate(vec.reshape(1, cfg.head_dim), [idx], cfg).reshape(cfg.head_dim)
