"""
Evaluation metrics on caller-provided feature vectors.
- identity_similarity: mean cosine between a reference and every frame
- temporal_consistency: mean cosine over adjacent pairs and first-frame pairs
- frechet_distance: distance between Gaussian fits of two feature populations
- text_alignment: mean cosine between a text feature and every frame
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict, Optional

import numpy as np

from core.core_errors import MetricsError

logger = logging.getLogger(__name__)

CLAMP_WARN_LEVEL = 1e-8


@dataclass
class FeatureSet:
    vectors: np.ndarray
    label: str = ""

    def __post_init__(self):
        vectors = np.asarray(self.vectors, dtype=np.float64)
        if vectors.ndim == 1:
            vectors = vectors.reshape(1, -1)
        if vectors.ndim != 2 or vectors.shape[0] < 1 or vectors.shape[1] < 1:
            raise MetricsError(f"feature set {self.label!r} needs >= 1 vector of uniform length, got {vectors.shape}")
        if not np.all(np.isfinite(vectors)):
            raise MetricsError(f"feature set {self.label!r} holds non-finite values")
        self.vectors = vectors

    def __len__(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


def _unit_rows(vectors: np.ndarray, what: str) -> np.ndarray:
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise MetricsError(f"{what} contains a zero-norm vector")
    return vectors / norms


def _row_cosines(x: np.ndarray, y: np.ndarray, what: str) -> np.ndarray:
    """Cosine of each row pair; identical rows score exactly 1."""
    cos = np.sum(_unit_rows(x, what) * _unit_rows(y, what), axis=1)
    return np.where(np.all(x == y, axis=1), 1.0, np.clip(cos, -1.0, 1.0))


def identity_similarity(ref, frames: FeatureSet) -> float:
    ref = np.asarray(ref, dtype=np.float64).reshape(-1)
    if ref.shape[0] != frames.dim:
        raise MetricsError(f"reference has {ref.shape[0]} dims, frames have {frames.dim}")
    refs = np.broadcast_to(ref, frames.vectors.shape)
    return float(np.mean(_row_cosines(refs, frames.vectors, "identity inputs")))


def text_alignment(text_vec, frames: FeatureSet) -> float:
    return identity_similarity(text_vec, frames)


def temporal_consistency(frames: FeatureSet) -> float:
    if len(frames) < 2:
        raise MetricsError("temporal consistency needs at least 2 frames")
    v = frames.vectors
    adjacent = _row_cosines(v[:-1], v[1:], "frames")
    first = _row_cosines(np.broadcast_to(v[0], v[1:].shape), v[1:], "frames")
    return float(np.mean(np.concatenate([adjacent, first])))


def _psd_sqrt(matrix: np.ndarray, what: str) -> np.ndarray:
    values, vectors = np.linalg.eigh((matrix + matrix.T) / 2.0)
    values = _clamp(values, what)
    return (vectors * np.sqrt(values)) @ vectors.T


def _clamp(values: np.ndarray, what: str) -> np.ndarray:
    lowest = float(values.min()) if values.size else 0.0
    if lowest < -CLAMP_WARN_LEVEL:
        logger.warning(f"{what}: clamped negative eigenvalue {lowest:.3e} to 0")
    return np.clip(values, 0.0, None)


def frechet_distance(a: FeatureSet, b: FeatureSet) -> float:
    """|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)), unbiased covariances."""
    if a.dim != b.dim:
        raise MetricsError(f"feature dims differ: {a.dim} vs {b.dim}")
    if len(a) < 2 or len(b) < 2:
        raise MetricsError("frechet distance needs at least 2 vectors per set")
    diff = a.vectors.mean(axis=0) - b.vectors.mean(axis=0)
    cov_a = np.atleast_2d(np.cov(a.vectors, rowvar=False, ddof=1))
    cov_b = np.atleast_2d(np.cov(b.vectors, rowvar=False, ddof=1))

    root_a = _psd_sqrt(cov_a, "covariance square root")
    middle = root_a @ cov_b @ root_a
    values = _clamp(np.linalg.eigvalsh((middle + middle.T) / 2.0), "frechet cross term")
    distance = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.sum(np.sqrt(values)))
    return max(distance, 0.0)


def metrics_report(frames: FeatureSet, reference=None, other: Optional[FeatureSet] = None,
                   text=None) -> Dict[str, Any]:
    """Every metric the inputs allow, keyed by name."""
    report: Dict[str, Any] = {"frames": len(frames), "dim": frames.dim}
    if reference is not None:
        report["identity_similarity"] = identity_similarity(reference, frames)
    if len(frames) >= 2:
        report["temporal_consistency"] = temporal_consistency(frames)
    if other is not None:
        report["frechet_distance"] = frechet_distance(frames, other)
    if text is not None:
        report["text_alignment"] = text_alignment(text, frames)
    return report
