"""
Clique-based subject consolidation.

Per-frame subject observations are gated by segmentation score, linked when
their cosine distance is below tau_dist, and grouped by repeatedly taking an
exact maximum clique while it holds more than total_frames / 3 nodes.
"""

import logging
import subprocess
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from core.core_errors import ConsolidationError
from core.core_numerics import Rng
from utilities.util_parser import parse_observation_lines, read_observation_file

logger = logging.getLogger(__name__)

DEFAULT_NODE_CAP = 2000


@dataclass(frozen=True)
class ObservationRecord:
    frame_idx: int
    embedding: np.ndarray
    clip_score: float
    crop_ref: str

    @classmethod
    def ingest(cls, frame_idx: int, embedding, clip_score: float, crop_ref: str) -> "ObservationRecord":
        """Unit-normalize the embedding."""
        vec = np.asarray(embedding, dtype=np.float64).reshape(-1)
        if vec.size == 0 or not np.all(np.isfinite(vec)):
            raise ConsolidationError(f"{crop_ref}: embedding is empty or non-finite")
        norm = float(np.linalg.norm(vec))
        if norm == 0.0:
            raise ConsolidationError(f"{crop_ref}: zero-norm embedding")
        return cls(int(frame_idx), vec / norm, float(clip_score), crop_ref)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ObservationRecord":
        return cls.ingest(data["frame"], data["embedding"], data["clip_score"], data["crop_ref"])

    def to_dict(self) -> Dict[str, Any]:
        return {"clip_score": self.clip_score, "crop_ref": self.crop_ref,
                "embedding": [float(v) for v in self.embedding], "frame": self.frame_idx}

    @property
    def sort_key(self) -> Tuple[int, str]:
        return self.frame_idx, self.crop_ref


@dataclass
class SubjectGraph:
    adjacency: np.ndarray
    nodes: List[ObservationRecord] = field(default_factory=list)
    distance_threshold: Optional[float] = None
    distances: Optional[np.ndarray] = None

    def __post_init__(self):
        adj = np.asarray(self.adjacency, dtype=bool)
        if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
            raise ConsolidationError(f"adjacency must be square, got {adj.shape}")
        if np.any(np.diag(adj)) or not np.array_equal(adj, adj.T):
            raise ConsolidationError("adjacency must be symmetric with no self-edges")
        self.adjacency = adj

    @property
    def size(self) -> int:
        return self.adjacency.shape[0]

    @classmethod
    def from_edges(cls, n: int, edges: Sequence[Tuple[int, int]]) -> "SubjectGraph":
        adj = np.zeros((n, n), dtype=bool)
        for u, v in edges:
            adj[u, v] = adj[v, u] = True
        return cls(adj)

    def neighbor_masks(self) -> List[int]:
        return [sum(1 << int(j) for j in np.flatnonzero(row)) for row in self.adjacency]


@dataclass(frozen=True)
class Clique:
    members: Tuple[int, ...]
    representative: int

    def __len__(self) -> int:
        return len(self.members)


# ============================================================================
# GATING AND GRAPH
# ============================================================================
def validate_segmentation(records: Sequence[ObservationRecord], tau_clip: float) -> List[ObservationRecord]:
    """Keep records whose clip_score strictly exceeds tau_clip; (frame, crop_ref) must be unique."""
    if not 0.0 <= tau_clip <= 1.0:
        raise ConsolidationError(f"tau_clip must lie in [0, 1], got {tau_clip}")
    seen = set()
    for r in records:
        if r.sort_key in seen:
            raise ConsolidationError(f"duplicate observation: frame {r.frame_idx}, crop_ref {r.crop_ref!r}")
        seen.add(r.sort_key)
    kept = [r for r in records if r.clip_score > tau_clip]
    logger.debug(f"Segmentation gate kept {len(kept)}/{len(records)} records")
    return kept


def build_graph(records: Sequence[ObservationRecord], tau_dist: float,
                node_cap: int = DEFAULT_NODE_CAP) -> SubjectGraph:
    """Nodes sorted by (frame_idx, crop_ref); edge iff cosine distance < tau_dist."""
    if len(records) > node_cap:
        raise ConsolidationError(f"{len(records)} observations exceed the node cap of {node_cap}")
    nodes = sorted(records, key=lambda r: r.sort_key)
    if not nodes:
        return SubjectGraph(np.zeros((0, 0), dtype=bool), [], tau_dist, np.zeros((0, 0)))

    dims = {r.embedding.shape[0] for r in nodes}
    if len(dims) != 1:
        raise ConsolidationError(f"embeddings have mixed dimensionality {sorted(dims)}")
    matrix = np.stack([r.embedding for r in nodes])
    if not np.all(np.isfinite(matrix)):
        raise ConsolidationError("non-finite embedding in graph input")
    distances = 1.0 - matrix @ matrix.T
    adjacency = distances < tau_dist
    np.fill_diagonal(adjacency, False)
    return SubjectGraph(adjacency, nodes, tau_dist, distances)


# ============================================================================
# MAXIMUM CLIQUE
# ============================================================================
def _popcount(mask: int) -> int:
    return bin(mask).count("1")


def _bits(mask: int) -> List[int]:
    out = []
    while mask:
        low = mask & -mask
        out.append(low.bit_length() - 1)
        mask ^= low
    return out


def _pivot(P: int, X: int, nbr: List[int]) -> int:
    best, best_count = -1, -1
    for u in _bits(P | X):
        count = _popcount(P & nbr[u])
        if count > best_count:
            best, best_count = u, count
    return best


def _max_clique_nodes(nbr: List[int], allowed: int) -> Tuple[int, ...]:
    """
    Bron-Kerbosch with pivoting over bitsets and a size bound, run with an
    explicit stack. Among maximum cliques the lexicographically smallest
    sorted member tuple wins, so branches that can only tie are still visited.
    """
    best: Tuple[int, ...] = ()
    u = _pivot(allowed, 0, nbr)
    stack = [[(), allowed, 0, allowed & ~nbr[u]]]
    while stack:
        frame = stack[-1]
        R, P, X, candidates = frame
        if candidates == 0 or len(R) + _popcount(P) < len(best):
            stack.pop()
            continue
        low = candidates & -candidates
        v = low.bit_length() - 1
        frame[1], frame[2], frame[3] = P & ~low, X | low, candidates & ~low

        grown = R + (v,)
        P_next, X_next = P & nbr[v], X & nbr[v]
        if P_next == 0:
            if X_next == 0:
                key = tuple(sorted(grown))
                if len(key) > len(best) or (len(key) == len(best) and key < best):
                    best = key
            continue
        if len(grown) + _popcount(P_next) < len(best):
            continue
        u = _pivot(P_next, X_next, nbr)
        stack.append([grown, P_next, X_next, P_next & ~nbr[u]])
    return best


def _medoid(members: Tuple[int, ...], graph: SubjectGraph) -> int:
    if graph.distances is None or len(members) == 1:
        return members[0]
    idx = np.asarray(members)
    totals = graph.distances[np.ix_(idx, idx)].sum(axis=1)
    return int(idx[int(np.argmin(totals))])


def max_clique(graph: SubjectGraph, node_cap: int = DEFAULT_NODE_CAP) -> Clique:
    if graph.size == 0:
        raise ConsolidationError("max_clique needs a non-empty graph")
    if graph.size > node_cap:
        raise ConsolidationError(f"{graph.size} nodes exceed the node cap of {node_cap}")
    members = _max_clique_nodes(graph.neighbor_masks(), (1 << graph.size) - 1)
    return Clique(members, _medoid(members, graph))


def consolidate(graph: SubjectGraph, total_frames: int,
                node_cap: int = DEFAULT_NODE_CAP) -> List[Clique]:
    """Extract maximum cliques while |clique| > total_frames / 3, removing their nodes."""
    if total_frames < 1:
        raise ConsolidationError(f"total_frames must be >= 1, got {total_frames}")
    if graph.size > node_cap:
        raise ConsolidationError(f"{graph.size} nodes exceed the node cap of {node_cap}")
    nbr = graph.neighbor_masks()
    remaining = (1 << graph.size) - 1
    cliques: List[Clique] = []
    while remaining:
        members = _max_clique_nodes(nbr, remaining)
        if 3 * len(members) <= total_frames:
            logger.info(f"Stopping: largest remaining clique has {len(members)} nodes "
                        f"(needs more than {total_frames / 3:.2f})")
            break
        cliques.append(Clique(members, _medoid(members, graph)))
        for m in members:
            remaining &= ~(1 << m)
    logger.info(f"Consolidated {len(cliques)} subject(s) from {graph.size} observations")
    return cliques


# ============================================================================
# SUBJECT PROVIDERS
# ============================================================================
class SubjectProvider(ABC):
    """Source of per-frame subject observations (detection + segmentation + features)."""

    @abstractmethod
    def observations(self) -> List[ObservationRecord]:
        ...


class FileSubjectProvider(SubjectProvider):
    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)

    def observations(self) -> List[ObservationRecord]:
        return [ObservationRecord.from_dict(d) for d in read_observation_file(self.path)]


class SubprocessSubjectProvider(SubjectProvider):
    """Runs an external command and reads observation JSONL from its stdout."""

    def __init__(self, command: Sequence[str], timeout: float = 600.0):
        if not command:
            raise ConsolidationError("subprocess provider needs a command")
        self.command = list(command)
        self.timeout = timeout

    def observations(self) -> List[ObservationRecord]:
        try:
            result = subprocess.run(self.command, capture_output=True, text=True, timeout=self.timeout)
        except (OSError, subprocess.TimeoutExpired) as e:
            raise ConsolidationError(f"provider command failed to run: {e}") from None
        if result.returncode != 0:
            raise ConsolidationError(f"provider command exited with {result.returncode}: "
                                     f"{result.stderr.strip()[:200]}")
        lines = result.stdout.splitlines()
        return [ObservationRecord.from_dict(d) for d in parse_observation_lines(lines, self.command[0])]


class MockSubjectProvider(SubjectProvider):
    """
    Deterministic observations: `subjects` stable identities seen in most
    frames (small jitter around orthogonal directions), one transient
    distractor per `distractor_every` frames, and a low-score segmentation
    in every frame.
    """

    def __init__(self, seed: int, frames: int = 12, subjects: int = 2, dim: int = 8,
                 jitter: float = 0.03, distractor_every: int = 4):
        if subjects > dim:
            raise ConsolidationError(f"{subjects} subjects need at least {subjects} embedding dims")
        self.seed, self.frames, self.subjects, self.dim = seed, frames, subjects, dim
        self.jitter, self.distractor_every = jitter, distractor_every

    def observations(self) -> List[ObservationRecord]:
        rng = Rng(self.seed)
        basis, _ = np.linalg.qr(rng.normal((self.dim, self.dim)))
        records = []
        for f in range(self.frames):
            for k in range(self.subjects):
                # subject k is missing from one frame in every (k + 5)
                if f % (k + 5) == k + 4:
                    continue
                vec = basis[:, k] + rng.normal(self.dim, scale=self.jitter)
                records.append(ObservationRecord.ingest(f, vec, 0.9, f"frame{f:03d}_subject{k}"))
            if self.distractor_every and f % self.distractor_every == 0:
                records.append(ObservationRecord.ingest(f, rng.normal(self.dim), 0.6, f"frame{f:03d}_distractor"))
            records.append(ObservationRecord.ingest(f, rng.normal(self.dim), 0.05, f"frame{f:03d}_fragment"))
        return records


# ============================================================================
# END TO END
# ============================================================================
def consolidation_manifest(graph: SubjectGraph, cliques: Sequence[Clique], total_frames: int,
                           tau_dist: float, tau_clip: float, records_in: int) -> Dict[str, Any]:
    entries = []
    for clique in cliques:
        nodes = [graph.nodes[i] for i in clique.members]
        entries.append({
            "frames": [n.frame_idx for n in nodes],
            "members": [n.crop_ref for n in nodes],
            "representative": graph.nodes[clique.representative].crop_ref,
            "size": len(clique),
        })
    return {
        "cliques": entries,
        "records_in": records_in,
        "records_valid": graph.size,
        "tau_clip": tau_clip,
        "tau_dist": tau_dist,
        "total_frames": total_frames,
    }


def run_consolidation(records: Sequence[ObservationRecord], tau_dist: float, tau_clip: float,
                      total_frames: Optional[int] = None,
                      node_cap: int = DEFAULT_NODE_CAP) -> Dict[str, Any]:
    """Gate, build, consolidate and describe. total_frames defaults to the distinct frames seen."""
    if total_frames is None:
        total_frames = len({r.frame_idx for r in records}) or 1
    valid = validate_segmentation(records, tau_clip)
    graph = build_graph(valid, tau_dist, node_cap)
    cliques = consolidate(graph, total_frames, node_cap) if graph.size else []
    return consolidation_manifest(graph, cliques, total_frames, tau_dist, tau_clip, len(records))
