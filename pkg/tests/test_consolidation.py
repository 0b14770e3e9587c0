import json
import math
import sys
from itertools import combinations

import networkx as nx
import numpy as np
import pytest

from core.core_errors import ConsolidationError
from core.core_numerics import Rng
from services.service_consolidation import (
    FileSubjectProvider, MockSubjectProvider, ObservationRecord, SubjectGraph, SubprocessSubjectProvider,
    build_graph, consolidate, max_clique, run_consolidation, validate_segmentation,
)


def random_graph(rng, n, p):
    edges = [(u, v) for u, v in combinations(range(n), 2) if rng.uniform(1)[0] < p]
    return SubjectGraph.from_edges(n, edges), edges


def exhaustive_max_clique(n, edges):
    """Largest clique, lexicographically smallest among ties, by subset enumeration."""
    adjacent = set(edges) | {(v, u) for u, v in edges}
    for size in range(n, 0, -1):
        for combo in combinations(range(n), size):
            if all((u, v) in adjacent for u, v in combinations(combo, 2)):
                return combo
    return ()


def disjoint_cliques(*sizes):
    edges, start = [], 0
    for size in sizes:
        edges += list(combinations(range(start, start + size), 2))
        start += size
    return SubjectGraph.from_edges(start, edges)


def record(frame, vec, score=0.9, ref=None):
    return ObservationRecord.ingest(frame, vec, score, ref or f"f{frame}")


# ============================================================================
# MAXIMUM CLIQUE
# ============================================================================
def test_max_clique_matches_exhaustive_search():
    rng = Rng(2024)
    for _ in range(200):
        n = int(rng.integers(1, 16, 1)[0])
        p = 0.2 + 0.7 * float(rng.uniform(1)[0])
        graph, edges = random_graph(rng, n, p)
        assert max_clique(graph).members == exhaustive_max_clique(n, edges)


def test_max_clique_size_matches_networkx():
    rng = Rng(77)
    for _ in range(50):
        n = int(rng.integers(2, 16, 1)[0])
        graph, edges = random_graph(rng, n, 0.5)
        g = nx.Graph()
        g.add_nodes_from(range(n))
        g.add_edges_from(edges)
        cliques = [tuple(sorted(c)) for c in nx.find_cliques(g)]
        best = max(len(c) for c in cliques)
        found = max_clique(graph).members
        assert len(found) == best
        assert found in cliques


def test_ties_break_to_lowest_members():
    graph = disjoint_cliques(3, 3)
    assert max_clique(graph).members == (0, 1, 2)


def test_edgeless_graph():
    assert max_clique(SubjectGraph.from_edges(4, [])).members == (0,)
    with pytest.raises(ConsolidationError):
        max_clique(SubjectGraph.from_edges(0, []))


def test_node_cap():
    with pytest.raises(ConsolidationError, match="node cap"):
        max_clique(SubjectGraph.from_edges(5, []), node_cap=4)


def test_adjacency_validated():
    with pytest.raises(ConsolidationError):
        SubjectGraph(np.array([[True, False], [False, False]]))
    with pytest.raises(ConsolidationError):
        SubjectGraph(np.array([[False, True], [False, False]]))


# ============================================================================
# CONSOLIDATION
# ============================================================================
@pytest.mark.parametrize("total_frames, expected_sizes", [
    (9, [4]),        # 3 is not > 3
    (10, [4]),       # floor(10/3) = 3 rejected, 4 accepted
    (12, []),        # 4 is not > 4
    (8, [4, 3]),     # 3 > 2.67
])
def test_strict_one_third_rule(total_frames, expected_sizes):
    cliques = consolidate(disjoint_cliques(4, 3), total_frames)
    assert [len(c) for c in cliques] == expected_sizes


def test_consolidation_stops_at_first_small_clique():
    cliques = consolidate(disjoint_cliques(5, 2, 4), 9)
    assert [c.members for c in cliques] == [(0, 1, 2, 3, 4), (7, 8, 9, 10)]


def test_consolidate_needs_frames():
    with pytest.raises(ConsolidationError):
        consolidate(disjoint_cliques(2), 0)


def test_medoid_representative():
    angles = [-0.2, 0.0, 0.2]
    records = [record(i, [math.cos(a), math.sin(a)], ref=f"r{i}") for i, a in enumerate(angles)]
    graph = build_graph(records, 0.1)
    (clique,) = consolidate(graph, 2)
    assert clique.members == (0, 1, 2)
    assert graph.nodes[clique.representative].crop_ref == "r1"


def test_segmentation_gate_is_strict():
    records = [record(0, [1, 0], 0.25, "a"), record(1, [1, 0], 0.26, "b")]
    assert [r.crop_ref for r in validate_segmentation(records, 0.25)] == ["b"]
    with pytest.raises(ConsolidationError):
        validate_segmentation(records, 1.5)


def test_duplicate_observations_rejected():
    records = [record(3, [1, 0], ref="crop"), record(3, [0, 1], ref="crop")]
    with pytest.raises(ConsolidationError, match="duplicate"):
        validate_segmentation(records, 0.25)
    with pytest.raises(ConsolidationError, match="duplicate"):
        run_consolidation(records, 0.3, 0.25)
    # the same crop_ref in another frame is a different observation
    assert len(validate_segmentation([record(3, [1, 0], ref="crop"), record(4, [1, 0], ref="crop")], 0.25)) == 2


def test_file_provider_rejects_non_utf8(tmp_path):
    path = tmp_path / "obs.jsonl"
    path.write_bytes(b"\xff\xfe\n")
    with pytest.raises(ConsolidationError, match="cannot read"):
        FileSubjectProvider(path).observations()


def test_graph_edges_use_cosine_distance():
    records = [record(0, [1, 0]), record(1, [1, 0.1]), record(2, [0, 1])]
    graph = build_graph(records, 0.3)
    assert graph.adjacency.tolist() == [[False, True, False], [True, False, False], [False, False, False]]


def test_graph_input_errors():
    with pytest.raises(ConsolidationError, match="mixed"):
        build_graph([record(0, [1, 0]), record(1, [1, 0, 0])], 0.3)
    with pytest.raises(ConsolidationError, match="node cap"):
        build_graph([record(i, [1, 0]) for i in range(3)], 0.3, node_cap=2)
    with pytest.raises(ConsolidationError):
        record(0, [0.0, 0.0])
    with pytest.raises(ConsolidationError):
        record(0, [1.0, float("nan")])


def test_embeddings_normalized_on_ingest():
    assert np.allclose(record(0, [3.0, 4.0]).embedding, [0.6, 0.8])


# ============================================================================
# END TO END
# ============================================================================
def test_sample_matches_golden(samples_dir, golden_dir):
    records = FileSubjectProvider(samples_dir / "observations_sample.jsonl").observations()
    manifest = run_consolidation(records, tau_dist=0.3, tau_clip=0.25)
    assert manifest == json.loads((golden_dir / "consolidation_sample.json").read_text())


def test_record_order_does_not_matter(samples_dir):
    records = FileSubjectProvider(samples_dir / "observations_sample.jsonl").observations()
    expected = run_consolidation(records, 0.3, 0.25)
    for seed in range(5):
        shuffled = [records[int(i)] for i in Rng(seed).permutation(len(records))]
        assert run_consolidation(shuffled, 0.3, 0.25) == expected


def test_no_valid_records():
    manifest = run_consolidation([record(0, [1, 0], 0.1)], 0.3, 0.25)
    assert manifest["cliques"] == [] and manifest["records_valid"] == 0


def test_mock_provider_recovers_subjects():
    records = MockSubjectProvider(seed=5).observations()
    manifest = run_consolidation(records, 0.3, 0.25)
    assert manifest["total_frames"] == 12
    assert len(manifest["cliques"]) == 2
    for clique in manifest["cliques"]:
        assert clique["size"] >= 10
        assert "subject" in clique["representative"]
    assert MockSubjectProvider(seed=5).observations()[0].crop_ref == records[0].crop_ref


def test_subprocess_provider(samples_dir):
    sample = samples_dir / "observations_sample.jsonl"
    script = f"import sys; sys.stdout.write(open({str(sample)!r}).read())"
    records = SubprocessSubjectProvider([sys.executable, "-c", script]).observations()
    assert len(records) == 16


def test_subprocess_provider_failure():
    provider = SubprocessSubjectProvider([sys.executable, "-c", "import sys; sys.exit(3)"])
    with pytest.raises(ConsolidationError, match="exited with 3"):
        provider.observations()
