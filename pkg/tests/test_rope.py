import numpy as np
import pytest

from core.core_errors import NumericsError
from core.core_numerics import Rng, Tensor
from layers.layer_rope import (
    RopeConfig, RopeIndex, apply_rope, assign_image_sem_indices, assign_image_vae_indices,
    assign_sequential, assign_spatial_indices, assign_stream, assign_text_indices, assign_video_indices,
    default_partition, rope_rotate,
)
from layers.layer_tokens import SubjectSpec, TokenKind, layout_template
from utilities.util_parser import format_rope_table, parse_rope_table


def enumerate_indices(stream):
    """Token-by-token walk of the index rules, independent of assign_stream's segment logic."""
    out, last_text, next_text = [], 0, 1
    anchors, counters = {}, {}
    for entry in stream.entries:
        k = entry.subject_id
        if entry.kind is TokenKind.TEXT:
            out.append((next_text, 0, 0))
            last_text, next_text = next_text, next_text + 1
            continue
        spec = stream.subjects[k]
        w, h = spec.sem_grid if entry.kind is TokenKind.IMG_SEM else spec.vae_grid
        i = counters.get((entry.kind, k), 0)
        counters[(entry.kind, k)] = i + 1
        if entry.kind is TokenKind.IMG_SEM and k not in anchors:
            anchors[k] = last_text
            next_text = last_text + 3
        offset = 1 if entry.kind is TokenKind.IMG_SEM else 2
        out.append((anchors[k] + offset, i // h - w // 2, i % h - h // 2))
    return out


@pytest.mark.parametrize("head_dim, expected", [(6, (2, 2, 2)), (8, (4, 2, 2)), (10, (4, 4, 2)), (12, (4, 4, 4))])
def test_default_partition(head_dim, expected):
    assert default_partition(head_dim) == expected
    assert RopeConfig(head_dim).partition == expected


@pytest.mark.parametrize("kwargs", [
    {"head_dim": 7},
    {"head_dim": 6, "partition": (2, 2, 4)},
    {"head_dim": 8, "partition": (3, 3, 2)},
    {"head_dim": 6, "theta": 0.0},
])
def test_invalid_rope_config(kwargs):
    with pytest.raises(NumericsError):
        RopeConfig(**kwargs)


def test_index_primitives():
    assert assign_text_indices(4, 3) == [(4, 0, 0), (5, 0, 0), (6, 0, 0)]
    assert assign_text_indices(1, 0) == []
    assert assign_image_sem_indices(10, 2, 2) == [(11, -1, -1), (11, -1, 0), (11, 0, -1), (11, 0, 0)]
    assert assign_image_vae_indices(10, 2, 2)[0] == (12, -1, -1)
    assert assign_image_sem_indices(3, 3, 1) == [(4, -1, 0), (4, 0, 0), (4, 1, 0)]
    assert assign_spatial_indices(2, 2)[3] == (0, 0, 0)


def test_two_subject_golden_table(golden_dir):
    stream = layout_template("A man is playing guitar",
                             [SubjectSpec("man", (2, 2), (2, 2)), SubjectSpec("guitar", (2, 2), (2, 2))])
    indices = assign_stream(stream)
    rows = [(e.seq_pos, e.kind.value, e.subject_id, *idx) for e, idx in zip(stream.entries, indices)]
    golden = (golden_dir / "rope_example.tsv").read_text()
    assert format_rope_table(rows) == golden
    assert parse_rope_table(golden) == [tuple(r) for r in rows]


@pytest.mark.parametrize("words, sem, vae", [
    (["man", "guitar"], (2, 2), (2, 2)),
    (["dog"], (3, 2), (1, 3)),
    (["man", "woman", "car"], (2, 3), (3, 3)),
])
def test_matches_enumeration_oracle(words, sem, vae):
    stream = layout_template("Three friends walk along the beach", [SubjectSpec(w, sem, vae) for w in words])
    assert [tuple(i) for i in assign_stream(stream)] == enumerate_indices(stream)


def test_sem_and_vae_share_spatial_layout():
    spec = SubjectSpec("cat", (3, 3), (3, 3))
    stream = layout_template("A cat sleeps", [spec])
    indices = assign_stream(stream)
    sem = [indices[i] for i in stream.positions(TokenKind.IMG_SEM)]
    vae = [indices[i] for i in stream.positions(TokenKind.IMG_VAE)]
    assert [(i.y, i.x) for i in sem] == [(i.y, i.x) for i in vae]
    assert {i.t for i in vae} == {sem[0].t + 1}


def test_next_subject_text_resumes_after_vae_slot():
    stream = layout_template("A man is playing guitar",
                             [SubjectSpec("man", (2, 2), (2, 2)), SubjectSpec("guitar", (2, 2), (2, 2))])
    indices = assign_stream(stream)
    first_vae_t = indices[stream.positions(TokenKind.IMG_VAE)[0]].t
    second_text = indices[14]
    assert second_text == (first_vae_t + 1, 0, 0)


def test_sequential_mode():
    stream = layout_template("A dog runs", [SubjectSpec("dog", (2, 2), (2, 2))])
    assert assign_sequential(stream) == [(p, 0, 0) for p in range(1, len(stream) + 1)]


def test_video_indices_centered():
    indices = assign_video_indices(2, 2, 3)
    assert indices[0] == (0, -1, -1)
    assert indices[5] == (0, 0, 1)
    assert indices[6] == (1, -1, -1)
    assert assign_video_indices(1, 1, 1, t_offset=4) == [(4, 0, 0)]


def test_origin_is_identity():
    cfg = RopeConfig(6)
    vec = Tensor(Rng(1).normal(6))
    assert np.array_equal(apply_rope(vec, RopeIndex(0, 0, 0), cfg).data, vec.data)


@pytest.mark.parametrize("axis", [0, 1, 2])
def test_relative_position_law(axis):
    cfg = RopeConfig(12)
    rng = Rng(100 + axis)
    for _ in range(50):
        q, k = Tensor(rng.normal(12)), Tensor(rng.normal(12))
        p = rng.integers(-20, 20, 3).tolist()
        r = rng.integers(-20, 20, 3).tolist()
        offset = [0, 0, 0]
        offset[axis] = int(rng.integers(-50, 50, 1)[0])
        shift = lambda v: RopeIndex(*(a + b for a, b in zip(v, offset)))  # noqa: E731

        before = apply_rope(q, RopeIndex(*p), cfg).data @ apply_rope(k, RopeIndex(*r), cfg).data
        after = apply_rope(q, shift(p), cfg).data @ apply_rope(k, shift(r), cfg).data
        assert abs(before - after) < 1e-9


def test_axes_rotate_disjoint_slices():
    cfg = RopeConfig(6)
    vec = Tensor(Rng(2).normal(6))
    moved = apply_rope(vec, RopeIndex(0, 3, 0), cfg).data
    assert np.array_equal(moved[:2], vec.data[:2])
    assert np.array_equal(moved[4:], vec.data[4:])
    assert not np.allclose(moved[2:4], vec.data[2:4])


def test_rotate_dims_checked():
    with pytest.raises(NumericsError):
        rope_rotate(Tensor(np.zeros((2, 6))), [RopeIndex(0, 0, 0)], RopeConfig(6))
