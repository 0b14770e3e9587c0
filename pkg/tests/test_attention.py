import numpy as np
import pytest

from core.core_errors import LayoutError
from core.core_numerics import Rng, Tensor, check_gradients, grad, mse
from layers.layer_attention import (
    MmAttentionBlock, interaction_indices, mm_attention_forward, text_image_interaction,
)
from layers.layer_rope import RopeIndex
from layers.layer_tokens import SubjectSpec, TokenKind, layout_template
from numpy_reference import np_joint_attention


def block(seed=0, d=12, heads=2):
    return MmAttentionBlock.from_rng(d, heads, 2, Rng(seed))


def randomize_adapters(blk, seed=9):
    rng = Rng(seed)
    for layer in blk.layers().values():
        if layer.adapter is not None:
            layer.adapter.up.data[...] = rng.normal(layer.adapter.up.dims, scale=0.2)


def test_matches_concat_attention_oracle():
    blk = block()
    rng = Rng(31)
    for _ in range(50):
        n_v, n_t = (int(n) for n in rng.integers(1, 9, 2))
        tv, tt = rng.normal((n_v, 12)), rng.normal((n_t, 12))
        idx = [RopeIndex(*(int(v) for v in rng.integers(-6, 7, 3))) for _ in range(n_v + n_t)]
        out_v, out_t = mm_attention_forward(blk, Tensor(tv), Tensor(tt), idx[:n_v], idx[n_v:])
        ref_v, ref_t = np_joint_attention(blk, tv, tt, idx)
        assert np.max(np.abs(out_v.data - ref_v)) < 1e-9
        assert np.max(np.abs(out_t.data - ref_t)) < 1e-9


def test_attention_weights_are_row_stochastic():
    blk = block()
    tv, tt = Tensor(Rng(1).normal((3, 12))), Tensor(Rng(2).normal((2, 12)))
    zero = [RopeIndex(0, 0, 0)]
    _, _, weights = mm_attention_forward(blk, tv, tt, zero * 3, zero * 2, return_weights=True)
    assert len(weights) == 2
    for w in weights:
        assert w.dims == (5, 5)
        assert np.max(np.abs(w.data.sum(axis=1) - 1.0)) < 1e-12


def test_adapt_targets_qkv_and_ffn_only():
    blk = block().adapt(2, 4.0, Rng(3))
    adapted = sorted(name for name, layer in blk.layers().items() if layer.adapter is not None)
    assert adapted == sorted(f"{s}.{n}" for s in ("text", "video")
                             for n in ("ffn_in", "ffn_out", "k", "q", "v"))
    assert blk.layers()["video.o"].adapter is None
    assert all(p.requires_grad for p in blk.trainable_parameters())
    assert not any(p.requires_grad for p in blk.base_parameters())


# ============================================================================
# text-image interaction
# ============================================================================
@pytest.fixture
def stream():
    return layout_template("A dog chases a ball", [SubjectSpec("dog", (2, 2), (2, 2)),
                                                   SubjectSpec("ball", (2, 2), (2, 2))])


def split_inputs(stream, seed=4):
    rng = Rng(seed)
    n_t = len(stream.positions(TokenKind.TEXT, TokenKind.IMG_SEM))
    n_i = len(stream.positions(TokenKind.IMG_VAE))
    return rng.normal((n_t, 12)), rng.normal((n_i, 12))


def test_interaction_index_split(stream):
    idx_t, idx_i = interaction_indices(stream)
    assert len(idx_t) == stream.text_count + 8
    assert len(idx_i) == 8
    assert {i.t for i in idx_i} == {12, 18}
    with pytest.raises(LayoutError):
        interaction_indices(stream, "bogus")


def test_fresh_adapters_reproduce_base_block(stream):
    base = block()
    adapted = base.clone().adapt(2, 4.0, Rng(5))
    z_T, z_I = split_inputs(stream)
    out_base = text_image_interaction(base, Tensor(z_T), Tensor(z_I), stream)
    out_adapted = text_image_interaction(adapted, Tensor(z_T), Tensor(z_I), stream)
    for a, b in zip(out_base, out_adapted):
        assert np.array_equal(a.data, b.data)


def test_row_counts_checked(stream):
    z_T, z_I = split_inputs(stream)
    with pytest.raises(LayoutError):
        text_image_interaction(block(), Tensor(z_T[:-1]), Tensor(z_I), stream)
    with pytest.raises(LayoutError):
        text_image_interaction(block(), Tensor(z_T), Tensor(z_I[:-1]), stream)


def test_information_flows_both_ways(stream):
    blk = block()
    z_T_np, z_I_np = split_inputs(stream)
    z_T = Tensor(z_T_np, requires_grad=True)
    z_I = Tensor(z_I_np, requires_grad=True)
    probe_t = Rng(6).normal((z_T.dims[0], 12))
    probe_i = Rng(7).normal((z_I.dims[0], 12))

    out_t, out_i = text_image_interaction(blk, z_T, z_I, stream)
    d_image_by_text = grad((out_i * probe_i).sum(), [z_T])[z_T].data
    out_t, out_i = text_image_interaction(blk, z_T, z_I, stream)
    d_text_by_image = grad((out_t * probe_t).sum(), [z_I])[z_I].data
    assert np.abs(d_image_by_text).max() > 1e-6
    assert np.abs(d_text_by_image).max() > 1e-6

    def probe():
        _, out = text_image_interaction(blk, z_T, z_I, stream)
        return (out * probe_i).sum()

    assert check_gradients(probe, [z_T], probes=40, rng=Rng(8)) < 1e-4


def test_interaction_gradients(stream):
    blk = block().adapt(2, 4.0, Rng(10))
    randomize_adapters(blk)
    z_T, z_I = (Tensor(a) for a in split_inputs(stream))
    target_t, target_i = split_inputs(stream, seed=11)

    def loss():
        out_t, out_i = text_image_interaction(blk, z_T, z_I, stream)
        return mse(out_t, target_t) + mse(out_i, target_i)

    assert check_gradients(loss, blk.trainable_parameters(), probes=100, rng=Rng(12)) < 1e-4


def swap_subject_rows(stream, rows):
    """Row order with the tokens of subject 0 and subject 1 exchanged."""
    owners = [stream.entries[r].subject_id for r in rows]
    first = [i for i, s in enumerate(owners) if s == 0]
    second = [i for i, s in enumerate(owners) if s == 1]
    order = list(range(len(rows)))
    for a, b in zip(first, second):
        order[a], order[b] = b, a
    return order


def test_interaction_is_equivariant_to_subject_order():
    stream = layout_template("A dog meets a cat", [SubjectSpec("dog", (2, 2), (2, 2)),
                                                   SubjectSpec("cat", (2, 2), (2, 2))])
    blk = block().adapt(2, 4.0, Rng(13))
    randomize_adapters(blk)
    z_T, z_I = split_inputs(stream)
    idx_t, idx_i = interaction_indices(stream)
    perm_t = swap_subject_rows(stream, stream.positions(TokenKind.TEXT, TokenKind.IMG_SEM))
    perm_i = swap_subject_rows(stream, stream.positions(TokenKind.IMG_VAE))
    assert perm_t != list(range(len(perm_t))) and perm_i != list(range(len(perm_i)))

    out_i, out_t = mm_attention_forward(blk, Tensor(z_I), Tensor(z_T), idx_i, idx_t)
    ref_t, ref_i = text_image_interaction(blk, Tensor(z_T), Tensor(z_I), stream)
    assert np.array_equal(ref_t.data, out_t.data) and np.array_equal(ref_i.data, out_i.data)
    swapped_i, swapped_t = mm_attention_forward(
        blk, Tensor(z_I[perm_i]), Tensor(z_T[perm_t]),
        [idx_i[p] for p in perm_i], [idx_t[p] for p in perm_t],
    )
    assert np.max(np.abs(swapped_i.data - out_i.data[perm_i])) < 1e-10
    assert np.max(np.abs(swapped_t.data - out_t.data[perm_t])) < 1e-10
