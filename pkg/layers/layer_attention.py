"""
Joint two-stream attention (MM-DiT style) and the text-image interaction module.

Each stream has its own q/k/v/o projections and FFN. Both streams are
RMS-normalized, projected, rotated, concatenated on the token axis and run
through one bidirectional softmax attention; outputs are split back per
stream and pass residual -> FFN -> residual.
"""

import copy
import logging
import math
from dataclasses import dataclass, fields
from typing import Dict, List, Optional, Sequence, Tuple

from core.core_errors import LayoutError, NumericsError
from core.core_numerics import Rng, Tensor, concat, gelu, rms_norm, softmax_rows
from layers.layer_lora import ReparamLinear
from layers.layer_rope import RopeConfig, RopeIndex, assign_sequential, assign_stream, rope_rotate
from layers.layer_tokens import TokenKind, TokenStream

logger = logging.getLogger(__name__)

ADAPTED_SUBLAYERS = ("q", "k", "v", "ffn_in", "ffn_out")


@dataclass
class StreamProjections:
    q: ReparamLinear
    k: ReparamLinear
    v: ReparamLinear
    o: ReparamLinear
    ffn_in: ReparamLinear
    ffn_out: ReparamLinear

    @classmethod
    def from_rng(cls, d_model: int, ffn_mult: int, rng: Rng) -> "StreamProjections":
        hidden = d_model * ffn_mult
        return cls(
            q=ReparamLinear.from_rng(d_model, d_model, rng),
            k=ReparamLinear.from_rng(d_model, d_model, rng),
            v=ReparamLinear.from_rng(d_model, d_model, rng),
            o=ReparamLinear.from_rng(d_model, d_model, rng),
            ffn_in=ReparamLinear.from_rng(d_model, hidden, rng),
            ffn_out=ReparamLinear.from_rng(hidden, d_model, rng),
        )

    def layers(self) -> Dict[str, ReparamLinear]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def ffn(self, x: Tensor) -> Tensor:
        return self.ffn_out(gelu(self.ffn_in(rms_norm(x))))


class MmAttentionBlock:
    """Per-stream projections for V (image/video) and T (text) sharing heads and head_dim."""

    def __init__(self, video: StreamProjections, text: StreamProjections, heads: int,
                 rope: Optional[RopeConfig] = None):
        d_model = video.q.d_in
        if d_model % heads:
            raise NumericsError(f"d_model {d_model} is not divisible by {heads} heads")
        for name, layer in {**video.layers(), **text.layers()}.items():
            if name in ("q", "k", "v", "o") and (layer.d_in, layer.d_out) != (d_model, d_model):
                raise NumericsError(f"projection {name} is {layer.d_out}x{layer.d_in}, expected {d_model}x{d_model}")
        if rope is not None and rope.head_dim != d_model // heads:
            raise NumericsError(f"rope head_dim {rope.head_dim} != {d_model // heads}")
        self.video = video
        self.text = text
        self.heads = heads
        self.rope = rope

    @classmethod
    def from_rng(cls, d_model: int, heads: int, ffn_mult: int, rng: Rng,
                 rope_theta: float = 10000.0) -> "MmAttentionBlock":
        video = StreamProjections.from_rng(d_model, ffn_mult, rng)
        text = StreamProjections.from_rng(d_model, ffn_mult, rng)
        return cls(video, text, heads, RopeConfig(d_model // heads, theta=rope_theta))

    @property
    def d_model(self) -> int:
        return self.video.q.d_in

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads

    def layers(self) -> Dict[str, ReparamLinear]:
        named = {f"video.{k}": v for k, v in self.video.layers().items()}
        named.update({f"text.{k}": v for k, v in self.text.layers().items()})
        return named

    def adapt(self, rank: int, alpha: float, rng: Rng) -> "MmAttentionBlock":
        """Attach LoRA adapters to q/k/v and FFN of both streams."""
        for stream in (self.video, self.text):
            for name in ADAPTED_SUBLAYERS:
                getattr(stream, name).with_adapter(rank, alpha, rng)
        return self

    def clone(self) -> "MmAttentionBlock":
        return copy.deepcopy(self)

    def base_parameters(self) -> List[Tensor]:
        return [p for layer in self.layers().values() for p in layer.base_parameters()]

    def trainable_parameters(self) -> List[Tensor]:
        return [p for layer in self.layers().values() for p in layer.trainable_parameters()]


# ============================================================================
# ATTENTION
# ============================================================================
def multihead_attention(q: Tensor, k: Tensor, v: Tensor, heads: int,
                        rope: Optional[RopeConfig] = None,
                        q_indices: Optional[Sequence[RopeIndex]] = None,
                        k_indices: Optional[Sequence[RopeIndex]] = None,
                        return_weights: bool = False):
    """Scaled dot-product attention, head by head over column slices, no mask."""
    d = q.dims[1]
    if k.dims[1] != d or v.dims[1] != d or k.dims[0] != v.dims[0]:
        raise NumericsError(f"attention: q {q.dims}, k {k.dims}, v {v.dims} do not match")
    head_dim = d // heads
    scale = 1.0 / math.sqrt(head_dim)
    outputs, weights = [], []
    for h in range(heads):
        cols = slice(h * head_dim, (h + 1) * head_dim)
        qh, kh, vh = q[:, cols], k[:, cols], v[:, cols]
        if rope is not None:
            qh = rope_rotate(qh, q_indices, rope)
            kh = rope_rotate(kh, k_indices, rope)
        w = softmax_rows(qh @ kh.T * scale)
        outputs.append(w @ vh)
        weights.append(w)
    out = concat(outputs, axis=1)
    return (out, weights) if return_weights else out


def mm_attention_forward(block: MmAttentionBlock, tokens_v: Tensor, tokens_t: Tensor,
                         rope_v: Optional[Sequence[RopeIndex]] = None,
                         rope_t: Optional[Sequence[RopeIndex]] = None,
                         return_weights: bool = False):
    """Joint attention over [V ; T]; returns (out_v, out_t)."""
    n_v, n_t = tokens_v.dims[0], tokens_t.dims[0]
    for name, tokens in (("video", tokens_v), ("text", tokens_t)):
        if tokens.data.ndim != 2 or tokens.dims[1] != block.d_model:
            raise NumericsError(f"mm_attention: {name} tokens dims {tokens.dims}, expected (n, {block.d_model})")
    indices = None
    if block.rope is not None:
        if rope_v is None or rope_t is None or len(rope_v) != n_v or len(rope_t) != n_t:
            raise NumericsError(f"mm_attention: rope index counts do not match {n_v}/{n_t} tokens")
        indices = list(rope_v) + list(rope_t)

    hv, ht = rms_norm(tokens_v), rms_norm(tokens_t)
    V, T = block.video, block.text
    q = concat([V.q(hv), T.q(ht)])
    k = concat([V.k(hv), T.k(ht)])
    v = concat([V.v(hv), T.v(ht)])
    attended = multihead_attention(q, k, v, block.heads, block.rope, indices, indices, return_weights)
    if return_weights:
        attended, weights = attended

    z_v = tokens_v + V.o(attended[:n_v])
    z_t = tokens_t + T.o(attended[n_v:])
    out_v = z_v + V.ffn(z_v)
    out_t = z_t + T.ffn(z_t)
    return (out_v, out_t, weights) if return_weights else (out_v, out_t)


# ============================================================================
# TEXT-IMAGE INTERACTION
# ============================================================================
def interaction_indices(stream: TokenStream,
                        rope_mode: str = "interaction_3d") -> Tuple[List[RopeIndex], List[RopeIndex]]:
    """(indices for TEXT + IMG_SEM rows, indices for IMG_VAE rows) in stream order."""
    if rope_mode == "interaction_3d":
        indices = assign_stream(stream)
    elif rope_mode == "sequential":
        indices = assign_sequential(stream)
    else:
        raise LayoutError(f"unknown rope mode {rope_mode!r}")
    text_rows = stream.positions(TokenKind.TEXT, TokenKind.IMG_SEM)
    image_rows = stream.positions(TokenKind.IMG_VAE)
    return [indices[i] for i in text_rows], [indices[i] for i in image_rows]


def text_image_interaction(block: MmAttentionBlock, z_T: Tensor, z_I: Tensor, stream: TokenStream,
                           rope_mode: str = "interaction_3d") -> Tuple[Tensor, Tensor]:
    """
    z_T holds the TEXT and IMG_SEM rows of `stream` in order; z_I holds the
    IMG_VAE rows. Returns (identity-enhanced z_T, interaction-enhanced z_I).
    """
    idx_t, idx_i = interaction_indices(stream, rope_mode)
    if z_T.dims[0] != len(idx_t):
        raise LayoutError(f"z_T has {z_T.dims[0]} rows, layout has {len(idx_t)} text/semantic tokens")
    if z_I.dims[0] != len(idx_i):
        raise LayoutError(f"z_I has {z_I.dims[0]} rows, layout has {len(idx_i)} image tokens")
    out_i, out_t = mm_attention_forward(block, z_I, z_T, idx_i, idx_t)
    return out_t, out_i
