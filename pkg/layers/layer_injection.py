"""
Identity injection into video tokens.

ATTENTION_INHERITED:  z_hat = z + FC(FFN(CrossAttn(Wq(z), Wk(z_I), Wv(z_I))))
    Wq/Wk/Wv and the FFN start as copies of the base block's video-stream
    weights plus LoRA; FC starts at zero.
ADAPTER:        same residual form, but z_I goes through a random image encoder
    and the projections are randomly initialized.
TOKEN_CONCAT:   no cross-attention; projected image tokens are placed in front
    of the video tokens inside the base MM-attention.
"""

import logging
from enum import Enum
from typing import Dict, List, NamedTuple, Optional, Sequence

import numpy as np

from core.core_errors import NumericsError
from core.core_numerics import Rng, Tensor, concat, gelu, rms_norm
from layers.layer_attention import MmAttentionBlock, mm_attention_forward, multihead_attention
from layers.layer_lora import ReparamLinear
from layers.layer_rope import RopeConfig, RopeIndex

logger = logging.getLogger(__name__)


class InjectionMode(str, Enum):
    ATTENTION_INHERITED = "attention_inherited"
    TOKEN_CONCAT = "token_concat"
    ADAPTER = "adapter"


class BlockRopes(NamedTuple):
    video: List[RopeIndex]          # (frame, y, x) for the base MM-attention
    text: List[RopeIndex]           # text stream in the base MM-attention
    video_spatial: List[RopeIndex]  # (0, y, x) queries of the injection cross-attention
    image_spatial: List[RopeIndex]  # (0, y, x) keys of the injection cross-attention


def zero_linear(d_in: int, d_out: int) -> ReparamLinear:
    return ReparamLinear(np.zeros((d_out, d_in)), np.zeros(d_out), frozen=False)


class InjectionBlock:
    def __init__(self, mode: InjectionMode, heads: int, rope: Optional[RopeConfig],
                 q: Optional[ReparamLinear] = None, k: Optional[ReparamLinear] = None,
                 v: Optional[ReparamLinear] = None, ffn_in: Optional[ReparamLinear] = None,
                 ffn_out: Optional[ReparamLinear] = None, zero_fc: Optional[ReparamLinear] = None,
                 image_encoder: Optional[ReparamLinear] = None,
                 condition_proj: Optional[ReparamLinear] = None):
        self.mode = InjectionMode(mode)
        self.heads = heads
        self.rope = rope
        self.q, self.k, self.v = q, k, v
        self.ffn_in, self.ffn_out = ffn_in, ffn_out
        self.zero_fc = zero_fc
        self.image_encoder = image_encoder
        self.condition_proj = condition_proj

    # ------------------------------------------------------------------
    # Construction per mode
    # ------------------------------------------------------------------
    @classmethod
    def inherited(cls, base: MmAttentionBlock, rank: int, alpha: float, rng: Rng) -> "InjectionBlock":
        video = base.video
        layers = {
            name: getattr(video, name).clone(frozen=True).with_adapter(rank, alpha, rng)
            for name in ("q", "k", "v", "ffn_in", "ffn_out")
        }
        return cls(InjectionMode.ATTENTION_INHERITED, base.heads, base.rope,
                   zero_fc=zero_linear(base.d_model, base.d_model), **layers)

    @classmethod
    def adapter(cls, base: MmAttentionBlock, ffn_mult: int, rng: Rng) -> "InjectionBlock":
        d = base.d_model
        hidden = d * ffn_mult
        return cls(
            InjectionMode.ADAPTER, base.heads, base.rope,
            q=ReparamLinear.from_rng(d, d, rng, frozen=False),
            k=ReparamLinear.from_rng(d, d, rng, frozen=False),
            v=ReparamLinear.from_rng(d, d, rng, frozen=False),
            ffn_in=ReparamLinear.from_rng(d, hidden, rng, frozen=False),
            ffn_out=ReparamLinear.from_rng(hidden, d, rng, frozen=False),
            zero_fc=zero_linear(d, d),
            image_encoder=ReparamLinear.from_rng(d, d, rng, frozen=False),
        )

    @classmethod
    def token_concat(cls, base: MmAttentionBlock, rank: int, alpha: float, rng: Rng) -> "InjectionBlock":
        d = base.d_model
        proj = ReparamLinear(np.eye(d), np.zeros(d), frozen=True).with_adapter(rank, alpha, rng)
        return cls(InjectionMode.TOKEN_CONCAT, base.heads, base.rope, condition_proj=proj)

    @classmethod
    def build(cls, mode: InjectionMode, base: MmAttentionBlock, rank: int, alpha: float,
              ffn_mult: int, rng: Rng) -> "InjectionBlock":
        mode = InjectionMode(mode)
        if mode is InjectionMode.ATTENTION_INHERITED:
            return cls.inherited(base, rank, alpha, rng)
        if mode is InjectionMode.ADAPTER:
            return cls.adapter(base, ffn_mult, rng)
        return cls.token_concat(base, rank, alpha, rng)

    def layers(self) -> Dict[str, ReparamLinear]:
        names = ("q", "k", "v", "ffn_in", "ffn_out", "zero_fc", "image_encoder", "condition_proj")
        return {name: getattr(self, name) for name in names if getattr(self, name) is not None}

    def trainable_parameters(self) -> List[Tensor]:
        return [p for layer in self.layers().values() for p in layer.trainable_parameters()]


# ============================================================================
# FORWARD
# ============================================================================
def inject(block: InjectionBlock, z: Tensor, z_img: Tensor,
           rope_vid: Optional[Sequence[RopeIndex]] = None,
           rope_img: Optional[Sequence[RopeIndex]] = None,
           return_weights: bool = False):
    """z + zero_fc(FFN(cross-attention of video queries over image keys/values))."""
    if block.mode is InjectionMode.TOKEN_CONCAT:
        raise NumericsError("token_concat blocks condition through block_forward, not inject")
    if z.data.ndim != 2 or z_img.data.ndim != 2 or z.dims[1] != z_img.dims[1]:
        raise NumericsError(f"inject: video {z.dims} and image {z_img.dims} tokens do not match")
    if block.rope is not None and (rope_vid is None or rope_img is None
                                   or len(rope_vid) != z.dims[0] or len(rope_img) != z_img.dims[0]):
        raise NumericsError("inject: rope index counts do not match token counts")

    image = block.image_encoder(z_img) if block.image_encoder is not None else z_img
    kv_in = rms_norm(image)
    attended = multihead_attention(block.q(rms_norm(z)), block.k(kv_in), block.v(kv_in), block.heads,
                                   block.rope, rope_vid, rope_img, return_weights)
    if return_weights:
        attended, weights = attended
    delta = block.zero_fc(block.ffn_out(gelu(block.ffn_in(rms_norm(attended)))))
    out = z + delta
    return (out, weights) if return_weights else out


def block_forward(base: MmAttentionBlock, injection: Optional[InjectionBlock], z: Tensor,
                  z_T: Tensor, z_I: Optional[Tensor], ropes: BlockRopes) -> Tensor:
    """Injection (if any) followed by the frozen base MM-attention; returns video tokens."""
    if injection is None or z_I is None:
        out_v, _ = mm_attention_forward(base, z, z_T, ropes.video, ropes.text)
        return out_v

    if injection.mode is InjectionMode.TOKEN_CONCAT:
        n_img = z_I.dims[0]
        image = injection.condition_proj(z_I)
        shifted = [RopeIndex(i.t + 1, i.y, i.x) for i in ropes.video]
        out_v, _ = mm_attention_forward(base, concat([image, z]), z_T,
                                        list(ropes.image_spatial) + shifted, ropes.text)
        return out_v[n_img:]

    z_hat = inject(injection, z, z_I, ropes.video_spatial, ropes.image_spatial)
    out_v, _ = mm_attention_forward(base, z_hat, z_T, ropes.video, ropes.text)
    return out_v
