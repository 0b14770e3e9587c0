"""Plain numpy renditions of the attention blocks, used as test oracles."""

import math

import numpy as np


def np_rms(x):
    return x / np.sqrt((x * x).mean(axis=-1, keepdims=True) + 1e-6)


def np_linear(layer, x):
    y = x @ layer.base_weight.data.T
    if layer.base_bias is not None:
        y = y + layer.base_bias.data
    if layer.adapter is not None:
        y = y + layer.adapter.scale * (x @ layer.adapter.down.data.T) @ layer.adapter.up.data.T
    return y


def np_gelu(x):
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x ** 3)))


def np_rotate(x, indices, rope):
    out = x.copy()
    col = 0
    for axis, width in enumerate(rope.partition):
        for j in range(width // 2):
            freq = rope.theta ** (-2.0 * j / width)
            angle = np.array([idx[axis] for idx in indices], dtype=np.float64) * freq
            a, b = x[:, col], x[:, col + 1]
            out[:, col] = a * np.cos(angle) - b * np.sin(angle)
            out[:, col + 1] = a * np.sin(angle) + b * np.cos(angle)
            col += 2
    return out


def np_attention(q, k, v, heads, rope, q_idx, k_idx):
    """Per-head rotated softmax attention; returns (output, per-head weights)."""
    hd = q.shape[1] // heads
    outputs, weights = [], []
    for h in range(heads):
        cols = slice(h * hd, (h + 1) * hd)
        qh, kh = np_rotate(q[:, cols], q_idx, rope), np_rotate(k[:, cols], k_idx, rope)
        scores = qh @ kh.T / math.sqrt(hd)
        w = np.exp(scores - scores.max(axis=1, keepdims=True))
        w /= w.sum(axis=1, keepdims=True)
        outputs.append(w @ v[:, cols])
        weights.append(w)
    return np.hstack(outputs), weights


def np_joint_attention(blk, tv, tt, idx):
    V, T = blk.video, blk.text
    hv, ht = np_rms(tv), np_rms(tt)
    q = np.vstack([np_linear(V.q, hv), np_linear(T.q, ht)])
    k = np.vstack([np_linear(V.k, hv), np_linear(T.k, ht)])
    v = np.vstack([np_linear(V.v, hv), np_linear(T.v, ht)])
    attended, _ = np_attention(q, k, v, blk.heads, blk.rope, idx, idx)
    n_v = tv.shape[0]
    z_v = tv + np_linear(V.o, attended[:n_v])
    z_t = tt + np_linear(T.o, attended[n_v:])
    ffn = lambda s, z: np_linear(s.ffn_out, np_gelu(np_linear(s.ffn_in, np_rms(z))))  # noqa: E731
    return z_v + ffn(V, z_v), z_t + ffn(T, z_t)


def np_inject(block, z, z_img, rope_vid, rope_img):
    """z + zero_fc(FFN(cross-attention)); returns (output, per-head weights)."""
    image = np_linear(block.image_encoder, z_img) if block.image_encoder is not None else z_img
    kv_in = np_rms(image)
    attended, weights = np_attention(np_linear(block.q, np_rms(z)), np_linear(block.k, kv_in),
                                     np_linear(block.v, kv_in), block.heads, block.rope, rope_vid, rope_img)
    hidden = np_gelu(np_linear(block.ffn_in, np_rms(attended)))
    return z + np_linear(block.zero_fc, np_linear(block.ffn_out, hidden)), weights
