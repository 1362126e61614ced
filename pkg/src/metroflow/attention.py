"""Per-station temporal self-attention branch.

Each station's channel sequence is embedded, tagged with a fixed sinusoidal
positional encoding, run through multi-head scaled-dot-product self-attention
and a feed-forward block (post-norm residuals around both), and the last
step's representation is projected to the full forecast vector. Stations
attend only over their own time axis; spatial mixing is the recurrent
branch's job.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from . import autodiff as ad
from .autodiff import Tensor


def positional_encoding(t_max, d_model):
    """Fixed [T x d_model] table: sin on even dims, cos on odd dims.

    e[t, 2i]   = sin(t / 10000^(2i/d_model))
    e[t, 2i+1] = cos(t / 10000^(2i/d_model))
    """
    if d_model % 2 != 0:
        raise ad.ShapeError(f"d_model must be even, got {d_model}")
    if t_max < 1:
        raise ad.ShapeError("positional table needs at least one step")
    table = ad.zeros((t_max, d_model))
    for t in range(t_max):
        for i in range(0, d_model, 2):
            angle = t / (10000.0 ** (i / d_model))
            table.data[t * d_model + i] = math.sin(angle)
            table.data[t * d_model + i + 1] = math.cos(angle)
    return table


def scaled_dot_attention(q, k, v):
    """softmax(Q Kᵀ / sqrt(d_k)) V over [T x d] or batched [R x T x d] inputs."""
    if q.ndim not in (2, 3) or q.ndim != k.ndim or q.ndim != v.ndim:
        raise ad.ShapeError(
            f"q/k/v rank mismatch: {q.shape}, {k.shape}, {v.shape}"
        )
    t = q.shape[-2]
    if k.shape[-2] != t or v.shape[-2] != t or k.shape[-1] != q.shape[-1]:
        raise ad.ShapeError(
            f"attention operands misaligned: {q.shape}, {k.shape}, {v.shape}"
        )
    d_k = q.shape[-1]
    if q.ndim == 2:
        scores = ad.matmul(q, k, transpose_b=True)
    else:
        if q.shape[0] != k.shape[0] or q.shape[0] != v.shape[0]:
            raise ad.ShapeError(
                f"attention batch extents differ: {q.shape}, {k.shape}, {v.shape}"
            )
        scores = ad.bmm(q, k, transpose_b=True)
    weights = ad.softmax_rows(ad.scale(scores, 1.0 / math.sqrt(d_k)))
    if q.ndim == 2:
        return ad.matmul(weights, v)
    return ad.bmm(weights, v)


@dataclass
class HeadParams:
    wq: Tensor  # [d_model x d_k]
    wk: Tensor  # [d_model x d_k]
    wv: Tensor  # [d_model x d_v]


@dataclass
class TemporalAttentionParams:
    embed_weight: Tensor  # [C x d_model]
    embed_bias: Tensor  # [d_model]
    positions: Tensor  # [T_max x d_model], constant
    heads: list  # of HeadParams
    out_weight: Tensor  # [h*d_v x d_model]
    norm1_gain: Tensor
    norm1_bias: Tensor
    ffn_w1: Tensor  # [d_model x d_ff]
    ffn_b1: Tensor
    ffn_w2: Tensor  # [d_ff x d_model]
    ffn_b2: Tensor
    norm2_gain: Tensor
    norm2_bias: Tensor
    final_weight: Tensor  # [d_model x out]
    final_bias: Tensor


def multi_head_attention(seq, params):
    """Self-attention over [R x T x d_model] with per-head projections."""
    r, t, d_model = seq.shape
    flat = ad.reshape(seq, (r * t, d_model))
    head_outs = []
    for head in params.heads:
        q = ad.reshape(ad.matmul(flat, head.wq), (r, t, head.wq.shape[1]))
        k = ad.reshape(ad.matmul(flat, head.wk), (r, t, head.wk.shape[1]))
        v = ad.reshape(ad.matmul(flat, head.wv), (r, t, head.wv.shape[1]))
        head_outs.append(scaled_dot_attention(q, k, v))
    cat = head_outs[0]
    for extra in head_outs[1:]:
        cat = ad.concat_features(cat, extra)
    d_cat = cat.shape[-1]
    return ad.reshape(
        ad.matmul(ad.reshape(cat, (r * t, d_cat)), params.out_weight),
        (r, t, d_model),
    )


def temporal_attention_forward(x_seq, params):
    """Full branch: embed, position, attend, feed-forward, project last step.

    x_seq: [T x N x C] or [B x T x N x C]; returns [N x out] / [B x N x out].
    """
    batched = x_seq.ndim == 4
    if x_seq.ndim not in (3, 4):
        raise ad.ShapeError(f"sequence must be 3-D or 4-D, got {x_seq.shape}")
    b = x_seq.shape[0] if batched else 1
    t_steps, n, c = x_seq.shape[-3:]
    t_max, d_model = params.positions.shape
    if t_steps > t_max:
        raise ad.ShapeError(
            f"sequence of {t_steps} steps exceeds positional table of {t_max}"
        )

    seq4 = x_seq if batched else ad.reshape(x_seq, (1,) + x_seq.shape)
    per_node = ad.swap_axes(seq4, 1, 2)  # [B x N x T x C]
    flat_in = ad.reshape(per_node, (b * n * t_steps, c))
    embedded = ad.linear(flat_in, params.embed_weight, params.embed_bias)

    pos = params.positions
    if t_steps < t_max:
        pos = ad.narrow(pos, 0, 0, t_steps)
    pos_flat = ad.reshape(pos, (t_steps * d_model,))
    tagged = ad.add_rowvec(
        ad.reshape(embedded, (b * n, t_steps * d_model)), pos_flat
    )
    seq = ad.reshape(tagged, (b * n, t_steps, d_model))

    attended = multi_head_attention(seq, params)
    mixed = ad.add(ad.reshape(seq, (b * n * t_steps, d_model)),
                   ad.reshape(attended, (b * n * t_steps, d_model)))
    normed1 = ad.layer_norm(mixed, params.norm1_gain, params.norm1_bias)

    hidden = ad.linear(normed1, params.ffn_w1, params.ffn_b1, relu_after=True)
    ffn_out = ad.linear(hidden, params.ffn_w2, params.ffn_b2)
    normed2 = ad.layer_norm(ad.add(normed1, ffn_out), params.norm2_gain, params.norm2_bias)

    stacked = ad.reshape(normed2, (b * n, t_steps, d_model))
    last = ad.reshape(ad.narrow(stacked, 1, t_steps - 1, 1), (b * n, d_model))
    out = ad.linear(last, params.final_weight, params.final_bias)
    out_dim = params.final_weight.shape[1]
    out = ad.reshape(out, (b, n, out_dim))
    return out if batched else ad.reshape(out, (n, out_dim))
