"""Positional encoding, scaled-dot attention, and the temporal branch."""

import math

import pytest

from metroflow import autodiff as ad
from metroflow.attention import (
    HeadParams,
    TemporalAttentionParams,
    multi_head_attention,
    positional_encoding,
    scaled_dot_attention,
    temporal_attention_forward,
)
from metroflow.autodiff import ShapeError


class TestPositionalEncoding:
    def test_t_zero_row(self):
        pe = positional_encoding(4, 6)
        for i in range(0, 6, 2):
            assert pe[0, i] == 0.0
            assert pe[0, i + 1] == 1.0

    def test_direct_formula_values(self):
        pe = positional_encoding(2, 4)
        assert abs(pe[1, 0] - math.sin(1.0)) < 1e-12
        assert abs(pe[1, 1] - math.cos(1.0)) < 1e-12
        assert abs(pe[1, 2] - math.sin(1.0 / 10000.0 ** (2.0 / 4.0))) < 1e-12
        assert abs(pe[1, 3] - math.cos(1.0 / 10000.0 ** (2.0 / 4.0))) < 1e-12

    def test_range_bounded(self):
        pe = positional_encoding(1000, 8)
        for t in range(1000):
            for i in range(8):
                assert -1.0 <= pe[t, i] <= 1.0

    def test_odd_d_model_rejected(self):
        with pytest.raises(ShapeError):
            positional_encoding(4, 5)

    def test_rows_pairwise_distinct_within_window(self):
        pe = positional_encoding(12, 8)
        rows = [tuple(pe[t, i] for i in range(8)) for t in range(12)]
        assert len(set(rows)) == 12


class TestScaledDotAttention:
    def test_single_step_returns_v(self, rng):
        q = ad.uniform((1, 3), -2, 2, rng)
        k = ad.uniform((1, 3), -2, 2, rng)
        v = ad.uniform((1, 5), -2, 2, rng)
        out = scaled_dot_attention(q, k, v)
        assert out.tolist() == v.tolist()

    def test_identical_keys_average_values(self, rng):
        # all keys equal -> uniform weights -> column means of v
        q = ad.uniform((3, 2), -2, 2, rng)
        k = ad.tensor([[0.7, -0.3]] * 3)
        v = ad.uniform((3, 4), -2, 2, rng)
        out = scaled_dot_attention(q, k, v)
        for j in range(4):
            mean = math.fsum(v[i, j] for i in range(3)) / 3.0
            for i in range(3):
                assert abs(out[i, j] - mean) < 1e-12

    def test_closed_form_example(self):
        # d_k = 1: row 0 scores [0,0] -> [.5,.5]; row 1 scores [0, ln3] -> [.25,.75]
        q = ad.tensor([[0.0], [1.0]])
        k = ad.tensor([[0.0], [math.log(3.0)]])
        v = ad.tensor([[1.0, 0.0], [0.0, 1.0]])
        out = scaled_dot_attention(q, k, v)
        assert abs(out[0, 0] - 0.5) < 1e-12 and abs(out[0, 1] - 0.5) < 1e-12
        assert abs(out[1, 0] - 0.25) < 1e-12 and abs(out[1, 1] - 0.75) < 1e-12

    def test_weights_row_stochastic_and_convex_hull(self, rng):
        for _ in range(25):
            t, dk, dv = rng.randint(1, 6), rng.randint(1, 4), rng.randint(1, 4)
            q = ad.uniform((t, dk), -3, 3, rng)
            k = ad.uniform((t, dk), -3, 3, rng)
            v = ad.uniform((t, dv), -3, 3, rng)
            out = scaled_dot_attention(q, k, v)
            for j in range(dv):
                col = [v[i, j] for i in range(t)]
                for i in range(t):
                    assert min(col) - 1e-9 <= out[i, j] <= max(col) + 1e-9

    def test_batched_matches_per_sequence(self, rng):
        from array import array

        qs = [ad.uniform((3, 2), -1, 1, rng) for _ in range(4)]
        ks = [ad.uniform((3, 2), -1, 1, rng) for _ in range(4)]
        vs = [ad.uniform((3, 2), -1, 1, rng) for _ in range(4)]

        def stack(ts):
            flat = array("d")
            for t in ts:
                flat.extend(t.data)
            return ad.Tensor((4, 3, 2), flat)

        got = scaled_dot_attention(stack(qs), stack(ks), stack(vs))
        for b in range(4):
            single = scaled_dot_attention(qs[b], ks[b], vs[b])
            for i in range(3):
                for j in range(2):
                    assert abs(got[b, i, j] - single[i, j]) < 1e-12

    def test_brute_force_oracle(self, rng):
        # independent double-loop implementation of softmax(QK^T/sqrt(dk)) V
        for _ in range(20):
            t, dk, dv = rng.randint(1, 6), rng.randint(1, 4), rng.randint(1, 4)
            q = ad.uniform((t, dk), -2, 2, rng)
            k = ad.uniform((t, dk), -2, 2, rng)
            v = ad.uniform((t, dv), -2, 2, rng)
            got = scaled_dot_attention(q, k, v)
            for i in range(t):
                scores = [
                    math.fsum(q[i, a] * k[j, a] for a in range(dk)) / math.sqrt(dk)
                    for j in range(t)
                ]
                mx = max(scores)
                exps = [math.exp(s - mx) for s in scores]
                z = math.fsum(exps)
                weights = [e / z for e in exps]
                for c in range(dv):
                    want = math.fsum(weights[j] * v[j, c] for j in range(t))
                    assert abs(got[i, c] - want) < 1e-12

    def test_mismatched_shapes(self, rng):
        with pytest.raises(ShapeError):
            scaled_dot_attention(ad.zeros((2, 3)), ad.zeros((4, 3)), ad.zeros((2, 2)))


def build_branch(rng, t_max=4, d_model=8, heads=2, d_ff=16, out=6, zero_positions=False):
    dk = d_model // heads
    positions = positional_encoding(t_max, d_model)
    if zero_positions:
        positions = ad.zeros((t_max, d_model))
    return TemporalAttentionParams(
        embed_weight=ad.uniform((2, d_model), -0.7, 0.7, rng),
        embed_bias=ad.uniform((d_model,), -0.2, 0.2, rng),
        positions=positions,
        heads=[
            HeadParams(
                ad.uniform((d_model, dk), -0.7, 0.7, rng),
                ad.uniform((d_model, dk), -0.7, 0.7, rng),
                ad.uniform((d_model, dk), -0.7, 0.7, rng),
            )
            for _ in range(heads)
        ],
        out_weight=ad.uniform((d_model, d_model), -0.7, 0.7, rng),
        norm1_gain=ad.ones((d_model,)),
        norm1_bias=ad.zeros((d_model,)),
        ffn_w1=ad.uniform((d_model, d_ff), -0.7, 0.7, rng),
        ffn_b1=ad.zeros((d_ff,)),
        ffn_w2=ad.uniform((d_ff, d_model), -0.7, 0.7, rng),
        ffn_b2=ad.zeros((d_model,)),
        norm2_gain=ad.ones((d_model,)),
        norm2_bias=ad.zeros((d_model,)),
        final_weight=ad.uniform((d_model, out), -0.7, 0.7, rng),
        final_bias=ad.uniform((out,), -0.2, 0.2, rng),
    )


class TestMultiHead:
    def test_single_head_identity_projection_equals_plain_attention(self, rng):
        d_model = 4
        params = build_branch(rng, d_model=d_model, heads=1)
        ident = ad.zeros((d_model, d_model))
        for i in range(d_model):
            ident.data[i * d_model + i] = 1.0
        params.out_weight = ident
        head = params.heads[0]
        seq = ad.uniform((2, 3, d_model), -1, 1, rng)
        got = multi_head_attention(seq, params)

        flat = ad.reshape(seq, (6, d_model))
        q = ad.reshape(ad.matmul(flat, head.wq), (2, 3, head.wq.shape[1]))
        k = ad.reshape(ad.matmul(flat, head.wk), (2, 3, head.wk.shape[1]))
        v = ad.reshape(ad.matmul(flat, head.wv), (2, 3, head.wv.shape[1]))
        # d_v = d_model here, so attention output == multi-head output exactly
        want = scaled_dot_attention(q, k, v)
        assert got.shape == want.shape
        for idx in range(got.size):
            assert abs(got.data[idx] - want.data[idx]) < 1e-12


class TestTemporalBranch:
    def test_step_permutation_invariance_when_positions_zeroed(self, rng):
        # without positional encoding attention is permutation-equivariant, so
        # any reordering of earlier steps (last step fixed) leaves the
        # last-step readout unchanged
        params = build_branch(rng, zero_positions=True)
        seq = [
            [[rng.uniform(-1, 1) for _ in range(2)] for _ in range(3)]
            for _ in range(4)
        ]
        base = temporal_attention_forward(ad.tensor(seq), params)
        reordered = [seq[p] for p in [2, 0, 1, 3]]
        out_r = temporal_attention_forward(ad.tensor(reordered), params)
        for i in range(3):
            for j in range(6):
                assert abs(out_r[i, j] - base[i, j]) < 1e-9

        # with the real positional table the same reordering must matter
        with_pos = build_branch(rng, zero_positions=False)
        b2 = temporal_attention_forward(ad.tensor(seq), with_pos)
        r2 = temporal_attention_forward(ad.tensor(reordered), with_pos)
        assert any(
            abs(b2[i, j] - r2[i, j]) > 1e-9 for i in range(3) for j in range(6)
        )

    def test_hand_trace_single_head(self, rng):
        # wire a minimal branch and retrace it step by step with plain python
        d_model, t_steps, n = 2, 2, 1
        params = build_branch(rng, t_max=2, d_model=2, heads=1, d_ff=2, out=2)
        x = ad.tensor([[[0.5, -0.25]], [[-1.0, 0.75]]])
        got = temporal_attention_forward(x, params)

        def vec_mat(v, m, rows, cols):
            return [
                math.fsum(v[r] * m[r, c] for r in range(rows)) for c in range(cols)
            ]

        pe = params.positions
        emb = []
        for t in range(t_steps):
            e = vec_mat([x[t, 0, 0], x[t, 0, 1]], params.embed_weight, 2, 2)
            e = [e[i] + params.embed_bias[i] + pe[t, i] for i in range(2)]
            emb.append(e)
        head = params.heads[0]
        q = [vec_mat(e, head.wq, 2, 1) for e in emb]
        k = [vec_mat(e, head.wk, 2, 1) for e in emb]
        v = [vec_mat(e, head.wv, 2, 1) for e in emb]
        att = []
        for i in range(t_steps):
            scores = [q[i][0] * k[j][0] / 1.0 for j in range(t_steps)]
            mx = max(scores)
            ex = [math.exp(s - mx) for s in scores]
            z = sum(ex)
            w = [e / z for e in ex]
            att.append([w[0] * v[0][0] + w[1] * v[1][0]])
        # out_weight is [d_model x d_model] but the single head's value dim is
        # 1, so only its first row applies
        proj = [[a[0] * params.out_weight[0, c] for c in range(2)] for a in att]
        mixed = [[emb[t][i] + proj[t][i] for i in range(2)] for t in range(t_steps)]

        def ln(row, gain, bias):
            mu = sum(row) / len(row)
            var = sum((r - mu) ** 2 for r in row) / len(row)
            rs = 1.0 / math.sqrt(var + 1e-5)
            return [gain[i] * ((row[i] - mu) * rs) + bias[i] for i in range(len(row))]

        n1 = [ln(r, params.norm1_gain, params.norm1_bias) for r in mixed]
        ffn = []
        for r in n1:
            h1 = vec_mat(r, params.ffn_w1, 2, 2)
            h1 = [max(0.0, h1[i] + params.ffn_b1[i]) for i in range(2)]
            h2 = vec_mat(h1, params.ffn_w2, 2, 2)
            ffn.append([h2[i] + params.ffn_b2[i] for i in range(2)])
        n2 = [
            ln([n1[t][i] + ffn[t][i] for i in range(2)], params.norm2_gain, params.norm2_bias)
            for t in range(t_steps)
        ]
        final = vec_mat(n2[-1], params.final_weight, 2, 2)
        final = [final[i] + params.final_bias[i] for i in range(2)]
        for j in range(2):
            assert abs(got[0, j] - final[j]) < 1e-9

    def test_too_long_sequence_rejected(self, rng):
        params = build_branch(rng, t_max=4)
        with pytest.raises(ShapeError):
            temporal_attention_forward(ad.zeros((5, 3, 2)), params)

    def test_gradients(self, rng):
        params = build_branch(rng)
        x = ad.uniform((3, 2, 2), -1, 1, rng)
        leaves = [
            params.embed_weight,
            params.heads[0].wq,
            params.heads[1].wv,
            params.out_weight,
            params.norm1_gain,
            params.ffn_w1,
            params.ffn_b2,
            params.norm2_bias,
            params.final_weight,
        ]

        def loss(_):
            y = temporal_attention_forward(x, params)
            return ad.sum_all(ad.hadamard(y, y))

        for leaf in leaves:
            leaf.requires_grad = True
            assert ad.grad_check(loss, leaf) < 1e-4
