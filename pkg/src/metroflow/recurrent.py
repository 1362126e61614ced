"""Graph-gated recurrence: a GRU whose gates are graph convolutions.

Each gate applies the node-adaptive convolution of :mod:`metroflow.graph` to
the concatenation of the step input and the hidden state, using support
(I + adjacency). The branch unrolls over the input steps and maps the final
hidden state through one affine layer to all forecast steps at once.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import autodiff as ad
from . import graph as g


@dataclass
class GateParams:
    """One gate's convolution weights: pooled (node-adaptive) or shared."""

    weight: ad.Tensor  # pool [d x C x F] when pooled, else shared [C x F]
    bias: ad.Tensor  # pool [d x F] when pooled, else shared [F]


@dataclass
class GraphGruParams:
    """update/reset/candidate gates plus the embedding table they share.

    ``embeddings`` is None in the shared-weight (non-adaptive) variant.
    """

    embeddings: ad.Tensor
    update: GateParams
    reset: GateParams
    candidate: GateParams


def _materialize(params):
    """Per-gate (theta, bias) ready for graph_conv, amortized over a sequence.

    The update and reset gates read the same aggregated [x, h] features, so
    their weights are fused into one [C x 2F] block and split after the
    activation — one contraction per step instead of two.
    """
    gates = {}
    for name, gate in (
        ("update", params.update),
        ("reset", params.reset),
        ("candidate", params.candidate),
    ):
        if params.embeddings is not None:
            pool = g.NodePoolParams(params.embeddings, gate.weight, gate.bias)
            gates[name] = g.materialize_node_weights(pool)
        else:
            gates[name] = (gate.weight, gate.bias)
    uw, ub = gates["update"]
    rw, rb = gates["reset"]
    gates["update_reset"] = (ad.concat_features(uw, rw), ad.concat_features(ub, rb))
    return gates


def _gate_conv(x, support, weights):
    theta_or_w, bias = weights
    if theta_or_w.ndim == 3:
        return g.graph_conv(x, support, theta_or_w, bias)
    return g.shared_conv(x, support, theta_or_w, bias)


def _step(x_t, h_prev, support, gates):
    f = h_prev.shape[-1]
    xh = ad.concat_features(x_t, h_prev)
    zr = ad.sigmoid(_gate_conv(xh, support, gates["update_reset"]))
    last = zr.ndim - 1
    z = ad.narrow(zr, last, 0, f)
    r = ad.narrow(zr, last, f, f)
    xrh = ad.concat_features(x_t, ad.hadamard(r, h_prev))
    cand = ad.tanh(_gate_conv(xrh, support, gates["candidate"]))
    return ad.blend(z, h_prev, cand)


def gru_step(x_t, h_prev, params, adjacency):
    """One recurrence step; support is (I + adjacency).

    x_t: [N x C] or [B x N x C]; h_prev matches with F features.
    """
    n = adjacency.shape[0]
    support = ad.add(g.eye(n), adjacency)
    gates = _materialize(params)
    return _step(x_t, h_prev, support, gates)


def encode_sequence(x_seq, layers, support, proj_weight, proj_bias):
    """Unroll the recurrence over time and project to the forecast vector.

    x_seq: [T x N x C] or [B x T x N x C]; ``layers`` is a list of
    GraphGruParams (stacked bottom-up); returns [N x out] / [B x N x out]
    where out = proj_weight.shape[1].
    """
    batched = x_seq.ndim == 4
    if x_seq.ndim not in (3, 4):
        raise ad.ShapeError(f"sequence must be 3-D or 4-D, got {x_seq.shape}")
    b = x_seq.shape[0] if batched else 1
    t_steps, n, c = x_seq.shape[-3:]
    if t_steps < 1:
        raise ad.ShapeError("empty sequence")

    seq4 = x_seq if batched else ad.reshape(x_seq, (1,) + x_seq.shape)
    inputs = [
        ad.reshape(ad.narrow(seq4, 1, t, 1), (b, n, c)) for t in range(t_steps)
    ]
    for layer in layers:
        gates = _materialize(layer)
        f = (
            layer.update.weight.shape[-1]
        )  # pool [d x C x F] or shared [C x F]: last extent is F
        h = ad.zeros((b, n, f))
        outputs = []
        for x_t in inputs:
            h = _step(x_t, h, support, gates)
            outputs.append(h)
        inputs = outputs

    final = inputs[-1]  # [b x n x f]
    f = final.shape[-1]
    out_dim = proj_weight.shape[1]
    flat = ad.reshape(final, (b * n, f))
    projected = ad.reshape(ad.linear(flat, proj_weight, proj_bias), (b, n, out_dim))
    return projected if batched else ad.reshape(projected, (n, out_dim))
