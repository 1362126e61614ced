"""Model assembly: configuration, parameter registry, forward pass, checkpoints.

The full network runs two branches over the same input window — the
graph-gated recurrence (spatial) and per-station temporal attention — and
combines them with a learned elementwise gate. Ablation switches turn either
branch off, swap the node-adaptive weights for shared ones, or replace the
learned adjacency with a fixed line graph.
"""

from __future__ import annotations

import json
import math
import random
import sys
from dataclasses import asdict, dataclass, fields

from . import attention as attn
from . import autodiff as ad
from . import graph as g
from . import recurrent as rec


class ConfigError(ValueError):
    """Invalid model or experiment configuration."""


class CheckpointError(ValueError):
    """Checkpoint file does not match the config-derived registry."""


@dataclass
class ModelConfig:
    n_stations: int
    input_steps: int = 12
    output_steps: int = 12
    embed_dim: int = 10  # adjacency embedding width
    pool_dim: int = 10  # weight-pool embedding width
    hidden_dim: int = 64  # recurrent feature width
    attn_dim: int = 64  # attention model width
    attn_heads: int = 4
    ffn_dim: int = 256
    recurrent_layers: int = 1
    node_adaptive: bool = True
    use_recurrent: bool = True
    use_attention: bool = True
    static_graph: bool = False
    share_embeddings: bool = False
    scalar_fusion: bool = False
    dropout: float = 0.0
    seed: int = 0

    def validate(self):
        if self.n_stations < 2:
            raise ConfigError(f"need at least 2 stations, got {self.n_stations}")
        for name in (
            "input_steps",
            "output_steps",
            "embed_dim",
            "pool_dim",
            "hidden_dim",
            "attn_dim",
            "attn_heads",
            "ffn_dim",
            "recurrent_layers",
        ):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not (self.use_recurrent or self.use_attention):
            raise ConfigError("at least one branch must be enabled")
        if self.attn_dim % self.attn_heads != 0:
            raise ConfigError(
                f"attn_dim {self.attn_dim} must be divisible by attn_heads {self.attn_heads}"
            )
        if self.ffn_dim < self.attn_dim:
            raise ConfigError(
                f"ffn_dim {self.ffn_dim} must be >= attn_dim {self.attn_dim}"
            )
        if self.share_embeddings:
            if self.static_graph or not self.use_recurrent:
                raise ConfigError("share_embeddings needs a learned adjacency table")
            if self.embed_dim != self.pool_dim:
                raise ConfigError(
                    "share_embeddings requires embed_dim == pool_dim, "
                    f"got {self.embed_dim} != {self.pool_dim}"
                )
        if self.dropout != 0.0:
            raise ConfigError("dropout is a config hook; only 0.0 is supported")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def to_dict(self):
        return asdict(self)


def fuse(spatial, temporal, w_spatial, w_temporal):
    """Gated combination w_s ⊙ y_s + w_t ⊙ y_t (weights applied per batch row)."""
    if spatial.shape != temporal.shape:
        raise ad.ShapeError(
            f"fuse needs matching branch shapes, got {spatial.shape} vs {temporal.shape}"
        )
    if w_spatial.shape != w_temporal.shape:
        raise ad.ShapeError(
            f"fuse weights must match, got {w_spatial.shape} vs {w_temporal.shape}"
        )
    if w_spatial.size == 1:
        return ad.add(
            ad.mul_scalar(spatial, w_spatial), ad.mul_scalar(temporal, w_temporal)
        )
    if spatial.size % w_spatial.size != 0:
        raise ad.ShapeError(
            f"fuse weights {w_spatial.shape} do not tile branches {spatial.shape}"
        )
    flat = (w_spatial.size,)
    return ad.add(
        ad.mul_rowvec(spatial, ad.reshape(w_spatial, flat)),
        ad.mul_rowvec(temporal, ad.reshape(w_temporal, flat)),
    )


def _uniform_scaled(shape, scale_dim, rng):
    """Uniform [-0.5, 0.5] scaled by 1/sqrt(dim) — embedding-table init."""
    t = ad.uniform(shape, -0.5, 0.5, rng, requires_grad=True)
    factor = 1.0 / math.sqrt(scale_dim)
    for i in range(t.size):
        t.data[i] *= factor
    return t


def _glorot(shape, fan_in, fan_out, rng):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return ad.uniform(shape, -limit, limit, rng, requires_grad=True)


def _zeros_param(shape):
    return ad.zeros(shape, requires_grad=True)


class ForecastModel:
    """Parameter owner and forward pass for one configuration."""

    def __init__(self, config):
        config.validate()
        self.config = config
        self._params = {}
        rng = random.Random(config.seed)
        n = config.n_stations
        out_dim = config.output_steps * 2

        if config.use_recurrent and not config.static_graph:
            self._register(
                "graph.embeddings",
                _uniform_scaled((n, config.embed_dim), config.embed_dim, rng),
            )

        if config.use_recurrent:
            self._build_recurrent(rng, out_dim)
            self._eye = g.eye(n)
            self._static_support = None
            if config.static_graph:
                self._static_support = ad.add(g.eye(n), g.line_graph_support(n))
        if config.use_attention:
            self._build_attention(rng, out_dim)

        if config.use_recurrent and config.use_attention:
            if config.scalar_fusion:
                self._register("fusion.spatial", ad.full((1,), 0.5, requires_grad=True))
                self._register("fusion.temporal", ad.full((1,), 0.5, requires_grad=True))
            else:
                self._register(
                    "fusion.spatial", ad.full((n, out_dim), 0.5, requires_grad=True)
                )
                self._register(
                    "fusion.temporal", ad.full((n, out_dim), 0.5, requires_grad=True)
                )

    def _register(self, name, tensor):
        if name in self._params:
            raise ConfigError(f"duplicate parameter name {name}")
        self._params[name] = tensor
        return tensor

    def _build_recurrent(self, rng, out_dim):
        cfg = self.config
        n, d, f = cfg.n_stations, cfg.pool_dim, cfg.hidden_dim
        if cfg.node_adaptive:
            if cfg.share_embeddings:
                pool_emb = self._params["graph.embeddings"]
            else:
                pool_emb = self._register(
                    "recurrent.embeddings", _uniform_scaled((n, d), d, rng)
                )
        else:
            pool_emb = None

        self._gru_layers = []
        c_in = 2
        for layer in range(cfg.recurrent_layers):
            prefix = f"recurrent.l{layer}"
            cat = c_in + f
            gates = {}
            for gate in ("update", "reset", "candidate"):
                if cfg.node_adaptive:
                    w = self._register(
                        f"{prefix}.{gate}_weight", _glorot((d, cat, f), cat, f, rng)
                    )
                    b = self._register(f"{prefix}.{gate}_bias", _zeros_param((d, f)))
                else:
                    w = self._register(
                        f"{prefix}.{gate}_weight", _glorot((cat, f), cat, f, rng)
                    )
                    b = self._register(f"{prefix}.{gate}_bias", _zeros_param((f,)))
                gates[gate] = rec.GateParams(w, b)
            self._gru_layers.append(
                rec.GraphGruParams(
                    embeddings=pool_emb,
                    update=gates["update"],
                    reset=gates["reset"],
                    candidate=gates["candidate"],
                )
            )
            c_in = f

        self._proj_weight = self._register(
            "recurrent.proj_weight", _glorot((f, out_dim), f, out_dim, rng)
        )
        self._proj_bias = self._register("recurrent.proj_bias", _zeros_param((out_dim,)))

    def _build_attention(self, rng, out_dim):
        cfg = self.config
        dm = cfg.attn_dim
        dk = dm // cfg.attn_heads
        heads = []
        embed_w = self._register("attention.embed_weight", _glorot((2, dm), 2, dm, rng))
        embed_b = self._register("attention.embed_bias", _zeros_param((dm,)))
        for i in range(cfg.attn_heads):
            wq = self._register(f"attention.head{i}.wq", _glorot((dm, dk), dm, dk, rng))
            wk = self._register(f"attention.head{i}.wk", _glorot((dm, dk), dm, dk, rng))
            wv = self._register(f"attention.head{i}.wv", _glorot((dm, dk), dm, dk, rng))
            heads.append(attn.HeadParams(wq, wk, wv))
        out_w = self._register("attention.out_weight", _glorot((dm, dm), dm, dm, rng))
        n1g = self._register("attention.norm1_gain", ad.ones((dm,), requires_grad=True))
        n1b = self._register("attention.norm1_bias", _zeros_param((dm,)))
        w1 = self._register("attention.ffn_w1", _glorot((dm, cfg.ffn_dim), dm, cfg.ffn_dim, rng))
        b1 = self._register("attention.ffn_b1", _zeros_param((cfg.ffn_dim,)))
        w2 = self._register("attention.ffn_w2", _glorot((cfg.ffn_dim, dm), cfg.ffn_dim, dm, rng))
        b2 = self._register("attention.ffn_b2", _zeros_param((dm,)))
        n2g = self._register("attention.norm2_gain", ad.ones((dm,), requires_grad=True))
        n2b = self._register("attention.norm2_bias", _zeros_param((dm,)))
        fin_w = self._register(
            "attention.final_weight", _glorot((dm, out_dim), dm, out_dim, rng)
        )
        fin_b = self._register("attention.final_bias", _zeros_param((out_dim,)))
        self._attn_params = attn.TemporalAttentionParams(
            embed_weight=embed_w,
            embed_bias=embed_b,
            positions=attn.positional_encoding(cfg.input_steps, dm),
            heads=heads,
            out_weight=out_w,
            norm1_gain=n1g,
            norm1_bias=n1b,
            ffn_w1=w1,
            ffn_b1=b1,
            ffn_w2=w2,
            ffn_b2=b2,
            norm2_gain=n2g,
            norm2_bias=n2b,
            final_weight=fin_w,
            final_bias=fin_b,
        )

    # ------------------------------------------------------------------

    def parameters(self):
        """Name -> tensor registry; every learnable tensor appears exactly once."""
        return dict(self._params)

    def parameter_count(self):
        return sum(t.size for t in self._params.values())

    def adjacency(self):
        """Current learned row-stochastic adjacency (inference mode)."""
        if self.config.static_graph or "graph.embeddings" not in self._params:
            raise ConfigError("this configuration has no learned adjacency")
        emb = self._params["graph.embeddings"]
        return g.adaptive_adjacency(emb.detach())

    def _support(self):
        if self.config.static_graph:
            return self._static_support
        adj = g.adaptive_adjacency(self._params["graph.embeddings"])
        return ad.add(self._eye, adj)

    def forward(self, x):
        """Forecast [m x N x 2] (or batched [B x m x N x 2]) from an input window."""
        cfg = self.config
        expected = (cfg.input_steps, cfg.n_stations, 2)
        batched = x.ndim == 4
        if (batched and x.shape[1:] != expected) or (not batched and x.shape != expected):
            raise ad.ShapeError(
                f"input window must be [T x N x 2] = {expected} (optionally batched), "
                f"got {x.shape}"
            )
        b = x.shape[0] if batched else 1
        seq4 = x if batched else ad.reshape(x, (1,) + x.shape)
        n = cfg.n_stations
        out_dim = cfg.output_steps * 2

        spatial = temporal = None
        if cfg.use_recurrent:
            spatial = rec.encode_sequence(
                seq4, self._gru_layers, self._support(), self._proj_weight, self._proj_bias
            )
        if cfg.use_attention:
            temporal = attn.temporal_attention_forward(seq4, self._attn_params)

        if spatial is not None and temporal is not None:
            fused = fuse(
                spatial,
                temporal,
                self._params["fusion.spatial"],
                self._params["fusion.temporal"],
            )
        else:
            fused = spatial if spatial is not None else temporal

        shaped = ad.swap_axes(
            ad.reshape(fused, (b, n, cfg.output_steps, 2)), 1, 2
        )  # [B x m x N x 2]
        return shaped if batched else ad.reshape(
            shaped, (cfg.output_steps, n, 2)
        )


def build_model(config):
    return ForecastModel(config)


def snapshot_params(model):
    """Deep copy of all parameter buffers, keyed by registry name."""
    from array import array

    return {name: array("d", t.data) for name, t in model.parameters().items()}


def restore_params(model, snapshot):
    for name, t in model.parameters().items():
        t.data[:] = snapshot[name]


def save_checkpoint(path, model):
    """Config JSON line, then per-parameter: JSON header line + raw LE floats."""
    with open(path, "wb") as fh:
        fh.write(json.dumps(model.config.to_dict()).encode("utf-8") + b"\n")
        for name, t in model.parameters().items():
            header = {"name": name, "shape": list(t.shape)}
            fh.write(json.dumps(header).encode("utf-8") + b"\n")
            data = t.data
            if sys.byteorder == "big":
                data = data[:]
                data.byteswap()
            fh.write(data.tobytes())
            fh.write(b"\n")


def load_checkpoint(path):
    """Rebuild the model from a checkpoint, validating every block."""
    from array import array

    with open(path, "rb") as fh:
        config_line = fh.readline()
        if not config_line:
            raise CheckpointError(f"{path}: missing config line")
        try:
            cfg = ModelConfig.from_dict(json.loads(config_line.decode("utf-8")))
        except (json.JSONDecodeError, TypeError, ConfigError) as exc:
            raise CheckpointError(f"{path}: bad config line: {exc}") from None
        model = ForecastModel(cfg)
        for name, tensor in model.parameters().items():
            header_line = fh.readline()
            if not header_line:
                raise CheckpointError(f"{path}: missing block for parameter {name}")
            try:
                header = json.loads(header_line.decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError):
                raise CheckpointError(
                    f"{path}: unreadable header for parameter {name}"
                ) from None
            if header.get("name") != name:
                raise CheckpointError(
                    f"{path}: expected parameter {name}, found {header.get('name')!r}"
                )
            if tuple(header.get("shape", ())) != tensor.shape:
                raise CheckpointError(
                    f"{path}: parameter {name} has shape {header.get('shape')}, "
                    f"registry expects {list(tensor.shape)}"
                )
            raw = fh.read(8 * tensor.size)
            if len(raw) != 8 * tensor.size:
                raise CheckpointError(f"{path}: truncated data for parameter {name}")
            buf = array("d")
            buf.frombytes(raw)
            if sys.byteorder == "big":
                buf.byteswap()
            tensor.data[:] = buf
            if fh.read(1) != b"\n":
                raise CheckpointError(f"{path}: missing terminator after {name}")
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing data after last parameter")
    return model
