"""Metro passenger flow forecasting with a learned station graph.

The model couples a graph-gated recurrent branch (node-adaptive graph
convolutions inside a GRU, over an adjacency learned from node embeddings)
with a per-station temporal attention branch, fused elementwise. Everything
runs on a small reverse-mode autodiff core whose numeric kernels come from a
compiled extension with a pure-Python fallback.
"""

from . import autodiff, backend
from .autodiff import Tape, Tensor, backward, grad_check
from .data import (
    FlowDataset,
    NormalizationStats,
    SampleWindow,
    SplitSpec,
    chronological_split,
    load_flow_file,
    make_windows,
    zscore_apply,
    zscore_fit,
    zscore_invert,
)
from .model import ForecastModel, ModelConfig, build_model, load_checkpoint, save_checkpoint
from .synthetic import make_synthetic

__version__ = "0.1.0"
