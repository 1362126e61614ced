"""Adam optimization, masked-MAE loss, and the mini-batch training loop."""

from __future__ import annotations

import json
import math
import random
import time
from dataclasses import dataclass

from . import autodiff as ad
from . import backend as _b
from .autodiff import Tape, Tensor
from .evaluation import evaluate
from .model import restore_params, snapshot_params


class OptimizerError(RuntimeError):
    """A registered parameter is missing its gradient."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite."""


class Adam:
    """Bias-corrected Adam over a name -> tensor registry."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self._params = list(params.items())
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m = {name: _b.alloc(t.size) for name, t in self._params}
        self._v = {name: _b.alloc(t.size) for name, t in self._params}

    def step(self):
        self.step_count += 1
        b1t = self.beta1 ** self.step_count
        b2t = self.beta2 ** self.step_count
        K = _b.kernels
        for name, p in self._params:
            if p.grad is None:
                raise OptimizerError(f"parameter {name} has no gradient")
            K.adam_step(
                p.data, p.grad, self._m[name], self._v[name], p.size,
                self.lr, self.beta1, self.beta2, self.eps, b1t, b2t,
            )

    def zero_grads(self):
        for _, p in self._params:
            p.grad = None


def loss_mae_masked(pred, target, mask):
    """Sum(mask * |pred - target|) / sum(mask), differentiable w.r.t. pred."""
    if pred.shape != target.shape or pred.shape != mask.shape:
        raise ad.ShapeError(
            f"loss operands must share a shape: {pred.shape}, {target.shape}, {mask.shape}"
        )
    denom = _b.kernels.asum(mask.data, mask.size)
    if denom == 0.0:
        raise ValueError("mask selects no entries")
    diff = ad.absolute(ad.subtract(pred, target))
    return ad.scale(ad.sum_all(ad.hadamard(diff, mask)), 1.0 / denom)


@dataclass
class TrainingResult:
    log: list
    best_params: dict
    best_epoch: int
    best_val_mae: float


def _normalized_buffers(windows, stats):
    a = 1.0 / stats.std
    b = -stats.mean * a
    xs, ys = [], []
    for w in windows:
        bx = _b.alloc_raw(w.x.size)
        by = _b.alloc_raw(w.y.size)
        _b.kernels.affine(w.x.data, a, b, bx, w.x.size)
        _b.kernels.affine(w.y.data, a, b, by, w.y.size)
        xs.append(bx)
        ys.append(by)
    return xs, ys


def train(
    model,
    train_windows,
    val_windows,
    stats,
    batch_size=16,
    max_epochs=100,
    patience=10,
    lr=1e-3,
    beta1=0.9,
    beta2=0.999,
    eps=1e-8,
    log_stream=None,
):
    """Mini-batch epochs over shuffled train windows with best-val retention.

    Stops when epochs-since-best reaches ``patience`` (checked after every
    epoch, so patience=0 runs exactly one epoch) or at ``max_epochs``. The
    model is left holding the best-validation parameters.
    """
    if not train_windows or not val_windows:
        raise ValueError("need non-empty train and val window sets")
    if batch_size < 1 or max_epochs < 1 or patience < 0:
        raise ValueError("batch_size/max_epochs must be >= 1 and patience >= 0")

    cfg = model.config
    t_in, m, n = cfg.input_steps, cfg.output_steps, cfg.n_stations
    x_len = t_in * n * 2
    y_len = m * n * 2
    xs, ys = _normalized_buffers(train_windows, stats)
    mask_cache = {}

    optimizer = Adam(model.parameters(), lr=lr, beta1=beta1, beta2=beta2, eps=eps)
    rng = random.Random(cfg.seed)
    order = list(range(len(train_windows)))

    log = []
    best_val = math.inf
    best_epoch = 0
    best = snapshot_params(model)
    since_best = 0

    for epoch in range(1, max_epochs + 1):
        started = time.monotonic()
        rng.shuffle(order)
        loss_total = 0.0
        for lo in range(0, len(order), batch_size):
            idxs = order[lo : lo + batch_size]
            nb = len(idxs)
            if nb not in mask_cache:
                mask_cache[nb] = ad.ones((nb, m, n, 2))
            bx = _b.alloc_raw(nb * x_len)
            by = _b.alloc_raw(nb * y_len)
            for i, j in enumerate(idxs):
                bx[i * x_len : (i + 1) * x_len] = xs[j]
                by[i * y_len : (i + 1) * y_len] = ys[j]
            batch_x = Tensor((nb, t_in, n, 2), bx)
            batch_y = Tensor((nb, m, n, 2), by)
            with Tape():
                pred = model.forward(batch_x)
                loss = loss_mae_masked(pred, batch_y, mask_cache[nb])
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainingDiverged(
                        f"epoch {epoch}: non-finite loss {value} on batch at {lo}"
                    )
                ad.backward(loss)
            optimizer.step()
            optimizer.zero_grads()
            loss_total += value * nb
        train_loss = loss_total / len(order)

        val_report = evaluate(model, val_windows, stats, horizons=False)
        val = val_report["agg"]
        entry = {
            "epoch": epoch,
            "train_loss": train_loss,
            "val_mae": val["mae"],
            "val_rmse": val["rmse"],
            "val_mape": val["mape"],
            "seconds": time.monotonic() - started,
        }
        log.append(entry)
        if log_stream is not None:
            log_stream.write(json.dumps(entry) + "\n")

        if val["mae"] < best_val:
            best_val = val["mae"]
            best_epoch = epoch
            best = snapshot_params(model)
            since_best = 0
        else:
            since_best += 1
        if since_best >= patience:
            break

    restore_params(model, best)
    return TrainingResult(
        log=log, best_params=best, best_epoch=best_epoch, best_val_mae=best_val
    )
