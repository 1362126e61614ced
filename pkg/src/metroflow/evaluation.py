"""Original-scale error metrics, per-horizon reports, historical-average baseline.

Every aggregation uses ``math.fsum``, which returns the correctly rounded sum
regardless of summand order — window order therefore cannot change a report,
and the brute-force oracle comparisons in the tests hold bit-exactly.
"""

from __future__ import annotations

import json
import math
from array import array

from . import backend as _b
from .autodiff import Tensor

HORIZON_KEYS = ("15min", "30min", "45min", "60min")


def _metrics_from_buffers(pred_buf, true_buf):
    """Metric cell from paired flat buffers; fsum keeps it order-independent."""
    n = len(pred_buf)
    if n == 0:
        raise ValueError("no prediction/truth pairs to score")
    K = _b.kernels
    err = _b.alloc_raw(n)
    K.sub(pred_buf, true_buf, err, n)
    absd = _b.alloc_raw(n)
    K.absv(err, absd, n)
    sq = _b.alloc_raw(n)
    K.mul(err, err, sq, n)
    mae = math.fsum(absd) / n
    rmse = math.sqrt(math.fsum(sq) / n)
    ratios = _b.alloc_raw(n)
    count = K.mape_terms(absd, true_buf, ratios, n)
    mape = math.fsum(ratios[:count]) / count if count else 0.0
    return {"mae": mae, "rmse": rmse, "mape": mape}


def regression_metrics(preds, trues):
    """{"mae","rmse","mape"} over paired values; truths of 0 are skipped by MAPE.

    MAPE is a fraction (1.0 == 100%).
    """
    pred_buf = array("d", preds)
    true_buf = array("d", trues)
    if len(pred_buf) != len(true_buf):
        raise ValueError("prediction/truth lengths differ")
    return _metrics_from_buffers(pred_buf, true_buf)


def predict_original_scale(model, windows, stats, batch_size=128):
    """Original-scale prediction buffers ([m*N*2] each), batched inference."""
    cfg = model.config
    t_in, n = cfg.input_steps, cfg.n_stations
    x_len = t_in * n * 2
    preds = []
    a = 1.0 / stats.std
    b = -stats.mean * a
    for lo in range(0, len(windows), batch_size):
        chunk = windows[lo : lo + batch_size]
        bx = _b.alloc_raw(len(chunk) * x_len)
        for i, w in enumerate(chunk):
            bx[i * x_len : (i + 1) * x_len] = w.x.data
        _b.kernels.affine(bx, a, b, bx, len(bx))
        out = model.forward(Tensor((len(chunk), t_in, n, 2), bx))
        inv = _b.alloc_raw(out.size)
        _b.kernels.affine(out.data, stats.std, stats.mean, inv, out.size)
        y_len = out.size // len(chunk)
        for i in range(len(chunk)):
            preds.append(inv[i * y_len : (i + 1) * y_len])
    return preds


def evaluate(model, windows, stats, batch_size=128, horizons=True):
    """Per-horizon + aggregate MAE/RMSE/MAPE on the original scale.

    Horizon cells cover forecast steps 1..4 (the 15/30/45/60-minute columns at
    quarter-hour resolution); the aggregate covers every forecast step.
    """
    if not windows:
        raise ValueError("cannot evaluate an empty window set")
    preds = predict_original_scale(model, windows, stats, batch_size)
    m = windows[0].output_steps
    n_horizons = min(len(HORIZON_KEYS), m) if horizons else 0
    step_len = windows[0].x.shape[1] * 2  # N*2 values per forecast step
    y_len = m * step_len
    n_windows = len(windows)

    agg_p = _b.alloc_raw(n_windows * y_len)
    agg_t = _b.alloc_raw(n_windows * y_len)
    pos = 0
    for w, p in zip(windows, preds):
        agg_p[pos : pos + y_len] = p
        agg_t[pos : pos + y_len] = w.y.data
        pos += y_len

    report = {}
    for k in range(n_horizons):
        hp = _b.alloc_raw(n_windows * step_len)
        ht = _b.alloc_raw(n_windows * step_len)
        sl_lo = k * step_len
        for i in range(n_windows):
            hp[i * step_len : (i + 1) * step_len] = agg_p[
                i * y_len + sl_lo : i * y_len + sl_lo + step_len
            ]
            ht[i * step_len : (i + 1) * step_len] = agg_t[
                i * y_len + sl_lo : i * y_len + sl_lo + step_len
            ]
        report[HORIZON_KEYS[k]] = _metrics_from_buffers(hp, ht)
    report["agg"] = _metrics_from_buffers(agg_p, agg_t)
    return report


def report_to_json(report):
    return json.dumps(report, indent=2)


class HistoricalAverage:
    """Slot-of-day mean predictor fitted on the training flow tensor."""

    def __init__(self, means, slots_per_day, n_stations):
        self._means = means  # [slots_per_day * N * 2]
        self.slots_per_day = slots_per_day
        self.n_stations = n_stations

    def value(self, t, station, channel):
        slot = t % self.slots_per_day
        return self._means[(slot * self.n_stations + station) * 2 + channel]


def historical_average(train_flows, slots_per_day):
    """Fit per-(slot, station, channel) training means.

    Requires at least one full day of training data; every slot must be
    observed at least once.
    """
    t_total, n, _ = train_flows.shape
    if t_total < slots_per_day:
        raise ValueError(
            f"training span of {t_total} steps is shorter than one day "
            f"({slots_per_day} slots)"
        )
    data = train_flows.data
    means = _b.alloc_raw(slots_per_day * n * 2)
    for slot in range(slots_per_day):
        times = range(slot, t_total, slots_per_day)
        if not times:
            raise ValueError(f"slot {slot} never observed in training")
        for s in range(n):
            for c in range(2):
                vals = [data[(t * n + s) * 2 + c] for t in times]
                means[(slot * n + s) * 2 + c] = math.fsum(vals) / len(vals)
    return HistoricalAverage(means, slots_per_day, n)


def evaluate_historical_average(ha, windows):
    """HA report; one aggregate over distinct target times fills every cell.

    The predictor is windowless (one value per absolute time index), so its
    metrics are computed once over the distinct target times of the window
    set and replicated across the horizon columns.
    """
    if not windows:
        raise ValueError("cannot evaluate an empty window set")
    n = windows[0].x.shape[1]
    m = windows[0].output_steps
    step_len = n * 2
    seen = {}
    for w in windows:
        for k in range(m):
            t_abs = w.t_origin + w.input_steps + k
            if t_abs not in seen:
                seen[t_abs] = w.y.data[k * step_len : (k + 1) * step_len]
    preds, trues = [], []
    for t_abs in sorted(seen):
        truth = seen[t_abs]
        for s in range(n):
            for c in range(2):
                preds.append(ha.value(t_abs, s, c))
                trues.append(truth[s * 2 + c])
    cell = regression_metrics(preds, trues)
    report = {}
    for k in range(min(len(HORIZON_KEYS), m)):
        report[HORIZON_KEYS[k]] = dict(cell)
    report["agg"] = dict(cell)
    return report
