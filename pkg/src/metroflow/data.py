"""Flow file loading, Z-score normalization, sliding windows, chronological splits.

Flow file format (text, UTF-8): line 1 is a JSON header object with keys
``{"stations": [...], "interval_minutes": int, "start": iso-8601, "rows": int}``;
every following line is CSV ``t_index, in_1..in_N, out_1..out_N`` with
non-negative integer counts, where ``t_index`` equals the 0-based line ordinal.
"""

from __future__ import annotations

import json
import math
from array import array
from dataclasses import dataclass

from . import backend as _b
from .autodiff import Tensor


class DataError(ValueError):
    """Malformed flow file or infeasible windowing/split request."""


@dataclass(frozen=True)
class FlowDataset:
    flows: Tensor  # [T_total x N x 2], channel 0 = inflow, 1 = outflow
    station_ids: tuple
    interval_minutes: int
    start_timestamp: str

    @property
    def n_steps(self):
        return self.flows.shape[0]

    @property
    def n_stations(self):
        return self.flows.shape[1]


@dataclass(frozen=True)
class NormalizationStats:
    mean: float
    std: float


@dataclass(frozen=True)
class SampleWindow:
    x: Tensor  # [T x N x 2]
    y: Tensor  # [m x N x 2], immediately follows x
    t_origin: int

    @property
    def input_steps(self):
        return self.x.shape[0]

    @property
    def output_steps(self):
        return self.y.shape[0]


@dataclass(frozen=True)
class SplitSpec:
    mode: str  # "ratio" or "explicit"
    ratios: tuple = None
    boundaries: tuple = None  # (val_start, test_start) time indices

    def __post_init__(self):
        if self.mode == "ratio":
            r = self.ratios
            if r is None or len(r) != 3 or any(v < 0 for v in r):
                raise DataError(f"ratio split needs 3 non-negative fractions, got {r}")
            if abs(sum(r) - 1.0) > 1e-9:
                raise DataError(f"split ratios must sum to 1, got {r}")
        elif self.mode == "explicit":
            bz = self.boundaries
            if bz is None or len(bz) != 2 or not 0 < bz[0] < bz[1]:
                raise DataError(
                    f"explicit split needs increasing boundary indices, got {bz}"
                )
        else:
            raise DataError(f"unknown split mode {self.mode!r}")


_HEADER_KEYS = {"stations", "interval_minutes", "start", "rows"}


def load_flow_file(path):
    """Parse and validate a flow file into a :class:`FlowDataset`."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DataError(f"{path}: empty file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: line 1: malformed JSON header ({exc})") from None
    if not isinstance(header, dict) or set(header) != _HEADER_KEYS:
        raise DataError(
            f"{path}: line 1: header must have exactly keys {sorted(_HEADER_KEYS)}"
        )
    stations = header["stations"]
    rows = header["rows"]
    interval = header["interval_minutes"]
    if not isinstance(stations, list) or len(stations) < 2:
        raise DataError(f"{path}: line 1: need at least 2 stations")
    if not isinstance(rows, int) or rows < 1:
        raise DataError(f"{path}: line 1: rows must be a positive integer")
    if not isinstance(interval, int) or interval < 1:
        raise DataError(f"{path}: line 1: interval_minutes must be a positive integer")

    n = len(stations)
    data = _b.alloc_raw(rows * n * 2)
    seen = 0
    for ordinal, line in enumerate(lines[1:]):
        lineno = ordinal + 2
        if not line.strip():
            raise DataError(f"{path}: line {lineno}: blank data line")
        fields = [f.strip() for f in line.split(",")]
        if len(fields) != 1 + 2 * n:
            raise DataError(
                f"{path}: line {lineno}: expected {1 + 2 * n} fields, got {len(fields)}"
            )
        try:
            values = [int(f) for f in fields]
        except ValueError:
            raise DataError(f"{path}: line {lineno}: non-integer field") from None
        if values[0] != ordinal:
            raise DataError(
                f"{path}: line {lineno}: time index {values[0]} out of order "
                f"(expected {ordinal})"
            )
        if ordinal >= rows:
            raise DataError(
                f"{path}: line {lineno}: more data rows than the declared {rows}"
            )
        for s in range(n):
            inflow = values[1 + s]
            outflow = values[1 + n + s]
            if inflow < 0 or outflow < 0:
                raise DataError(f"{path}: line {lineno}: negative count")
            base = (ordinal * n + s) * 2
            data[base] = float(inflow)
            data[base + 1] = float(outflow)
        seen += 1
    if seen != rows:
        raise DataError(f"{path}: header declares {rows} rows but file has {seen}")
    return FlowDataset(
        flows=Tensor((rows, n, 2), data),
        station_ids=tuple(str(s) for s in stations),
        interval_minutes=interval,
        start_timestamp=str(header["start"]),
    )


def save_flow_file(path, dataset):
    """Write a :class:`FlowDataset` in the flow file format (counts rounded)."""
    t_total, n, _ = dataset.flows.shape
    header = {
        "stations": list(dataset.station_ids),
        "interval_minutes": dataset.interval_minutes,
        "start": dataset.start_timestamp,
        "rows": t_total,
    }
    flows = dataset.flows
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for t in range(t_total):
            ins = [str(int(round(flows[t, s, 0]))) for s in range(n)]
            outs = [str(int(round(flows[t, s, 1]))) for s in range(n)]
            fh.write(",".join([str(t)] + ins + outs) + "\n")


def zscore_fit(train_portion):
    """Mean/std over every entry of the training portion (std floored at 1e-8)."""
    data = train_portion.data
    n = len(data)
    if n == 0:
        raise DataError("cannot fit normalization on an empty portion")
    mean = math.fsum(data) / n
    var = math.fsum((v - mean) ** 2 for v in data) / n
    std = max(math.sqrt(var), 1e-8)
    return NormalizationStats(mean=mean, std=std)


def zscore_apply(x, stats):
    """(x - mean) / std, returning a new tensor of the same shape."""
    out = _b.alloc_raw(x.size)
    a = 1.0 / stats.std
    _b.kernels.affine(x.data, a, -stats.mean * a, out, x.size)
    return Tensor(x.shape, out)


def zscore_invert(x, stats):
    """x * std + mean, the inverse of :func:`zscore_apply`."""
    out = _b.alloc_raw(x.size)
    _b.kernels.affine(x.data, stats.std, stats.mean, out, x.size)
    return Tensor(x.shape, out)


def make_windows(dataset, input_steps, output_steps, stride=1):
    """Sliding (input, target) pairs at origins 0, stride, 2*stride, ..."""
    if input_steps < 1 or output_steps < 1 or stride < 1:
        raise DataError("window lengths and stride must be >= 1")
    t_total, n, _ = dataset.flows.shape
    span = input_steps + output_steps
    if t_total < span:
        raise DataError(
            f"series of {t_total} steps cannot fit a {input_steps}+{output_steps} window"
        )
    flows = dataset.flows.data
    row = n * 2
    windows = []
    for origin in range(0, t_total - span + 1, stride):
        x = array("d", flows[origin * row : (origin + input_steps) * row])
        y = array(
            "d",
            flows[(origin + input_steps) * row : (origin + span) * row],
        )
        windows.append(
            SampleWindow(
                x=Tensor((input_steps, n, 2), x),
                y=Tensor((output_steps, n, 2), y),
                t_origin=origin,
            )
        )
    return windows


def chronological_split(windows, spec):
    """Partition origin-ordered windows into (train, val, test).

    Boundary windows whose span reaches into the next partition's first input
    step are dropped from the earlier partition, so no target of a train
    window overlaps any val/test input and vice versa.
    """
    if any(
        windows[i].t_origin >= windows[i + 1].t_origin for i in range(len(windows) - 1)
    ):
        raise DataError("windows must be sorted by t_origin")

    if spec.mode == "ratio":
        n = len(windows)
        c1 = int(n * spec.ratios[0])
        c2 = int(n * spec.ratios[1])
        train, val, test = windows[:c1], windows[c1 : c1 + c2], windows[c1 + c2 :]
        if not train or not val or not test:
            raise DataError(
                f"split {spec.ratios} leaves an empty partition for {n} windows"
            )
        val_start = val[0].t_origin
        test_start = test[0].t_origin
        train = [w for w in train if w.t_origin + w.input_steps + w.output_steps <= val_start]
        val = [w for w in val if w.t_origin + w.input_steps + w.output_steps <= test_start]
    else:
        b1, b2 = spec.boundaries
        train = [w for w in windows if w.t_origin + w.input_steps + w.output_steps <= b1]
        val = [
            w
            for w in windows
            if w.t_origin >= b1 and w.t_origin + w.input_steps + w.output_steps <= b2
        ]
        test = [w for w in windows if w.t_origin >= b2]

    for name, part in (("train", train), ("val", val), ("test", test)):
        if not part:
            raise DataError(f"{name} partition received zero windows")
    return train, val, test


def train_time_end(train_windows):
    """First time index after the last train window's target."""
    w = train_windows[-1]
    return w.t_origin + w.input_steps + w.output_steps


def train_portion(dataset, train_windows):
    """Slice of the flow tensor covered by the train windows (for zscore_fit)."""
    end = train_time_end(train_windows)
    t_total, n, _ = dataset.flows.shape
    row = n * 2
    return Tensor((end, n, 2), array("d", dataset.flows.data[: end * row]))
