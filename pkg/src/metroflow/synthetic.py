"""Seeded synthetic metro-flow fixture generator.

Each (station, channel) series is a daily sinusoid clipped at zero (no flow
overnight, as for a real metro), with station-specific amplitude, phase and
an optional multiplicative linear ramp over the whole span, plus pointwise
gaussian noise proportional to the clean signal. Counts are rounded to
non-negative integers so the output round-trips through the flow file format.
"""

from __future__ import annotations

import math
import random

from . import backend as _b
from .autodiff import Tensor
from .data import FlowDataset


def make_synthetic(
    stations=8,
    days=20,
    interval_minutes=15,
    seed=0,
    trend=True,
    noise=0.05,
    start="2024-01-01T00:00:00",
):
    """Deterministic synthetic dataset of shape [days*slots x stations x 2]."""
    if stations < 2 or days < 1:
        raise ValueError("need at least 2 stations and 1 day")
    slots_per_day = (24 * 60) // interval_minutes
    t_total = days * slots_per_day
    rng = random.Random(seed)

    profiles = []
    for s in range(stations):
        amplitude = rng.uniform(80.0, 600.0)
        params = [
            {
                "phase": rng.uniform(0.0, 2.0 * math.pi),
                "lift": rng.uniform(-0.1, 0.3),
                "scale": rng.uniform(0.8, 1.2),
            }
            for _channel in range(2)
        ]
        ramp = rng.uniform(0.25, 0.5) * rng.choice([-1.0, 1.0]) if trend else 0.0
        profiles.append((amplitude, params, ramp))

    data = _b.alloc_raw(t_total * stations * 2)
    denom = max(t_total - 1, 1)
    two_pi = 2.0 * math.pi
    for t in range(t_total):
        angle = two_pi * (t % slots_per_day) / slots_per_day
        for s in range(stations):
            amplitude, params, ramp = profiles[s]
            growth = 1.0 + ramp * (t / denom)
            for c in range(2):
                p = params[c]
                wave = math.sin(angle + p["phase"]) + p["lift"]
                level = amplitude * p["scale"] * max(0.0, wave) * growth
                value = level + rng.gauss(0.0, noise * level)
                data[(t * stations + s) * 2 + c] = max(0.0, round(value))

    return FlowDataset(
        flows=Tensor((t_total, stations, 2), data),
        station_ids=tuple(f"S{w:02d}" for w in range(stations)),
        interval_minutes=interval_minutes,
        start_timestamp=start,
    )
