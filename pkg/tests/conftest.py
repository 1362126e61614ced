import random
from array import array

import pytest

from metroflow import backend


@pytest.fixture
def rng():
    return random.Random(1234)


@pytest.fixture(params=backend.available())
def any_backend(request):
    """Run a test under every importable kernel backend, restoring afterwards."""
    previous = backend.kernels.NAME
    backend.select(request.param)
    yield backend.kernels
    backend.select(previous)


def rand_buffer(rng, n, lo=-2.0, hi=2.0):
    return array("d", [rng.uniform(lo, hi) for _ in range(n)])
