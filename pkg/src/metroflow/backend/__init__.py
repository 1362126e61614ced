"""Numeric kernel backend.

Two interchangeable implementations of the same flat-buffer kernel API:
``_core`` (Cython + BLAS, built at install time) and ``pure`` (stdlib only).
The compiled one is picked automatically when importable; set
``METROFLOW_BACKEND=pure|compiled`` to force a choice, or call ``select()``
at runtime. ``kernels`` always points at the active implementation.
"""

import os
from array import array

# Pin BLAS/OpenMP thread pools before any BLAS-backed library loads: runs
# stay byte-reproducible and single-core. Pre-set env vars take precedence.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

from . import pure

try:
    from . import _core
except ImportError:
    _core = None

kernels = pure


def available():
    """Names of importable backends, preferred first."""
    return (["compiled"] if _core is not None else []) + ["pure"]


def select(name):
    """Switch the active backend ('pure', 'compiled' or 'auto')."""
    global kernels
    if name == "auto":
        name = "compiled" if _core is not None else "pure"
    if name == "pure":
        kernels = pure
    elif name == "compiled":
        if _core is None:
            raise RuntimeError(
                "compiled backend unavailable; build the extension "
                "(pip install -e .) or set METROFLOW_BACKEND=pure"
            )
        kernels = _core
    else:
        raise ValueError(f"unknown backend {name!r}")
    return kernels


if _core is not None:
    alloc = _core.alloc
    alloc_raw = _core.alloc_raw
else:

    def alloc(n):
        """A zeroed flat float64 buffer of length n."""
        return array("d", bytes(8 * n))

    # without the extension there is no cheap uninitialized allocation
    alloc_raw = alloc


select(os.environ.get("METROFLOW_BACKEND", "auto"))
