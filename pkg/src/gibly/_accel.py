"""Backend selection for the hot kernels.

Every hot loop in the package exists twice: a numba ``@njit`` version and a
vectorised pure-numpy version. The numba path is used when numba imports and
``GIBLY_BACKEND`` is not set to ``numpy``. The choice can also be changed at
runtime with :func:`set_backend`, which is what the backend benchmark does.
"""

import os
import warnings
from concurrent.futures import ThreadPoolExecutor

try:
    import numba

    HAVE_NUMBA = True
    # Skip numba's TBB probe, which warns on every start when the installed TBB
    # is too old. Override with NUMBA_THREADING_LAYER.
    if "NUMBA_THREADING_LAYER" not in os.environ:
        numba.config.THREADING_LAYER = "omp"
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None
    HAVE_NUMBA = False

BACKENDS = ("numba", "numpy")

_state = {"backend": None, "workers": 1}


def _initial_backend():
    requested = os.environ.get("GIBLY_BACKEND", "numba").strip().lower()
    if requested not in BACKENDS:
        warnings.warn(f"unknown GIBLY_BACKEND={requested!r}, using numba", stacklevel=2)
        requested = "numba"
    if requested == "numba" and not HAVE_NUMBA:
        warnings.warn("numba not found, falling back to the numpy backend", stacklevel=2)
        requested = "numpy"
    return requested


_state["backend"] = _initial_backend()


def backend():
    return _state["backend"]


def use_numba():
    return _state["backend"] == "numba"


def set_backend(name):
    """Switch the active backend; returns the previous one."""
    name = name.lower()
    if name not in BACKENDS:
        raise ValueError(f"backend must be one of {BACKENDS}, got {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba backend requested but numba is not installed")
    previous = _state["backend"]
    _state["backend"] = name
    return previous


def workers():
    return _state["workers"]


def set_workers(n):
    """Set the worker count used by parallel loops (numba threads, numpy chunk pool).

    Results never depend on this value: every parallel loop writes disjoint
    rows and reductions run afterwards in ascending index order.
    """
    n = int(n)
    if n < 1:
        raise ValueError("workers must be >= 1")
    _state["workers"] = n
    if HAVE_NUMBA:
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def njit(*args, **kwargs):
    """``numba.njit`` with on-disk caching; identity decorator without numba."""
    if not HAVE_NUMBA:
        if args and callable(args[0]):
            return args[0]
        return lambda fn: fn
    kwargs.setdefault("cache", True)
    return numba.njit(*args, **kwargs)


if HAVE_NUMBA:
    prange = numba.prange
else:  # pragma: no cover
    prange = range


def map_chunks(fn, chunks):
    """Apply ``fn`` to each chunk, in a thread pool when more than one worker is set.

    Output order always follows input order.
    """
    chunks = list(chunks)
    n = _state["workers"]
    if n <= 1 or len(chunks) <= 1:
        return [fn(c) for c in chunks]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, chunks))
