"""Numba dispatch switch.

Set ``GSN_DISABLE_NUMBA=1`` before import to force the pure-numpy kernels.
Both kernel families are always importable so they can be compared directly.
"""

import os

try:
    import numba
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda f: f


USE_NUMBA = HAS_NUMBA and os.environ.get("GSN_DISABLE_NUMBA", "0").lower() not in ("1", "true", "yes")


def set_threads(n: int | None) -> None:
    """Cap numba and BLAS worker threads for the whole process."""
    if n is None or n <= 0:
        return
    if HAS_NUMBA:
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(n)
    except ImportError:  # pragma: no cover
        pass


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"
