"""Backend selection for the hot kernels.

``MFNERF_DISABLE_NUMBA=1`` selects the pure-numpy kernels (also used when numba
is not importable). ``MF_THREADS`` caps numba worker threads; 0 means the
serial deterministic path.
"""

import contextlib
import os

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("MFNERF_DISABLE_NUMBA", "0") not in ("1", "true", "yes")


def mf_threads() -> int:
    try:
        return max(0, int(os.environ.get("MF_THREADS", "0")))
    except ValueError:
        return 0


def njit(*args, **kwargs):
    """``numba.njit`` when available, identity otherwise (never called in that case)."""
    if HAVE_NUMBA:
        return numba.njit(*args, cache=True, **kwargs)
    if args and callable(args[0]):
        return args[0]
    return lambda f: f


@contextlib.contextmanager
def flush_denormals():
    """Run with the CPU's flush-to-zero / denormals-are-zero modes enabled.

    Saturated sigmoids and fully absorbed samples produce subnormal gradients;
    BLAS on subnormal operands is ~100x slower.
    """
    try:
        import daz
    except ImportError:  # pragma: no cover
        yield
        return
    daz.set_ftz()
    daz.set_daz()
    try:
        yield
    finally:
        daz.unset_ftz()
        daz.unset_daz()
