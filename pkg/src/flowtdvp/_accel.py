"""Switch between the numba kernels and the pure-numpy fallback.

Set ``FLOWTDVP_NUMBA=0`` in the environment before import to force the numpy
path. The choice can also be flipped at runtime with :func:`set_backend`,
which is what the benchmark and the cross-backend tests do.
"""
import os

try:
    import numba  # noqa: F401

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

_use_numba = HAVE_NUMBA and os.environ.get("FLOWTDVP_NUMBA", "1").lower() not in ("0", "false", "no", "off")


def optional_njit(*args, **kwargs):
    """``numba.njit`` when numba is importable, otherwise the identity decorator."""

    def decorator(func):
        if HAVE_NUMBA:
            from numba import njit

            return njit(*args, **kwargs)(func)
        return func

    return decorator


def use_numba():
    return _use_numba


def set_backend(name):
    """Select ``"numba"`` or ``"numpy"``; returns the previous backend name."""
    global _use_numba
    prev = backend()
    if name == "numba":
        if not HAVE_NUMBA:
            raise RuntimeError("numba is not installed")
        _use_numba = True
    elif name == "numpy":
        _use_numba = False
    else:
        raise ValueError(f"unknown backend {name!r}")
    return prev


def backend():
    return "numba" if _use_numba else "numpy"
