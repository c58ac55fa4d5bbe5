"""Kernel backend selection.

The hot inner loops (convolutions, pooling, transposed convolutions, the
boundary distance transform) exist twice: as numba-jitted loops and as a
pure-numpy fallback. The active backend is picked at import time from the
``DENDRITESEG_BACKEND`` environment variable ("numba" or "numpy"); when
unset, numba is used if it imports. ``set_backend`` switches at runtime and
is what the tests and the benchmark use to compare both paths.

Within one backend every kernel is bitwise deterministic for a fixed input.
Across backends results agree to float tolerance, not bitwise, because the
numpy path accumulates through BLAS in a different order.
"""

import os

try:
    import numba  # noqa: F401

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

_VALID = ("numba", "numpy")


def _initial_backend() -> str:
    env = os.environ.get("DENDRITESEG_BACKEND", "").strip().lower()
    if env in _VALID:
        if env == "numba" and not HAS_NUMBA:
            raise ImportError("DENDRITESEG_BACKEND=numba but numba is not importable")
        return env
    return "numba" if HAS_NUMBA else "numpy"


_active = _initial_backend()


def active_backend() -> str:
    return _active


def set_backend(name: str) -> None:
    global _active
    if name not in _VALID:
        raise ValueError(f"unknown backend {name!r}, expected one of {_VALID}")
    if name == "numba" and not HAS_NUMBA:
        raise ImportError("numba backend requested but numba is not importable")
    _active = name
