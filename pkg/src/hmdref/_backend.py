"""Kernel backend selection.

Hot loops exist in two flavours: a numba ``@njit`` kernel and a pure-numpy
fallback. Which one runs is decided by the ``HMDREF_NO_NUMBA`` environment
variable (any non-empty value other than ``0`` disables numba). Setting
``NUMBA_DISABLE_JIT`` has the same effect.
"""

from __future__ import annotations

import contextlib
import os
from typing import Callable, Iterator

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None
    HAVE_NUMBA = False


def _env_disabled() -> bool:
    for var in ("HMDREF_NO_NUMBA", "NUMBA_DISABLE_JIT"):
        if os.environ.get(var, "") not in ("", "0"):
            return True
    return False


_use_numba = HAVE_NUMBA and not _env_disabled()


def use_numba() -> bool:
    return _use_numba


def backend_name() -> str:
    return "numba" if _use_numba else "numpy"


def set_backend(name: str) -> None:
    global _use_numba
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not installed")
    _use_numba = name == "numba"


@contextlib.contextmanager
def backend(name: str) -> Iterator[None]:
    """Temporarily switch backend (used by tests and the benchmark)."""
    prev = backend_name()
    set_backend(name)
    try:
        yield
    finally:
        set_backend(prev)


def njit(fn: Callable) -> Callable | None:
    """Compile ``fn`` with numba, or return None when numba is missing.

    Kernels are serial and release the GIL so the TCP service can run
    several registrations in threads.
    """
    if not HAVE_NUMBA:
        return None
    return numba.njit(cache=True, nogil=True)(fn)
