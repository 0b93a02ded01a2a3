"""Hot numeric kernels with two interchangeable backends.

The backend is picked once at import from the ``REDCOUNT_KERNELS`` environment
variable (``numba`` or ``numpy``). When the variable is unset, numba is used if
it imports cleanly, otherwise the numpy fallback. :func:`set_backend` switches
at runtime, which the tests and the benchmark script rely on.
"""

import importlib
import logging
import os
from types import ModuleType

log = logging.getLogger(__name__)

ENV_VAR = "REDCOUNT_KERNELS"
BACKENDS = ("numba", "numpy")

_active: ModuleType | None = None


def load_backend(name: str) -> ModuleType:
    if name not in BACKENDS:
        raise ValueError(f"unknown kernel backend {name!r}; choose from {BACKENDS}")
    return importlib.import_module(f"{__name__}.{name}_impl")


def numba_available() -> bool:
    try:
        import numba  # noqa: F401
    except ImportError:
        return False
    return True


def _default_name() -> str:
    requested = os.environ.get(ENV_VAR, "").strip().lower()
    if requested:
        return requested
    return "numba" if numba_available() else "numpy"


def set_backend(name: str) -> ModuleType:
    global _active
    _active = load_backend(name)
    log.debug("kernel backend: %s", _active.NAME)
    return _active


def get_backend() -> ModuleType:
    if _active is None:
        return set_backend(_default_name())
    return _active


def backend_name() -> str:
    return get_backend().NAME
