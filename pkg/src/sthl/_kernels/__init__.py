"""Hot-kernel backend selection.

The compiled core is used when importable. Set ``STHL_BACKEND=python`` to
force the numpy fallback, or ``STHL_BACKEND=compiled`` to fail loudly when
the extension is missing.
"""
import functools
import os

import numpy as np

from . import _reference

try:
    from . import _core
except ImportError:  # extension not built
    _core = None

KERNEL_NAMES = (
    "reconstruct_forward",
    "reconstruct_backward",
    "aggregate_forward",
    "aggregate_backward",
    "attend_forward",
    "attend_backward",
)


def available_backends():
    return ["python"] + (["compiled"] if _core is not None else [])


def get_backend(name):
    if name == "python":
        return _reference
    if name == "compiled":
        if _core is None:
            raise ImportError("compiled kernel core sthl._kernels._core is not built")
        return _core
    raise ValueError(f"unknown kernel backend {name!r}")


def _select():
    requested = os.environ.get("STHL_BACKEND", "auto").lower()
    if requested == "auto":
        return "compiled" if _core is not None else "python"
    get_backend(requested)
    return requested


def _contiguous(fn):
    @functools.wraps(fn)
    def wrapper(*args):
        return fn(*(np.ascontiguousarray(a) if isinstance(a, np.ndarray) else a
                    for a in args))
    return wrapper


def _bind(name):
    impl = get_backend(name)
    if impl is _reference:
        return impl
    return type("CompiledKernels", (), {
        k: staticmethod(_contiguous(getattr(impl, k))) for k in KERNEL_NAMES})


def kernels(name):
    """Kernel namespace for ``name`` with argument coercion applied."""
    return _bind(name)


def use_backend(name):
    """Rebind the module-level kernels; callers resolve them at call time."""
    global BACKEND
    impl = _bind(name)
    g = globals()
    for k in KERNEL_NAMES:
        g[k] = getattr(impl, k)
    BACKEND = name


BACKEND = None
use_backend(_select())
