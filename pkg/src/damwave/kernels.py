"""Kernel dispatch: compiled OpenMP extension if importable, numpy otherwise.

Set ``DAMWAVE_PURE_PYTHON=1`` to force the numpy backend at import, or call
:func:`use_backend` at runtime.  Callers must go through this module's
attributes (``kernels.csr_matvec``), never ``from kernels import ...``, so a
backend switch takes effect everywhere.
"""
import os

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_NAMES = ("element_means", "depth_coefficients", "gather_assemble", "csr_matvec", "dot", "lincomb3")

BACKEND = "python"
_threads = 1


def available_backends():
    return ["cython", "python"] if _ckernels is not None else ["python"]


def backend_module(name):
    if name == "cython":
        if _ckernels is None:
            raise RuntimeError("compiled kernels are not built")
        return _ckernels
    if name == "python":
        return _pykernels
    raise ValueError(f"unknown backend {name!r}")


def use_backend(name):
    global BACKEND
    mod = backend_module(name)
    g = globals()
    for fn in _NAMES:
        g[fn] = getattr(mod, fn)
    BACKEND = name


def set_num_threads(n: int) -> None:
    global _threads
    if n < 1:
        raise ValueError("thread count must be positive")
    _threads = int(n)


def get_num_threads() -> int:
    return _threads


use_backend("python" if (_ckernels is None or os.environ.get("DAMWAVE_PURE_PYTHON")) else "cython")
