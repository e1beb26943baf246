"""Backend selection for the monotone-integral kernels.

The compiled extension is used when it imports; setting
``KRFLOW_PURE_PYTHON=1`` forces the NumPy fallback.
"""

import os

from . import _kernels_py

EXP, SQUARE = _kernels_py.EXP, _kernels_py.SQUARE

_compiled = None
if os.environ.get("KRFLOW_PURE_PYTHON") != "1":
    try:
        from . import _kernels as _compiled
    except ImportError:
        _compiled = None

BACKENDS = {"python": _kernels_py}
if _compiled is not None:
    BACKENDS["compiled"] = _compiled

_active = _compiled if _compiled is not None else _kernels_py
BACKEND = "compiled" if _compiled is not None else "python"


def set_backend(name: str) -> None:
    global _active, BACKEND
    if name not in BACKENDS:
        raise ValueError(f"backend {name!r} unavailable; have {sorted(BACKENDS)}")
    _active = BACKENDS[name]
    BACKEND = name


def integrate_diag(xs, W, nodes, weights, form, eps):
    return _active.integrate_diag(xs, W, nodes, weights, form, eps)


def integral_only(xs, W, nodes, weights, form, eps):
    return _active.integral_only(xs, W, nodes, weights, form, eps)


def invert_diag(target, W, nodes, weights, form, eps, maxiter=200):
    return _active.invert_diag(target, W, nodes, weights, form, eps, maxiter)

legendre_table = _kernels_py.legendre_table
