"""Kernel backend selection.

The compiled extension is used when it was built; otherwise (or when
``MRP_PURE_PYTHON`` is set to a non-empty value other than ``0``) the NumPy
fallback is used.  ``BACKEND`` names the active implementation.
"""

import os

import numpy as np

from . import _kernels_py

_force_py = os.environ.get("MRP_PURE_PYTHON", "") not in ("", "0")

try:
    if _force_py:
        raise ImportError("pure-python backend requested")
    from . import _kernels as _impl

    BACKEND = "cython"
except ImportError:
    _impl = _kernels_py
    BACKEND = "python"


def _prep(base, flat_idx, mult, beta):
    return (
        np.ascontiguousarray(base, dtype=np.float64),
        np.ascontiguousarray(flat_idx, dtype=np.int64),
        np.ascontiguousarray(mult, dtype=np.float64),
        np.ascontiguousarray(beta, dtype=np.float64),
    )


def linear_predictor(base, flat_idx, mult, beta, impl=None):
    impl = impl or _impl
    return impl.linear_predictor(*_prep(base, flat_idx, mult, beta))


def loglik_grad(base, flat_idx, mult, beta, successes, trials, impl=None):
    impl = impl or _impl
    return impl.loglik_grad(
        *_prep(base, flat_idx, mult, beta),
        np.ascontiguousarray(successes, dtype=np.int64),
        np.ascontiguousarray(trials, dtype=np.int64),
    )


def available_backends():
    out = {"python": _kernels_py}
    try:
        from . import _kernels

        out["cython"] = _kernels
    except ImportError:
        pass
    return out
