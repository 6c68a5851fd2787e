"""Backend selection for the stencil kernels.

The compiled extension is used when it imports; setting ``GEVNET_BACKEND=numpy``
forces the pure numpy fallback.
"""
from __future__ import annotations

import os

import numpy as np

from . import _kernels_py

try:
    from . import _stencil_ext
except ImportError:  # extension not built
    _stencil_ext = None

BACKENDS = ("cython", "numpy")


def available_backends() -> list[str]:
    return [b for b in BACKENDS if b == "numpy" or _stencil_ext is not None]


def _default_backend() -> str:
    want = os.environ.get("GEVNET_BACKEND", "").strip().lower()
    if want == "numpy" or _stencil_ext is None:
        return "numpy"
    return "cython"


_backend = _default_backend()


def get_backend() -> str:
    return _backend


def set_backend(name: str) -> None:
    global _backend
    if name not in available_backends():
        raise ValueError(f"backend {name!r} unavailable; choose from {available_backends()}")
    _backend = name


def _prep(kt, nbr, arr):
    dtype = np.result_type(kt.dtype, arr.dtype)
    return (
        np.ascontiguousarray(kt, dtype=dtype),
        np.ascontiguousarray(nbr, dtype=np.int64),
        np.ascontiguousarray(arr, dtype=dtype),
    )


def stencil_forward(kt, nbr, x, backend: str | None = None) -> np.ndarray:
    """Gather neighbours and contract with per-slot kernels: ``(B, V, C, R)``."""
    kt, nbr, x = _prep(kt, nbr, x)
    if (backend or _backend) == "cython":
        return _stencil_ext.stencil_forward(kt, nbr, x)
    return _kernels_py.stencil_forward(kt, nbr, x)


def stencil_adjoint(kt, nbr, gz, num_src: int, backend: str | None = None) -> np.ndarray:
    """Transpose of :func:`stencil_forward` with respect to its input field."""
    kt, nbr, gz = _prep(kt, nbr, gz)
    if (backend or _backend) == "cython":
        return _stencil_ext.stencil_adjoint(kt, nbr, gz, int(num_src))
    return _kernels_py.stencil_adjoint(kt, nbr, gz, int(num_src))


def nl_forward(a, cs, sn, backend: str | None = None):
    """Fused sample/ReLU/project pass of the regular nonlinearity.

    Returns ``(proj, sum_y, sum_y2)``: per-item sums of ``y``, ``y cos`` and
    ``y sin`` over the ``N`` samples, and per-unit totals over everything.
    """
    dtype = np.result_type(a.dtype, cs.dtype)
    a = np.ascontiguousarray(a, dtype=dtype)
    cs = np.ascontiguousarray(cs, dtype=dtype)
    sn = np.ascontiguousarray(sn, dtype=dtype)
    if (backend or _backend) == "cython":
        return _stencil_ext.nl_forward(a, cs, sn)
    return _kernels_py.nl_forward(a, cs, sn)


def nl_backward(a, cs, sn, gd, c0, c1, mu, backend: str | None = None):
    """Input-coefficient gradient of the fused nonlinearity pass."""
    dtype = np.result_type(a.dtype, cs.dtype)
    args = [np.ascontiguousarray(t, dtype=dtype) for t in (a, cs, sn, gd, c0, c1, mu)]
    if (backend or _backend) == "cython":
        return _stencil_ext.nl_backward(*args)
    return _kernels_py.nl_backward(*args)
