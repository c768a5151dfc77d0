"""Kernel dispatch: compiled Cython loops when built, pure Python otherwise.

Set ``SSMLAB_PURE_PYTHON=1`` to force the fallback (used by the benchmark and
by the equivalence tests).
"""
import os

from ssmlab import _pykernels as python_impl

try:
    from ssmlab import _ckernels as compiled_impl
except ImportError:  # extension not built
    compiled_impl = None

if compiled_impl is not None and not os.environ.get("SSMLAB_PURE_PYTHON"):
    _impl = compiled_impl
    BACKEND = "cython"
else:
    _impl = python_impl
    BACKEND = "python"

kalman_scalar = _impl.kalman_scalar
systematic_resample = _impl.systematic_resample
hmm_forward = _impl.hmm_forward

__all__ = ["BACKEND", "kalman_scalar", "systematic_resample", "hmm_forward",
           "python_impl", "compiled_impl"]
