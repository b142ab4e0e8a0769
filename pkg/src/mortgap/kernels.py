"""Kernel backend selection.

The compiled Cython extension is preferred; the NumPy implementation in
``_kernels_py`` is used when it cannot be imported or when the environment
variable ``MORTGAP_PURE_PYTHON`` is set to ``1``.
"""

import os

from . import _kernels_py

if os.environ.get("MORTGAP_PURE_PYTHON") == "1":
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"

log_ive = _impl.log_ive
log_poisson = _impl.log_poisson
skellam_logpmf_grad = _impl.skellam_logpmf_grad
bp_inner = _impl.bp_inner

__all__ = ["BACKEND", "log_ive", "log_poisson", "skellam_logpmf_grad", "bp_inner"]
