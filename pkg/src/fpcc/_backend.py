"""Pick the compiled kernels when available, else the numpy fallback.

Set ``FPCC_PURE_PYTHON=1`` to force the fallback (used by the benchmark and
the cross-backend tests).
"""
import os

from . import _fallback

BACKEND = "python"
lookup_keys = _fallback.lookup_keys
ldpc_sum_product = _fallback.ldpc_sum_product

if os.environ.get("FPCC_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _core
    except ImportError:
        _core = None
    if _core is not None:
        BACKEND = "compiled"
        lookup_keys = _core.lookup_keys
        ldpc_sum_product = _core.ldpc_sum_product
