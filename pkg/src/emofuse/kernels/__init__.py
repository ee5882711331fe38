"""Backend dispatch for the hot numeric kernels.

Two interchangeable implementations exist: numba-jitted loops
(`numba_impl`) and pure NumPy (`numpy_impl`). The EMOFUSE_NUMBA
environment variable picks one at import time:

  unset      -> numba when importable, NumPy otherwise
  1/true     -> numba, raising if it cannot be imported
  0/false    -> pure NumPy

`BACKEND` names the active implementation. benchmarks/bench_kernels.py
compares the two.
"""

import os

_FLAG = os.environ.get("EMOFUSE_NUMBA", "").strip().lower()

if _FLAG in ("0", "false", "no", "numpy"):
    from . import numpy_impl as _impl

    BACKEND = "numpy"
else:
    try:
        from . import numba_impl as _impl

        BACKEND = "numba"
    except ImportError:
        if _FLAG in ("1", "true", "yes", "numba"):
            raise
        from . import numpy_impl as _impl

        BACKEND = "numpy"

adapter_forward = _impl.adapter_forward
adapter_backward = _impl.adapter_backward
mlp2_forward = _impl.mlp2_forward
mlp2_backward = _impl.mlp2_backward
softmax_rows = _impl.softmax_rows
softmax_xent = _impl.softmax_xent
adam_update = _impl.adam_update

__all__ = [
    "BACKEND",
    "adapter_forward",
    "adapter_backward",
    "mlp2_forward",
    "mlp2_backward",
    "softmax_rows",
    "softmax_xent",
    "adam_update",
]
