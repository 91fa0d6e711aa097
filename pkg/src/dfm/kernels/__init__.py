"""Hot kernels with a compiled backend and a numpy fallback.

The compiled extension (``_ckernels``) is used when it was built and
``DFM_PURE_PYTHON`` is not set to a truthy value. ``BACKEND`` names the
active implementation.
"""

import os

from . import _pykernels as python

compiled = None
if os.environ.get("DFM_PURE_PYTHON", "").lower() not in ("1", "true", "yes"):
    try:
        from . import _ckernels as compiled
    except ImportError:  # extension not built
        compiled = None

_impl = compiled if compiled is not None else python
BACKEND = "cython" if compiled is not None else "python"

dense_rows = _impl.dense_rows
adaln_rows = _impl.adaln_rows
pair_sum_l1 = _impl.pair_sum_l1
pair_sum_euclid = _impl.pair_sum_euclid
cross_sum_euclid = _impl.cross_sum_euclid

__all__ = [
    "BACKEND",
    "adaln_rows",
    "compiled",
    "cross_sum_euclid",
    "dense_rows",
    "pair_sum_euclid",
    "pair_sum_l1",
    "python",
]
