"""Hot numerical kernels with a compiled backend and a numpy fallback.

The compiled Cython module is used when it was built (``pip install -e .``
or ``python setup.py build_ext --inplace``).  Setting ``MOPS_PURE_PYTHON=1``
forces the fallback, which is also what ``BACKEND`` reports when the
extension is missing.
"""

from __future__ import annotations

import os

from . import _pykernels as py

BACKEND = "python"
compiled = None

if os.environ.get("MOPS_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as compiled  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        compiled = None

_impl = compiled if compiled is not None else py

project_simplex = _impl.project_simplex
min_norm_pg = _impl.min_norm_pg

__all__ = ["BACKEND", "compiled", "py", "project_simplex", "min_norm_pg"]
