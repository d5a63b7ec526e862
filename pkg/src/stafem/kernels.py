"""
Hot kernels with a compiled implementation and a pure Python fallback.

The compiled extension is used when it was built and importable.  Setting
the environment variable ``STAFEM_PURE_PYTHON=1`` forces the fallback.
``BACKEND`` names the implementation in use.
"""

import os

from stafem import _pykernels

if os.environ.get("STAFEM_PURE_PYTHON", "") not in ("", "0"):
    _impl = _pykernels
else:
    try:
        from stafem import _ckernels as _impl
    except ImportError:
        _impl = _pykernels

BACKEND = "compiled" if _impl is not _pykernels else "python"

pcg_jacobi = _impl.pcg_jacobi
locate_points = _impl.locate_points
