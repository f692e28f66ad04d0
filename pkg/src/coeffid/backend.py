"""Kernel backend selection: compiled extension if built, numpy otherwise.

Set COEFFID_BACKEND=python to force the numpy fallback (used by the kernel
benchmark to compare both implementations).
"""

import os

if os.environ.get("COEFFID_BACKEND", "").lower() in ("python", "numpy"):
    from . import _kernels_py as _impl

    BACKEND = "numpy"
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:
        from . import _kernels_py as _impl

        BACKEND = "numpy"

csr_matvec = _impl.csr_matvec
tridiag_solve = _impl.tridiag_solve
