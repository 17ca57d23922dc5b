"""Kernel backend selection.

The hot loops (voxelization, marching cubes, flood fill) exist twice: a
Cython extension (``voxrec.kernels._compiled``) and a pure numpy/scipy
fallback (``voxrec.kernels._python``).  The compiled one is preferred when
importable; set ``VOXREC_KERNELS=python`` or ``VOXREC_KERNELS=compiled`` to
force a backend (``compiled`` raises if the extension is missing).

Both backends implement the same three functions with identical outputs:
``ray_parity_voxelize``, ``marching_cubes``, ``flood_fill``.
"""

import os


def _select():
    choice = os.environ.get("VOXREC_KERNELS", "auto")
    if choice not in ("auto", "compiled", "python"):
        raise ValueError(
            f"VOXREC_KERNELS must be auto, compiled or python, got {choice!r}"
        )
    if choice in ("auto", "compiled"):
        try:
            from . import _compiled

            return _compiled
        except ImportError:
            if choice == "compiled":
                raise
    from . import _python

    return _python


_ACTIVE = _select()
USING_COMPILED = _ACTIVE.BACKEND_NAME == "compiled"


def active_kernels():
    """The backend module chosen at import time."""
    return _ACTIVE
