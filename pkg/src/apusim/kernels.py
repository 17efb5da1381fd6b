"""Hot-loop kernels, compiled when available.

The Cython extension ``apusim._ckernels`` is used if it was built; otherwise
the numpy fallback in ``apusim._pykernels`` is loaded.  Setting
``APUSIM_PURE_PYTHON=1`` forces the fallback.
"""
import os

from . import _pykernels

if os.environ.get("APUSIM_PURE_PYTHON", "") not in ("", "0"):
    _impl = _pykernels
else:
    try:
        from . import _ckernels as _impl
    except ImportError:  # extension not built
        _impl = _pykernels

BACKEND = _impl.BACKEND
tree_sum_rows = _impl.tree_sum_rows
tree_matvec = _impl.tree_matvec
temporal_matvec = _impl.temporal_matvec
requantize = _impl.requantize
match_cycles = _impl.match_cycles


def backends():
    """Return every importable kernel module, fallback first."""
    mods = [_pykernels]
    try:
        from . import _ckernels

        mods.append(_ckernels)
    except ImportError:
        pass
    return mods
