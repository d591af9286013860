"""Hot numerical kernels with a compiled backend and a numpy fallback.

The compiled extension is used when importable; set ``NMROM_KERNELS=python``
to force the fallback. ``BACKEND`` names the active choice and ``backends()``
exposes both (when built) for cross-checking and benchmarks.
"""

import os

from . import _fallback

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_impl = _fallback
if _ckernels is not None and os.environ.get("NMROM_KERNELS", "").lower() != "python":
    _impl = _ckernels

BACKEND = "cython" if _impl is _ckernels else "python"

stencil_eval = _impl.stencil_eval
stencil_rhs = _impl.stencil_rhs
masked_decode = _impl.masked_decode
gather_rows = _impl.gather_rows


def backends():
    """Mapping of backend name to kernel module for every available backend."""
    out = {"python": _fallback}
    if _ckernels is not None:
        out["cython"] = _ckernels
    return out
