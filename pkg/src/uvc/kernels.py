"""Backend selection for the hot loops.

The compiled extension is used when it imports; otherwise the numpy/pure
Python fallback takes over. Setting ``UVC_PURE_PYTHON=1`` forces the fallback.
"""

import os

from uvc import _fallback

BACKEND = "python"

if os.environ.get("UVC_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from uvc import _kernels as _impl

        BACKEND = "compiled"
    except ImportError:  # extension not built
        _impl = _fallback
else:
    _impl = _fallback

lift_forward = _impl.lift_forward
lift_inverse = _impl.lift_inverse
error_integrals = _impl.error_integrals
ArithEncoder = _impl.ArithEncoder
ArithDecoder = _impl.ArithDecoder


def backends():
    """Return ``{name: module}`` for every importable backend."""
    found = {"python": _fallback}
    try:
        from uvc import _kernels

        found["compiled"] = _kernels
    except ImportError:
        pass
    return found
