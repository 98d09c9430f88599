"""Hot-kernel backend selection.

The compiled Cython extension is preferred when present; the pure-numpy
fallback has identical semantics.  Override with STACKELMAC_BACKEND=py
(force fallback) or =cy (require the extension, raise if missing).
"""

import os

from . import pure

_requested = os.environ.get("STACKELMAC_BACKEND", "").strip().lower()
if _requested not in ("", "py", "cy"):
    raise RuntimeError(f"STACKELMAC_BACKEND must be 'py' or 'cy', got {_requested!r}")

if _requested == "py":
    _impl = pure
    BACKEND = "py"
else:
    try:
        from . import _cyker as _impl
        BACKEND = "cy"
    except ImportError:
        if _requested == "cy":
            raise
        _impl = pure
        BACKEND = "py"

attention_forward = _impl.attention_forward
attention_backward = _impl.attention_backward
potential_scan = _impl.potential_scan
ne_scan = _impl.ne_scan

__all__ = ["BACKEND", "attention_forward", "attention_backward",
           "potential_scan", "ne_scan", "pure"]
