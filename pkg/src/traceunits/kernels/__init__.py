"""Backend selection for the per-step kernels.

The compiled extension is preferred when present; the numpy reference backend
is the fallback. ``TRACEUNITS_BACKEND`` forces the choice: ``c`` (fail if the
extension is missing), ``py``, or ``auto`` (default).
"""

import os

_choice = os.environ.get("TRACEUNITS_BACKEND", "auto")

if _choice not in ("auto", "c", "py"):
    raise RuntimeError(f"TRACEUNITS_BACKEND must be auto, c, or py, got {_choice!r}")

if _choice == "py":
    from . import pyref as _impl
else:
    try:
        from . import _speedups as _impl  # type: ignore[attr-defined]
    except ImportError:
        if _choice == "c":
            raise
        from . import pyref as _impl

BACKEND = _impl.BACKEND_NAME

rtu_plain_step = _impl.rtu_plain_step
rtu_fused_step = _impl.rtu_fused_step
blockdiag_fused_step = _impl.blockdiag_fused_step
rtu_window_forward = _impl.rtu_window_forward
rtu_window_backward = _impl.rtu_window_backward
array_probe_sum = _impl.array_probe_sum
adam_array_step = _impl.adam_array_step
