"""Backend selection for the LSTM recurrence kernels.

The compiled extension is used when it imports; setting the environment
variable ``NUMUNITS_PURE_PYTHON=1`` forces the NumPy fallback.
"""
import os

from . import _reference

BACKEND = "python"
lstm_forward = _reference.lstm_forward
lstm_backward = _reference.lstm_backward

if not os.environ.get("NUMUNITS_PURE_PYTHON"):
    try:
        from . import _kernels
    except ImportError:  # extension not built
        pass
    else:
        BACKEND = "cython"
        lstm_forward = _kernels.lstm_forward
        lstm_backward = _kernels.lstm_backward


def backends() -> dict:
    """Every importable backend by name."""
    out = {"python": _reference}
    try:
        from . import _kernels
        out["cython"] = _kernels
    except ImportError:
        pass
    return out
