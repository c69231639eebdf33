"""Numeric kernel backend selection.

The package ships two interchangeable implementations of its hot kernels:
a compiled Cython extension (``spacebond._fastcore``) and a NumPy
reference (``spacebond.kernels.pyref``).  Selection happens once at
import:

* ``SPACEBOND_KERNELS=auto`` (default): compiled if importable, else NumPy.
* ``SPACEBOND_KERNELS=fast``: compiled, raise if unavailable.
* ``SPACEBOND_KERNELS=py``: NumPy reference.

``BACKEND`` records the active choice.
"""
import os

_choice = os.environ.get("SPACEBOND_KERNELS", "auto").lower()
if _choice not in ("auto", "fast", "py"):
    raise RuntimeError(
        f"SPACEBOND_KERNELS must be one of auto, fast, py; got {_choice!r}"
    )

if _choice == "py":
    from spacebond.kernels import pyref as _impl

    BACKEND = "py"
else:
    try:
        from spacebond import _fastcore as _impl

        BACKEND = "fast"
    except ImportError:
        if _choice == "fast":
            raise
        from spacebond.kernels import pyref as _impl

        BACKEND = "py"

softmax_rows = _impl.softmax_rows
softmax_xent_rows = _impl.softmax_xent_rows
gelu = _impl.gelu
gelu_grad = _impl.gelu_grad
normalize_rows_fwd = _impl.normalize_rows_fwd
normalize_rows_bwd = _impl.normalize_rows_bwd
adam_update = _impl.adam_update

__all__ = [
    "BACKEND",
    "softmax_rows",
    "softmax_xent_rows",
    "gelu",
    "gelu_grad",
    "normalize_rows_fwd",
    "normalize_rows_bwd",
    "adam_update",
]
