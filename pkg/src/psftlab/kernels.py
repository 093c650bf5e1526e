"""Kernel backend selection.

The compiled ``_ckernels`` extension is used when it was built; otherwise the
numpy reference in ``_pykernels`` is used. Set ``PSFTLAB_KERNELS=python`` to
force the fallback (``cython`` to require the extension).
"""

import os

from psftlab import _pykernels

_requested = os.environ.get("PSFTLAB_KERNELS", "auto").lower()

if _requested == "python":
    impl = _pykernels
else:
    try:
        from psftlab import _ckernels as impl
    except ImportError:
        if _requested == "cython":
            raise
        impl = _pykernels

BACKEND = "python" if impl is _pykernels else "cython"

log_softmax = impl.log_softmax
log_softmax_backward = impl.log_softmax_backward
softmax = impl.softmax
softmax_backward = impl.softmax_backward
row_entropy = impl.row_entropy
layer_norm = impl.layer_norm
layer_norm_backward = impl.layer_norm_backward
categorical = impl.categorical
adam_update = impl.adam_update
gelu = impl.gelu
gelu_backward = impl.gelu_backward


def available_backends():
    out = {"python": _pykernels}
    try:
        from psftlab import _ckernels
    except ImportError:
        pass
    else:
        out["cython"] = _ckernels
    return out
