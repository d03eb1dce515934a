"""Hot-loop kernel backend selection.

The compiled extension (``phaselab.kernels._fused``, built from Cython) is
preferred when importable; otherwise the pure numpy fallback is used. Set
``PHASELAB_KERNELS=python`` or ``PHASELAB_KERNELS=compiled`` to force one.
Matrix multiplies always go through numpy's BLAS; these kernels cover the
fused elementwise/reduction work around them.
"""

import os

from . import pure

_requested = os.environ.get("PHASELAB_KERNELS", "auto").lower()

if _requested not in ("auto", "python", "compiled"):
    raise ValueError(
        f"PHASELAB_KERNELS must be auto, python, or compiled; got {_requested!r}"
    )

if _requested == "python":
    impl = pure
else:
    try:
        from . import _fused as impl  # type: ignore[no-redef]
    except ImportError:
        if _requested == "compiled":
            raise
        impl = pure

BACKEND = impl.NAME

layernorm_forward = impl.layernorm_forward
layernorm_backward = impl.layernorm_backward
causal_softmax = impl.causal_softmax
causal_softmax_backward = impl.causal_softmax_backward
softmax_xent = impl.softmax_xent
silu_mul_forward = impl.silu_mul_forward
silu_mul_backward = impl.silu_mul_backward
adamw_update = impl.adamw_update
