"""Fused numeric kernels with a compiled core and a numpy fallback.

The compiled extension is picked at import when it was built; set
``EVIGRID_KERNELS=python`` to force the fallback. A few kernels stay on numpy
even with the extension loaded because vectorised exp/tanh beat the scalar
loops at model sizes (see benchmarks/bench_kernels.py).
"""

from __future__ import annotations

import os

from . import _pykernels

_requested = os.environ.get("EVIGRID_KERNELS", "auto").lower()

impl = _pykernels
if _requested != "python":
    try:
        from . import _ckernels as impl  # type: ignore[no-redef]
    except ImportError:
        if _requested == "compiled":
            raise
        impl = _pykernels

BACKEND = impl.BACKEND
NUMPY_PREFERRED = ("attention_backward", "gelu_forward", "log_softmax_forward", "log_softmax_backward")

attention_forward = impl.attention_forward
attention_backward = _pykernels.attention_backward
layer_norm_forward = impl.layer_norm_forward
layer_norm_backward = impl.layer_norm_backward
gelu_forward = _pykernels.gelu_forward
gelu_backward = impl.gelu_backward
log_softmax_forward = _pykernels.log_softmax_forward
log_softmax_backward = _pykernels.log_softmax_backward
bernoulli_loglik = impl.bernoulli_loglik
best_interval = impl.best_interval
greedy_match = impl.greedy_match

__all__ = [
    "BACKEND",
    "attention_backward",
    "attention_forward",
    "bernoulli_loglik",
    "best_interval",
    "gelu_backward",
    "gelu_forward",
    "greedy_match",
    "layer_norm_backward",
    "layer_norm_forward",
    "log_softmax_backward",
    "log_softmax_forward",
]
