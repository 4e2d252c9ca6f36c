"""Structured pruning of a toy Conformer encoder with learnable binary masks.

The package trains retain/prune gates over attention heads, FFN channels,
convolution modules, and hidden dimensions under a Lagrangian sparsity
budget, distills layerwise hidden states from the dense teacher, and
finally slices the learned masks into a physically smaller model.

``MASKFORGE_THREADS`` caps BLAS/kernel parallelism (default 1, which is
required for bit-identical reruns).
"""

import os

_THREADS = os.environ.get("MASKFORGE_THREADS", "1")
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, _THREADS)

try:
    from threadpoolctl import threadpool_limits as _threadpool_limits

    # Keep a reference so the limit stays applied for the process lifetime
    # even when numpy was imported before this package.
    _BLAS_LIMIT = _threadpool_limits(limits=max(1, int(_THREADS)))
except Exception:  # pragma: no cover - threadpoolctl is a soft dependency
    _BLAS_LIMIT = None

__version__ = "0.1.0"
