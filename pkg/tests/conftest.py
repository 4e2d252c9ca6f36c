import os

# Determinism default; individual tests may fork workers that inherit this.
os.environ.setdefault("MASKFORGE_THREADS", "1")

import numpy as np
import pytest

from maskforge import kernels


@pytest.fixture(scope="session", autouse=True)
def warm_kernels():
    # compile the numba kernels once so test timings exclude JIT latency
    x = np.zeros((1, 4, 2), dtype=np.float32)
    w = np.zeros((2, 3), dtype=np.float32)
    b = np.zeros(2, dtype=np.float32)
    kernels.depthwise_conv1d_forward(x, w, b)
    kernels.depthwise_conv1d_backward(x, x, w)
    g = np.zeros((2, 2), dtype=np.float32)
    out, xh, inv = kernels.layer_norm_forward(g, b, b, 2, 1e-5)
    kernels.layer_norm_backward(g, xh, inv, b, 2)
    p = np.zeros(2, dtype=np.float32)
    kernels.adamw_update(p, p.copy(), p.copy(), p.copy(), 0.1, 0.9, 0.999, 1e-8, 0.1, 0.001, 0.0, False)
    if kernels.HAVE_NUMBA:
        kernels.layer_norm_forward(g.astype(np.float64), b.astype(np.float64), b.astype(np.float64), 2, 1e-5)
