"""Reference numpy implementations of the hot kernels.

Every function here has a compiled twin in ``_kernels.pyx`` that must give
bit-identical results.
"""

from __future__ import annotations

import numpy as np

BACKEND = "python"


def adam_update(w, g, m, v, keep, lr, beta1, beta2, eps, bc1, bc2, weight_decay):
    """In-place bias-corrected Adam update of flat float64 buffers.

    ``keep`` is ``None`` or a uint8 vector; coordinates where it is 0 are left
    untouched (weights, first and second moments).
    """
    n = w.shape[0]
    if g.shape[0] != n or m.shape[0] != n or v.shape[0] != n:
        raise ValueError("adam_update: buffer lengths differ")
    if weight_decay != 0.0:
        g = g + weight_decay * w
    new_m = beta1 * m + (1.0 - beta1) * g
    new_v = beta2 * v + (1.0 - beta2) * (g * g)
    new_w = w - lr * (new_m / bc1) / (np.sqrt(new_v / bc2) + eps)
    if keep is None:
        m[:] = new_m
        v[:] = new_v
        w[:] = new_w
    else:
        if keep.shape[0] != n:
            raise ValueError("adam_update: keep mask length differs")
        sel = keep.astype(bool)
        np.copyto(m, new_m, where=sel)
        np.copyto(v, new_v, where=sel)
        np.copyto(w, new_w, where=sel)


def qgemm(a, a_zero_point, b):
    """Integer GEMM ``sum_k (a[i,k] - zp) * b[k,j]`` with int32 accumulation."""
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"qgemm: inner dimensions differ ({a.shape[1]} vs {b.shape[0]})")
    if a.shape[1] * 255 * 128 >= 2**31 - 1:
        raise OverflowError(f"qgemm: K={a.shape[1]} can saturate a 32-bit accumulator")
    acc = (a.astype(np.int64) - a_zero_point) @ b.astype(np.int64)
    return acc.astype(np.int32)
