"""Pure-numpy fallback for the compiled matmul kernels.

One rank-1 update per inner index keeps the summation order identical to
the compiled loops (ascending inner index, no fused multiply-add).
"""
import numpy as np


def matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for p in range(a.shape[1]):
        out += a[:, p, None] * b[None, p, :]
    return out


def matmul_tn(a, b):
    out = np.zeros((a.shape[1], b.shape[1]))
    for p in range(a.shape[0]):
        out += a[p, :, None] * b[None, p, :]
    return out


def matmul_nt(a, b):
    out = np.zeros((a.shape[0], b.shape[0]))
    for p in range(a.shape[1]):
        out += a[:, p, None] * b[None, :, p]
    return out
