"""Dense float64 primitives, seeded generators and a finite-difference checker.

The three matmul kernels come from the compiled ``_kernels`` extension when it
was built, otherwise from ``_pykernels``; ``CAML_BACKEND=python`` forces the
fallback. Both sum over the inner index in ascending order, so switching
backend never changes a result.
"""
from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import _pykernels

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

_BACKENDS = {"python": _pykernels}
if _compiled is not None:
    _BACKENDS["compiled"] = _compiled

_active = _BACKENDS.get(os.environ.get("CAML_BACKEND", "compiled"), _pykernels)


def available_backends() -> list[str]:
    return sorted(_BACKENDS)


def backend_name() -> str:
    return "compiled" if _active is _compiled else "python"


def set_backend(name: str) -> None:
    """Select ``"compiled"`` or ``"python"`` kernels for all later calls."""
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"backend {name!r} unavailable; have {available_backends()}")
    _active = _BACKENDS[name]


def _as2d(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float64)


def matmul(a, b) -> np.ndarray:
    a, b = _as2d(a), _as2d(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"dimension mismatch: {a.shape} x {b.shape}")
    return _active.matmul(a, b)


def matmul_tn(a, b) -> np.ndarray:
    """``a.T @ b``."""
    a, b = _as2d(a), _as2d(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ValueError(f"dimension mismatch: {a.shape}^T x {b.shape}")
    return _active.matmul_tn(a, b)


def matmul_nt(a, b) -> np.ndarray:
    """``a @ b.T``."""
    a, b = _as2d(a), _as2d(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape} x {b.shape}^T")
    return _active.matmul_nt(a, b)


def softmax(v) -> np.ndarray:
    """Softmax over the last axis, shifted by the max for stability."""
    v = np.asarray(v, dtype=np.float64)
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def sigmoid(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# -- random streams ---------------------------------------------------------

def derive_seed(root: int, purpose: str) -> int:
    """Expand one root seed into an independent 64-bit seed per purpose."""
    digest = hashlib.sha256(f"{int(root)}/{purpose}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def make_rng(seed: int, purpose: str | None = None) -> np.random.Generator:
    """Counter-based (Philox) generator; same seed gives the same stream everywhere."""
    if purpose is not None:
        seed = derive_seed(seed, purpose)
    return np.random.Generator(np.random.Philox(int(seed) & (2**64 - 1)))


# -- gradient checking ------------------------------------------------------

@dataclass
class GradCheckReport:
    tol: float
    max_rel_error: dict[str, float] = field(default_factory=dict)

    @property
    def failed(self) -> list[str]:
        return [name for name, err in self.max_rel_error.items() if not err < self.tol]

    @property
    def passed(self) -> bool:
        return not self.failed

    def lines(self) -> list[str]:
        return [
            f"{name:<24} {err:.3e} {'FAIL' if not err < self.tol else 'ok'}"
            for name, err in self.max_rel_error.items()
        ]


def finite_diff_check(
    f: Callable[[], float],
    params: Mapping[str, np.ndarray],
    analytic: Mapping[str, np.ndarray],
    epsilon: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare analytic gradients with central differences of ``f``.

    ``f`` takes no arguments and reads ``params`` (perturbed in place, then
    restored). The error per entry is
    ``|g_a - g_fd| / max(1, |g_a|, |g_fd|)``; the report keeps the max per tensor.
    """
    report = GradCheckReport(tol=tol)
    for name, p in params.items():
        g_a = np.asarray(analytic[name], dtype=np.float64)
        if g_a.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g_a.shape} != param shape {p.shape}")
        flat = p.reshape(-1)
        worst = 0.0
        for i, ga in enumerate(g_a.reshape(-1)):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = f()
            flat[i] = orig - epsilon
            down = f()
            flat[i] = orig
            g_fd = (up - down) / (2.0 * epsilon)
            err = abs(ga - g_fd) / max(1.0, abs(ga), abs(g_fd))
            if np.isnan(err):
                worst = float("nan")
                break
            worst = max(worst, err)
        report.max_rel_error[name] = float(worst)
    return report
