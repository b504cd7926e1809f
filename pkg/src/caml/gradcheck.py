"""Finite-difference check of the hand-written backward pass on a tiny random model."""
from __future__ import annotations

import numpy as np

from .model import ModelKind, backward, desc_traces_for, forward, init_params
from .numerics import GradCheckReport, finite_diff_check, make_rng
from .training import loss


def run_gradcheck(seed: int = 0, kind: str = "caml", vocab_size: int = 20, d_e: int = 5, d_c: int = 4,
                  k: int = 3, n_labels: int = 6, n_tokens: int = 10, lam: float = 0.1, rho: float = 0.01,
                  tol: float = 1e-4, epsilon: float = 1e-5, inject_fault: bool = False) -> GradCheckReport:
    """Check every tensor of a random tiny model (dropout off).

    ``inject_fault`` flips the sign of the conv-weight gradient so the checker
    can be seen to fail.
    """
    kind = ModelKind(kind)
    rng = make_rng(seed, "gradcheck")
    emb = rng.uniform(-0.5, 0.5, size=(vocab_size, d_e))
    params = init_params(emb, n_labels, d_c, k, rng, with_desc=lam > 0)
    # non-zero biases so no gradient is trivially zero
    params.conv_bias[:] = rng.normal(0, 0.1, d_c)
    params.out_bias[:] = rng.normal(0, 0.1, n_labels)
    if params.desc is not None:
        params.desc.conv_bias[:] = rng.normal(0, 0.1, d_c)
    token_ids = rng.integers(1, vocab_size, n_tokens)
    y = (rng.random(n_labels) < 0.5).astype(np.float64)
    y[0] = 1.0
    descriptions = [list(rng.integers(1, vocab_size, rng.integers(2, 6))) for _ in range(n_labels)]
    positives = np.flatnonzero(y)

    def objective():
        trace = forward(params, token_ids, kind)
        z = {}
        if lam > 0:
            z = {l: t.z for l, t in desc_traces_for(params, positives, descriptions).items()}
        return loss(trace.yhat, y, params, lam=lam, rho=rho, z=z)

    trace = forward(params, token_ids, kind)
    desc = desc_traces_for(params, positives, descriptions) if lam > 0 else None
    grads = backward(trace, params, y, lam=lam, rho=rho, desc_traces=desc)
    if inject_fault:
        grads["conv_weight"] = -grads["conv_weight"]
    return finite_diff_check(objective, params.tensors(), grads, epsilon=epsilon, tol=tol)
