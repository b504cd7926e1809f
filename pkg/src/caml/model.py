"""Forward and backward passes for CAML, the max-pool CNN baseline and the description embedder.

Shapes follow the column convention: ``H`` is ``d_c x N`` (one column per
document position), attention ``alpha`` is ``|L| x N``, and per-label
document vectors ``V`` are ``|L| x d_c``. All gradients are derived by hand;
``tests/test_model.py`` checks them against central differences.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from enum import Enum
from typing import Mapping, Sequence

import numpy as np

from .corpus import PAD
from .numerics import matmul, matmul_nt, matmul_tn, sigmoid, softmax


class ModelKind(str, Enum):
    CAML = "caml"
    CNN = "cnn"


class ModelError(ValueError):
    pass


# -- parameters -----------------------------------------------------------------

@dataclass
class DescEmbedderParams:
    conv_weight: np.ndarray  # k x d_e x d_c
    conv_bias: np.ndarray  # d_c


@dataclass
class CamlParams:
    embeddings: np.ndarray  # |V| x d_e
    conv_weight: np.ndarray  # k x d_e x d_c
    conv_bias: np.ndarray  # d_c
    attention: np.ndarray  # |L| x d_c, rows u_l
    out_weight: np.ndarray  # |L| x d_c, rows beta_l
    out_bias: np.ndarray  # |L|
    desc: DescEmbedderParams | None = None

    @property
    def k(self) -> int:
        return self.conv_weight.shape[0]

    @property
    def d_e(self) -> int:
        return self.embeddings.shape[1]

    @property
    def d_c(self) -> int:
        return self.conv_weight.shape[2]

    @property
    def n_labels(self) -> int:
        return self.out_weight.shape[0]

    def tensors(self) -> dict[str, np.ndarray]:
        """Name -> array views in a fixed order (used by Adam, checkpoints, grad checks)."""
        out = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "desc"}
        if self.desc is not None:
            out["desc.conv_weight"] = self.desc.conv_weight
            out["desc.conv_bias"] = self.desc.conv_bias
        return out

    @classmethod
    def from_tensors(cls, t: Mapping[str, np.ndarray]) -> "CamlParams":
        desc = None
        if "desc.conv_weight" in t:
            desc = DescEmbedderParams(t["desc.conv_weight"], t["desc.conv_bias"])
        names = [f.name for f in fields(cls) if f.name != "desc"]
        params = cls(**{n: t[n] for n in names}, desc=desc)
        params.validate()
        return params

    def copy(self) -> "CamlParams":
        return CamlParams.from_tensors({n: a.copy() for n, a in self.tensors().items()})

    def validate(self) -> None:
        k, d_e, d_c = self.conv_weight.shape
        L = self.out_weight.shape[0]
        expected = {
            "embeddings": (self.embeddings.shape[0], d_e),
            "conv_bias": (d_c,),
            "attention": (L, d_c),
            "out_weight": (L, d_c),
            "out_bias": (L,),
        }
        if self.desc is not None:
            expected["desc.conv_weight"] = (self.desc.conv_weight.shape[0], d_e, d_c)
            expected["desc.conv_bias"] = (d_c,)
        tensors = self.tensors()
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise ModelError(f"{name} has shape {tensors[name].shape}, expected {shape}")
        for name, arr in tensors.items():
            if not np.all(np.isfinite(arr)):
                raise ModelError(f"{name} contains non-finite values")


# tensors that receive the L2 penalty (everything except biases)
WEIGHT_TENSORS = ("embeddings", "conv_weight", "attention", "out_weight", "desc.conv_weight")


def _xavier(rng, shape, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_params(
    embeddings: np.ndarray,
    n_labels: int,
    d_c: int,
    k: int,
    rng: np.random.Generator,
    with_desc: bool = False,
) -> CamlParams:
    """Fresh parameters around an (already initialised) embedding table."""
    vocab_size, d_e = embeddings.shape
    embeddings = np.array(embeddings, dtype=np.float64)
    embeddings[PAD] = 0.0
    params = CamlParams(
        embeddings=embeddings,
        conv_weight=_xavier(rng, (k, d_e, d_c), k * d_e, d_c),
        conv_bias=np.zeros(d_c),
        attention=_xavier(rng, (n_labels, d_c), d_c, n_labels),
        out_weight=_xavier(rng, (n_labels, d_c), d_c, n_labels),
        out_bias=np.zeros(n_labels),
    )
    if with_desc:
        params.desc = DescEmbedderParams(_xavier(rng, (k, d_e, d_c), k * d_e, d_c), np.zeros(d_c))
    return params


# -- convolution ----------------------------------------------------------------

def pad_widths(k: int) -> tuple[int, int]:
    """Zero padding (left, right) that keeps N output positions for filter width k."""
    left = (k - 1) // 2
    return left, k - 1 - left


@dataclass
class ConvCache:
    token_ids: np.ndarray
    patches: np.ndarray  # N x (k*d_e)
    mask: np.ndarray | None  # N x d_e inverted-dropout multipliers


def _unfold(X: np.ndarray, k: int) -> np.ndarray:
    N, d_e = X.shape
    left, right = pad_widths(k)
    Xp = np.zeros((N + k - 1, d_e))
    Xp[left:left + N] = X
    return np.concatenate([Xp[j:j + N] for j in range(k)], axis=1)


def conv_forward(token_ids, embeddings, weight, bias, dropout_mask=None):
    """Embed, optionally drop out, convolve with zero padding, apply tanh.

    Returns ``(H, cache)`` with ``H`` of shape ``d_c x N``.
    """
    token_ids = np.asarray(token_ids, dtype=np.int64)
    if token_ids.size == 0:
        raise ModelError("cannot convolve an empty document")
    k, d_e, d_c = weight.shape
    X = embeddings[token_ids]
    if dropout_mask is not None:
        X = X * dropout_mask
    P = _unfold(X, k)
    Z = matmul(P, weight.reshape(k * d_e, d_c)) + bias
    return np.tanh(Z).T.copy(), ConvCache(token_ids, P, dropout_mask)


def conv_backward(dH, H, cache: ConvCache, weight, g_weight, g_bias, g_embeddings) -> None:
    """Accumulate conv-layer gradients in place given ``dL/dH``."""
    k, d_e, d_c = weight.shape
    N = H.shape[1]
    dZ = (dH * (1.0 - H * H)).T  # N x d_c
    g_weight += matmul_tn(cache.patches, dZ).reshape(k, d_e, d_c)
    g_bias += dZ.sum(axis=0)
    dP = matmul_nt(dZ, weight.reshape(k * d_e, d_c))
    left, _ = pad_widths(k)
    dXp = np.zeros((N + k - 1, d_e))
    for j in range(k):
        dXp[j:j + N] += dP[:, j * d_e:(j + 1) * d_e]
    dX = dXp[left:left + N]
    if cache.mask is not None:
        dX = dX * cache.mask
    np.add.at(g_embeddings, cache.token_ids, dX)


def dropout_mask(rng: np.random.Generator, n: int, d_e: int, q: float) -> np.ndarray | None:
    """Inverted dropout multipliers for an ``n x d_e`` embedded document (None when q = 0)."""
    if q <= 0.0:
        return None
    return (rng.random((n, d_e)) >= q) / (1.0 - q)


# -- pooling and classification -------------------------------------------------

def attention_forward(H, U):
    """Per-label softmax attention over positions; returns ``(alpha, V)``."""
    alpha = softmax(matmul(U, H))
    return alpha, matmul_nt(alpha, H)


def maxpool_forward(H):
    """Per-dimension max over positions; returns ``(v, argmax)`` with ties to the first position."""
    a = np.argmax(H, axis=1)
    return H[np.arange(H.shape[0]), a], a


def classify(V, B, b):
    """``sigmoid(beta_l . v_l + b_l)``; a 1-d ``V`` is shared by every label."""
    V = np.asarray(V, dtype=np.float64)
    if V.ndim == 1:
        logits = matmul(B, V[:, None])[:, 0] + b
    else:
        logits = (B * V).sum(axis=1) + b
    return sigmoid(logits)


@dataclass
class ForwardTrace:
    kind: ModelKind
    H: np.ndarray  # d_c x N
    conv: ConvCache
    yhat: np.ndarray
    alpha: np.ndarray | None = None  # |L| x N (CAML)
    V: np.ndarray | None = None  # |L| x d_c (CAML) or d_c (CNN)
    argmax: np.ndarray | None = None  # d_c (CNN)

    @property
    def N(self) -> int:
        return self.H.shape[1]


def forward(params: CamlParams, token_ids, kind: ModelKind = ModelKind.CAML, dropout_mask=None) -> ForwardTrace:
    kind = ModelKind(kind)
    H, cache = conv_forward(token_ids, params.embeddings, params.conv_weight, params.conv_bias, dropout_mask)
    if kind is ModelKind.CAML:
        alpha, V = attention_forward(H, params.attention)
        yhat = classify(V, params.out_weight, params.out_bias)
        return ForwardTrace(kind, H, cache, yhat, alpha=alpha, V=V)
    v, a = maxpool_forward(H)
    yhat = classify(v, params.out_weight, params.out_bias)
    return ForwardTrace(kind, H, cache, yhat, V=v, argmax=a)


def predict(params: CamlParams, docs: Sequence, kind: ModelKind = ModelKind.CAML) -> np.ndarray:
    """Scores for a sequence of token-id arrays (or EncodedDocuments), D x |L|."""
    rows = [forward(params, getattr(d, "token_ids", d), kind).yhat for d in docs]
    return np.vstack(rows) if rows else np.zeros((0, params.n_labels))


# -- description embedder -------------------------------------------------------

@dataclass
class DescTrace:
    z: np.ndarray  # d_c
    H: np.ndarray
    argmax: np.ndarray
    conv: ConvCache


def desc_embed(desc_ids, desc: DescEmbedderParams, embeddings) -> DescTrace:
    """Max-pooled CNN encoding of a label description."""
    if desc is None:
        raise ModelError("description embedder is not enabled")
    if desc_ids is None or len(desc_ids) == 0:
        raise ModelError("label has no description")
    H, cache = conv_forward(desc_ids, embeddings, desc.conv_weight, desc.conv_bias)
    z, a = maxpool_forward(H)
    return DescTrace(z, H, a, cache)


def desc_traces_for(params: CamlParams, labels, descriptions: Sequence) -> dict[int, DescTrace]:
    """Description encodings for the given label indices; errors on a missing description."""
    out = {}
    for l in labels:
        l = int(l)
        if descriptions[l] is None or len(descriptions[l]) == 0:
            raise ModelError(f"label index {l} lacks a description while the regularizer is enabled")
        out[l] = desc_embed(descriptions[l], params.desc, params.embeddings)
    return out


# -- backward -------------------------------------------------------------------

def zero_grads(params: CamlParams) -> dict[str, np.ndarray]:
    return {n: np.zeros_like(a) for n, a in params.tensors().items()}


def backward(
    trace: ForwardTrace,
    params: CamlParams,
    y,
    lam: float = 0.0,
    rho: float = 0.0,
    desc_traces: Mapping[int, DescTrace] | None = None,
) -> dict[str, np.ndarray]:
    """Gradients of one example's loss (BCE + L2 + description penalty) w.r.t. every tensor."""
    y = np.asarray(y, dtype=np.float64)
    g = zero_grads(params)
    H = trace.H
    dlogit = trace.yhat - y
    g["out_bias"] += dlogit

    if trace.kind is ModelKind.CAML:
        alpha = trace.alpha
        g["out_weight"] += dlogit[:, None] * trace.V
        dV = dlogit[:, None] * params.out_weight
        dalpha = matmul(dV, H)
        dH = matmul_tn(dV, alpha)
        dS = alpha * (dalpha - (alpha * dalpha).sum(axis=1, keepdims=True))
        g["attention"] += matmul_nt(dS, H)
        dH += matmul_tn(params.attention, dS)
    else:
        g["out_weight"] += dlogit[:, None] * trace.V[None, :]
        dv = matmul_tn(params.out_weight, dlogit[:, None])[:, 0]
        dH = np.zeros_like(H)
        dH[np.arange(H.shape[0]), trace.argmax] = dv

    conv_backward(dH, H, trace.conv, params.conv_weight, g["conv_weight"], g["conv_bias"], g["embeddings"])

    if lam > 0.0:
        positives = np.flatnonzero(y > 0.5)
        if positives.size:
            if desc_traces is None:
                raise ModelError("description traces required when lam > 0")
            scale = lam / positives.size
            for l in positives:
                dt = desc_traces[int(l)]
                r = dt.z - params.out_weight[l]
                norm = np.sqrt(r @ r)
                if norm == 0.0:
                    continue  # subgradient 0 at the kink
                gz = (scale / norm) * r
                g["out_weight"][l] -= gz
                dHd = np.zeros_like(dt.H)
                dHd[np.arange(dt.H.shape[0]), dt.argmax] = gz
                conv_backward(dHd, dt.H, dt.conv, params.desc.conv_weight,
                              g["desc.conv_weight"], g["desc.conv_bias"], g["embeddings"])

    if rho > 0.0:
        tensors = params.tensors()
        for name in WEIGHT_TENSORS:
            if name in tensors:
                g[name] += 2.0 * rho * tensors[name]

    g["embeddings"][PAD] = 0.0
    return g
