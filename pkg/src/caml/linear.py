"""One-vs-rest logistic regression over unigram bag-of-words counts."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .numerics import sigmoid

# bias for labels never seen in training: sigmoid(-30) ~ 1e-13
NEVER_BIAS = -30.0


@dataclass
class LrParams:
    weights: np.ndarray  # |L| x |V|
    bias: np.ndarray  # |L|
    trained: np.ndarray  # |L| bool, label present in training data
    history: list[float] = field(default_factory=list, compare=False)

    def tensors(self) -> dict[str, np.ndarray]:
        return {"weights": self.weights, "bias": self.bias, "trained": self.trained.astype(np.float64)}

    @classmethod
    def from_tensors(cls, t: Mapping[str, np.ndarray]) -> "LrParams":
        w, b, tr = t["weights"], t["bias"], t["trained"]
        if w.ndim != 2 or b.shape != (w.shape[0],) or tr.shape != b.shape:
            raise ValueError("inconsistent logistic-regression tensor shapes")
        return cls(w, b, tr > 0.5)


def bag_of_words(token_ids) -> dict[int, int]:
    """Sparse token-index -> count map."""
    return dict(Counter(int(i) for i in token_ids))


def bow_matrix(docs: Sequence, vocab_size: int) -> sp.csr_matrix:
    rows, cols, vals = [], [], []
    for r, doc in enumerate(docs):
        ids = getattr(doc, "token_ids", doc)
        for idx, count in sorted(bag_of_words(ids).items()):
            rows.append(r)
            cols.append(idx)
            vals.append(count)
    return sp.csr_matrix((np.asarray(vals, dtype=np.float64), (rows, cols)), shape=(len(docs), vocab_size))


def _objective(X, Y, W, b, l2):
    logits = np.asarray(X @ W.T) + b
    # log(1 + e^z) - y z, stable
    nll = np.logaddexp(0.0, logits) - Y * logits
    return float(nll.sum() / X.shape[0] + l2 * (W * W).sum()), logits


def _max_curvature(X) -> float:
    """Upper estimate of the largest eigenvalue of [X 1]^T [X 1] / D by power iteration."""
    D = X.shape[0]
    Xa = sp.hstack([X, sp.csr_matrix(np.ones((D, 1)))]).tocsr()
    v = np.ones(Xa.shape[1]) / np.sqrt(Xa.shape[1])
    lam = 0.0
    for _ in range(100):
        w = Xa.T @ (Xa @ v)
        lam = float(np.linalg.norm(w))
        if lam == 0.0:
            break
        v = w / lam
    return 1.05 * lam / D


def lr_train(train_docs: Sequence, vocab_size: int, n_labels: int, l2: float = 1e-3,
             epochs: int = 300, step: float | None = None) -> LrParams:
    """Full-batch gradient descent on mean logistic loss + ``l2 * ||W||^2``.

    Labels without a positive training example keep zero weights and a bias
    that pins their probability near zero. ``step`` defaults to the inverse of
    the loss's curvature bound, which makes every epoch non-increasing.
    """
    X = bow_matrix(train_docs, vocab_size)
    Y = np.vstack([d.label_vector for d in train_docs]).astype(np.float64)
    if Y.shape[1] != n_labels:
        raise ValueError(f"documents carry {Y.shape[1]} labels, expected {n_labels}")
    trained = Y.sum(axis=0) > 0
    D = X.shape[0]
    W = np.zeros((n_labels, vocab_size))
    b = np.zeros(n_labels)
    if step is None:
        step = 1.0 / (0.25 * _max_curvature(X) + 2.0 * l2)
    history = []
    Xt = X.T.tocsr()
    for _ in range(epochs):
        obj, logits = _objective(X, Y, W, b, l2)
        history.append(obj)
        R = (sigmoid(logits) - Y) / D  # D x |L|
        R[:, ~trained] = 0.0
        gW = np.asarray(Xt @ R).T + 2.0 * l2 * W
        gW[~trained] = 0.0
        W -= step * gW
        b -= step * R.sum(axis=0)
    history.append(_objective(X, Y, W, b, l2)[0])
    W[~trained] = 0.0
    b[~trained] = NEVER_BIAS
    return LrParams(W, b, trained, history)


def lr_predict(doc, params: LrParams) -> np.ndarray:
    """Scores for one document given as a token->count map or a token-id sequence."""
    bow = doc if isinstance(doc, Mapping) else bag_of_words(getattr(doc, "token_ids", doc))
    z = params.bias.copy()
    for idx, count in sorted(bow.items()):
        z += count * params.weights[:, idx]
    return sigmoid(z)


def lr_predict_docs(docs: Sequence, params: LrParams) -> np.ndarray:
    X = bow_matrix(docs, params.weights.shape[1])
    return sigmoid(np.asarray(X @ params.weights.T) + params.bias)
