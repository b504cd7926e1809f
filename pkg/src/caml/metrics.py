"""Micro/macro P, R, F1, ROC-AUC and precision@n for multi-label predictions.

Aggregates are formed from integer counts in exact rational arithmetic and
rounded to float once, so results do not depend on summation order.
"""
from __future__ import annotations

import json
from fractions import Fraction
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata


@dataclass
class PredictionMatrix:
    scores: np.ndarray  # D x |L| in [0, 1]
    truth: np.ndarray  # D x |L| binary
    threshold: float = 0.5

    def __post_init__(self):
        self.scores = np.atleast_2d(np.asarray(self.scores, dtype=np.float64))
        self.truth = np.atleast_2d(np.asarray(self.truth)).astype(bool)
        if self.scores.shape != self.truth.shape:
            raise ValueError(f"scores {self.scores.shape} and truth {self.truth.shape} differ in shape")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("scores must be finite")

    @property
    def predicted(self) -> np.ndarray:
        return self.scores >= self.threshold

    def columns(self, idx) -> "PredictionMatrix":
        return PredictionMatrix(self.scores[:, idx], self.truth[:, idx], self.threshold)


def _ratio(a, b) -> Fraction:
    return Fraction(int(a), int(b)) if b else Fraction(0)


def _harmonic(p: Fraction, r: Fraction) -> Fraction:
    return 2 * p * r / (p + r) if p + r > 0 else Fraction(0)


def _mean(values) -> Fraction:
    values = list(values)
    return sum(values, Fraction(0)) / len(values) if values else Fraction(0)


def _counts(pm: PredictionMatrix):
    pred, truth = pm.predicted, pm.truth
    tp = (pred & truth).sum(axis=0)
    fp = (pred & ~truth).sum(axis=0)
    fn = (~pred & truth).sum(axis=0)
    return tp, fp, fn


def micro_prf(pm: PredictionMatrix) -> tuple[float, float, float]:
    tp, fp, fn = (int(c.sum()) for c in _counts(pm))
    p, r = _ratio(tp, tp + fp), _ratio(tp, tp + fn)
    return float(p), float(r), float(_harmonic(p, r))


def _per_label_exact(pm: PredictionMatrix):
    tp, fp, fn = _counts(pm)
    p = [_ratio(a, a + b) for a, b in zip(tp, fp)]
    r = [_ratio(a, a + b) for a, b in zip(tp, fn)]
    return p, r, [_harmonic(a, b) for a, b in zip(p, r)]


def per_label_prf(pm: PredictionMatrix):
    return tuple(np.array([float(x) for x in col]) for col in _per_label_exact(pm))


def macro_prf(pm: PredictionMatrix) -> tuple[float, float, float]:
    """Label-averaged P and R; F1 is their harmonic mean."""
    p, r, _ = _per_label_exact(pm)
    mp, mr = _mean(p), _mean(r)
    return float(mp), float(mr), float(_harmonic(mp, mr))


def macro_f1_mean(pm: PredictionMatrix) -> float:
    """Alternative macro-F1: unweighted mean of per-label F1."""
    return float(_mean(_per_label_exact(pm)[2]))


def _binary_auc(scores: np.ndarray, truth: np.ndarray) -> Fraction | None:
    n_pos = int(truth.sum())
    n_neg = truth.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    # average ranks are half-integers, so twice the rank sum is an exact integer
    twice_rank_sum = int(round(2.0 * rankdata(scores, method="average")[truth].sum()))
    return Fraction(twice_rank_sum - n_pos * (n_pos + 1), 2 * n_pos * n_neg)


def auc(pm: PredictionMatrix) -> tuple[float | None, float | None]:
    """(macro, micro) ROC-AUC by the rank-sum formula; ties count one half.

    Macro averages labels that have both a positive and a negative; either
    value is None when undefined.
    """
    per_label = [_binary_auc(pm.scores[:, j], pm.truth[:, j]) for j in range(pm.scores.shape[1])]
    defined = [a for a in per_label if a is not None]
    macro = float(_mean(defined)) if defined else None
    micro = _binary_auc(pm.scores.ravel(), pm.truth.ravel())
    return macro, None if micro is None else float(micro)


def precision_at_n(pm: PredictionMatrix, n: int) -> float:
    """Mean fraction of each document's top-n labels (ties by label index) that are true."""
    D, L = pm.scores.shape
    if not 1 <= n <= L:
        raise ValueError(f"n={n} must be between 1 and the number of labels ({L})")
    if D == 0:
        raise ValueError("precision@n needs at least one document")
    top = np.argsort(-pm.scores, axis=1, kind="stable")[:, :n]
    hits = int(np.take_along_axis(pm.truth, top, axis=1).sum())
    return float(Fraction(hits, D * n))


@dataclass
class EvalReport:
    macro_auc: float | None
    micro_auc: float | None
    macro_p: float
    macro_r: float
    macro_f1: float
    macro_f1_mean: float
    micro_p: float
    micro_r: float
    micro_f1: float
    p_at: dict[int, float] = field(default_factory=dict)
    kind_micro_f1: dict[str, float] = field(default_factory=dict)
    per_label: list[dict] = field(default_factory=list)
    n_docs: int = 0

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["p_at"] = {str(n): v for n, v in sorted(self.p_at.items())}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        d["p_at"] = {int(n): v for n, v in d["p_at"].items()}
        return cls(**d)

    def table(self) -> str:
        def fmt(v):
            return "  --  " if v is None else f"{v:.4f}"

        rows = [
            ("AUC macro", self.macro_auc), ("AUC micro", self.micro_auc),
            ("F1 macro", self.macro_f1), ("F1 macro (mean of labels)", self.macro_f1_mean),
            ("F1 micro", self.micro_f1),
            ("P macro", self.macro_p), ("R macro", self.macro_r),
            ("P micro", self.micro_p), ("R micro", self.micro_r),
        ]
        rows += [(f"F1 micro [{k}]", v) for k, v in sorted(self.kind_micro_f1.items())]
        rows += [(f"P@{n}", v) for n, v in sorted(self.p_at.items())]
        width = max(len(name) for name, _ in rows)
        lines = [f"documents: {self.n_docs}"] + [f"{name:<{width}}  {fmt(v)}" for name, v in rows]
        return "\n".join(lines)


def evaluate(pm: PredictionMatrix, ns: Sequence[int] = (5, 8, 15), labels: Sequence[str] | None = None,
             kinds: Sequence[str | None] | None = None) -> EvalReport:
    L = pm.scores.shape[1]
    for n in ns:
        if not 1 <= n <= L:
            raise ValueError(f"precision@{n} requested but there are only {L} labels")
    macro_auc, micro_auc = auc(pm)
    mp, mr, mf = macro_prf(pm)
    up, ur, uf = micro_prf(pm)
    kind_f1 = {}
    if kinds is not None:
        kinds = list(kinds)
        for kind in sorted({k for k in kinds if k}):
            idx = [j for j, k in enumerate(kinds) if k == kind]
            kind_f1[kind] = micro_prf(pm.columns(idx))[2]
    labels = list(labels) if labels is not None else [str(j) for j in range(L)]
    p, r, f = per_label_prf(pm)
    support = pm.truth.sum(axis=0)
    per_label = [
        {"label": labels[j], "precision": float(p[j]), "recall": float(r[j]), "f1": float(f[j]),
         "support": int(support[j])}
        for j in range(L)
    ]
    return EvalReport(macro_auc, micro_auc, mp, mr, mf, macro_f1_mean(pm), up, ur, uf,
                      {int(n): precision_at_n(pm, n) for n in ns}, kind_f1, per_label, pm.scores.shape[0])
