"""Most-informative k-gram extraction for a (document, label) pair.

Four extractors: CAML attention argmax, max-pool CNN importance, logistic
regression coefficient sums, and idf-weighted cosine similarity against the
label's description. ``build_review_sheet`` anonymises their output for
blind side-by-side review.
"""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from nltk.stem.porter import PorterStemmer

from .corpus import tokenize
from .model import ForwardTrace, ModelKind, pad_widths
from .numerics import make_rng

CONTEXT = 5
DEFAULT_K = 4


class Method(str, Enum):
    ATTENTION = "attention"
    MAXPOOL = "maxpool_importance"
    LR = "lr_weights"
    COSINE = "cosine_sim"


@dataclass
class Snippet:
    method: Method
    label: str
    start: int
    k: int
    gram: list[str]
    left: list[str]
    right: list[str]
    score: float

    @property
    def context(self) -> list[str]:
        return [*self.left, *self.gram, *self.right]

    def render(self) -> str:
        """One Table-1-style line: ``...left **gram** right...``."""
        return f"...{' '.join(self.left)} **{' '.join(self.gram)}** {' '.join(self.right)}...".replace("  ", " ")

    def to_dict(self) -> dict:
        return {"method": self.method.value, "label": self.label, "start": self.start, "k": self.k,
                "gram": self.gram, "left": self.left, "right": self.right, "score": self.score}


def _snippet(method, label, tokens: Sequence[str], start: int, k: int, score: float) -> Snippet:
    k = min(k, len(tokens))
    start = int(min(max(start, 0), len(tokens) - k))
    return Snippet(Method(method), str(label), start, k, list(tokens[start:start + k]),
                   list(tokens[max(0, start - CONTEXT):start]), list(tokens[start + k:start + k + CONTEXT]),
                   float(score))


def anchored_start(position: int, k_conv: int, k: int = DEFAULT_K) -> int:
    """Start of the k-gram centred in the convolution window that produced ``position``.

    The window covers input tokens ``[position - left_pad, position - left_pad + k_conv - 1]``.
    The caller clips the result to the document.
    """
    left, _ = pad_widths(k_conv)
    return position - left + (k_conv - k) // 2


def explain_attention(trace: ForwardTrace, label: int, tokens: Sequence[str], k_conv: int,
                      k: int = DEFAULT_K, code: str | None = None) -> Snippet:
    """k-gram around the argmax of the label's attention distribution (ties: first position)."""
    if trace.kind is not ModelKind.CAML:
        raise ValueError("attention explanations need a CAML forward trace")
    alpha = trace.alpha[label]
    n = int(np.argmax(alpha))
    return _snippet(Method.ATTENTION, code or label, tokens, anchored_start(n, k_conv, k), k, alpha[n])


def maxpool_importance(argmax: np.ndarray, beta: np.ndarray, N: int) -> np.ndarray:
    """Per position, the summed output weights of the filters whose max landed there (-inf if none)."""
    imp = np.full(N, -np.inf)
    for j, pos in enumerate(argmax):
        imp[pos] = beta[j] if np.isneginf(imp[pos]) else imp[pos] + beta[j]
    return imp


def explain_maxpool(trace: ForwardTrace, label: int, out_weight: np.ndarray, tokens: Sequence[str],
                    k_conv: int, k: int = DEFAULT_K, code: str | None = None) -> Snippet:
    if trace.kind is not ModelKind.CNN:
        raise ValueError("max-pool explanations need a CNN forward trace")
    imp = maxpool_importance(trace.argmax, out_weight[label], trace.N)
    n = int(np.argmax(imp))
    return _snippet(Method.MAXPOOL, code or label, tokens, anchored_start(n, k_conv, k), k, imp[n])


def window_scores(token_ids, weights: np.ndarray, k: int) -> np.ndarray:
    """Sum of per-token weights over every length-k window (one window if the doc is shorter)."""
    per_token = weights[np.asarray(token_ids, dtype=np.int64)]
    k = min(k, per_token.size)
    return np.lib.stride_tricks.sliding_window_view(per_token, k).sum(axis=1)


def explain_lr(token_ids, tokens: Sequence[str], label: int, params, k: int = DEFAULT_K,
               code: str | None = None) -> Snippet:
    scores = window_scores(token_ids, params.weights[label], k)
    start = int(np.argmax(scores))
    return _snippet(Method.LR, code or label, tokens, start, k, scores[start])


# -- cosine similarity against code descriptions ------------------------------

_porter = PorterStemmer(PorterStemmer.ORIGINAL_ALGORITHM)


@lru_cache(maxsize=None)
def stem(token: str) -> str:
    return _porter.stem(token)


@dataclass
class IdfTable:
    df: dict[str, int]
    n_docs: int

    def __call__(self, term: str) -> float:
        return math.log((1.0 + self.n_docs) / (1.0 + self.df.get(term, 0))) + 1.0


def build_idf(notes: Iterable[Sequence[str]], descriptions: Iterable[str]) -> IdfTable:
    """Document frequencies of stemmed terms over all notes plus all code descriptions."""
    df: Counter[str] = Counter()
    n = 0
    for tokens in notes:
        df.update({stem(t) for t in tokens})
        n += 1
    for text in descriptions:
        df.update({stem(t) for t in tokenize(text)})
        n += 1
    return IdfTable(dict(df), n)


def _tfidf(terms: Iterable[str], idf: IdfTable) -> dict[str, float]:
    counts = Counter(terms)
    return {t: counts[t] * idf(t) for t in sorted(counts)}


def _cosine(a: dict[str, float], b: dict[str, float]) -> float:
    dot = sum(w * b[t] for t, w in a.items() if t in b)
    if dot == 0.0:
        return 0.0
    na = math.sqrt(sum(w * w for w in a.values()))
    nb = math.sqrt(sum(w * w for w in b.values()))
    return dot / (na * nb)


def explain_cosine(tokens: Sequence[str], label: int, description: str, idf: IdfTable,
                   k: int = DEFAULT_K, code: str | None = None) -> Snippet | None:
    """Best k-gram by idf-weighted cosine to the description; None if no k-gram scores above 0."""
    desc_vec = _tfidf((stem(t) for t in tokenize(description)), idf)
    if not desc_vec or not tokens:
        return None
    stems = [stem(t) for t in tokens]
    k_eff = min(k, len(stems))
    best, best_start = 0.0, None
    for start in range(len(stems) - k_eff + 1):
        score = _cosine(_tfidf(stems[start:start + k_eff], idf), desc_vec)
        if score > best:
            best, best_start = score, start
    if best_start is None:
        return None
    return _snippet(Method.COSINE, code or label, tokens, best_start, k, best)


# -- blind review sheets ---------------------------------------------------------

@dataclass
class ReviewSheet:
    doc_id: str
    code: str
    description: str
    entries: list[dict] = field(default_factory=list)  # {"id", "text", "left", "gram", "right"}

    def to_dict(self) -> dict:
        return {"doc_id": self.doc_id, "code": self.code, "description": self.description,
                "entries": self.entries}

    def to_markdown(self) -> str:
        lines = [f"**{self.code}**: \"{self.description}\"  (document {self.doc_id})", ""]
        lines += [f"- [{e['id']}] {e['text']}" for e in self.entries]
        return "\n".join(lines) + "\n"


def build_review_sheet(doc_id: str, code: str, description: str, snippets: Sequence[Snippet],
                       seed: int) -> tuple[ReviewSheet, dict[str, str]]:
    """Shuffle snippets into anonymous entries; returns the sheet and its entry-id -> method key."""
    rng = make_rng(seed, f"review/{doc_id}/{code}")
    order = rng.permutation(len(snippets))
    sheet = ReviewSheet(doc_id, code, description)
    key = {}
    for pos, i in enumerate(order, 1):
        s = snippets[int(i)]
        entry_id = f"{doc_id}:{code}:{pos}"
        sheet.entries.append({"id": entry_id, "text": s.render(), "left": s.left, "gram": s.gram,
                              "right": s.right})
        key[entry_id] = s.method.value
    return sheet, key


def dump_sheets(sheets: Sequence[ReviewSheet], keys: Sequence[dict], out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "review_sheets.json").write_text(
        json.dumps([s.to_dict() for s in sheets], indent=1, ensure_ascii=False) + "\n", encoding="utf-8")
    (out / "review_sheets.md").write_text("\n".join(s.to_markdown() for s in sheets), encoding="utf-8")
    merged = {k: v for key in keys for k, v in key.items()}
    (out / "review_key.json").write_text(json.dumps(merged, indent=1, sort_keys=True) + "\n", encoding="utf-8")
