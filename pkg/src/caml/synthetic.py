"""Planted-trigger corpora: each label is caused by a known 4-token span."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

from .corpus import DIAGNOSIS, PROCEDURE, RawDocument
from .numerics import make_rng

_ONSETS = "b c d f g h j k l m n p r s t v w z".split()
_VOWELS = "a e i o u".split()


def pseudo_words(n: int, offset: int = 0) -> list[str]:
    """``n`` distinct lowercase alphabetic pseudo-words (deterministic)."""
    syllables = [c + v for c, v in itertools.product(_ONSETS, _VOWELS)]
    words = (a + b + c for a, b, c in itertools.product(syllables, repeat=3))
    return list(itertools.islice(words, offset, offset + n))


@dataclass
class SyntheticCorpus:
    docs: list[RawDocument]
    descriptions: dict[str, str]
    kinds: dict[str, str]
    triggers: dict[str, list[str]]
    planted: dict[str, dict[str, int]] = field(default_factory=dict)  # doc_id -> label -> start


def make_trigger_corpus(
    n_docs: int = 400,
    n_labels: int = 20,
    n_filler: int = 240,
    n_trigger_words: int = 60,
    length=(60, 120),
    labels_per_doc=(1, 3),
    noise: float = 0.1,
    docs_per_group: int = 2,
    seed: int = 0,
) -> SyntheticCorpus:
    """Generate documents of filler text with one planted 4-gram per assigned label.

    With probability ``noise`` a document has one label flipped (dropped if
    present, added if absent), so its truth no longer matches its triggers.
    """
    rng = make_rng(seed, "synthetic")
    filler = pseudo_words(n_filler)
    trigger_pool = pseudo_words(n_trigger_words, offset=n_filler)
    codes = [f"D{i:02d}" if i < n_labels // 2 else f"P{i:02d}" for i in range(n_labels)]
    triggers = {c: [trigger_pool[i] for i in rng.choice(n_trigger_words, 4, replace=False)] for c in codes}
    descriptions = {c: f"{triggers[c][1]} {triggers[c][2]} condition" for c in codes}
    kinds = {c: DIAGNOSIS if c.startswith("D") else PROCEDURE for c in codes}

    docs, planted = [], {}
    for i in range(n_docs):
        doc_id = f"doc{i:04d}"
        n_tok = int(rng.integers(length[0], length[1] + 1))
        m = int(rng.integers(labels_per_doc[0], labels_per_doc[1] + 1))
        chosen = [codes[j] for j in sorted(rng.choice(n_labels, m, replace=False))]
        words = [filler[j] for j in rng.integers(0, n_filler, n_tok - 4 * m)]
        # insertion slots among the filler tokens, in increasing order
        slots = sorted(int(s) for s in rng.integers(0, len(words) + 1, m))
        order = [chosen[j] for j in rng.permutation(m)]
        out, starts, prev = [], {}, 0
        for slot, code in zip(slots, order):
            out.extend(words[prev:slot])
            starts[code] = len(out)
            out.extend(triggers[code])
            prev = slot
        out.extend(words[prev:])
        labels = set(chosen)
        if rng.random() < noise:
            flip = codes[int(rng.integers(n_labels))]
            labels ^= {flip}
        docs.append(RawDocument(doc_id, f"g{i // docs_per_group:04d}", " ".join(out), frozenset(labels)))
        planted[doc_id] = starts
    return SyntheticCorpus(docs, descriptions, kinds, triggers, planted)
