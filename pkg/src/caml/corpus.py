"""Document ingestion: tokenization, vocabulary, label space, encoding and splits."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .numerics import make_rng

logger = logging.getLogger(__name__)

PAD, UNK = 0, 1
PAD_TOKEN, UNK_TOKEN = "<pad>", "<unk>"
DEFAULT_MAX_LEN = 2500
DEFAULT_MIN_DOC_FREQ = 3


class CorpusError(ValueError):
    """Malformed or unusable input data."""


@dataclass(frozen=True)
class RawDocument:
    doc_id: str
    group_id: str
    text: str
    labels: frozenset[str] = frozenset()


# -- tokenization -------------------------------------------------------------

_EDGE = re.compile(r"^[\W_]+|[\W_]+$")


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, trim edge punctuation, drop tokens without letters.

    >>> tokenize("Gave 500 of 250mg dose")
    ['gave', 'of', '250mg', 'dose']
    """
    out = []
    for raw in text.lower().split():
        tok = _EDGE.sub("", raw)
        if any(ch.isalpha() for ch in tok):
            out.append(tok)
    return out


# -- vocabulary -----------------------------------------------------------------

@dataclass
class Vocabulary:
    index_to_token: list[str]
    doc_freq: dict[str, int]
    min_doc_freq: int = DEFAULT_MIN_DOC_FREQ
    token_to_index: dict[str, int] = field(init=False)

    def __post_init__(self):
        if self.index_to_token[:2] != [PAD_TOKEN, UNK_TOKEN]:
            raise CorpusError("vocabulary must start with PAD and UNK")
        self.token_to_index = {t: i for i, t in enumerate(self.index_to_token)}
        if len(self.token_to_index) != len(self.index_to_token):
            raise CorpusError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.index_to_token)

    def index(self, token: str) -> int:
        return self.token_to_index.get(token, UNK)

    def encode_tokens(self, tokens: Iterable[str]) -> list[int]:
        return [self.token_to_index.get(t, UNK) for t in tokens]

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.index_to_token).encode("utf-8")).hexdigest()

    def save(self, path) -> None:
        lines = [f"{t}\t{self.doc_freq.get(t, 0)}" for t in self.index_to_token[2:]]
        header = f"#min_doc_freq\t{self.min_doc_freq}"
        Path(path).write_text("\n".join([header, *lines]) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines or not lines[0].startswith("#min_doc_freq\t"):
            raise CorpusError(f"{path}: not a vocabulary file")
        min_df = int(lines[0].split("\t")[1])
        tokens, df = [PAD_TOKEN, UNK_TOKEN], {}
        for line in lines[1:]:
            tok, count = line.split("\t")
            tokens.append(tok)
            df[tok] = int(count)
        return cls(tokens, df, min_df)


def build_vocabulary(
    train_docs: Sequence[RawDocument], min_doc_freq: int = DEFAULT_MIN_DOC_FREQ
) -> Vocabulary:
    """Keep tokens seen in at least ``min_doc_freq`` training documents, sorted lexicographically."""
    if not train_docs:
        raise CorpusError("cannot build a vocabulary from zero documents")
    df: Counter[str] = Counter()
    for doc in train_docs:
        df.update(set(tokenize(doc.text)))
    kept = sorted(t for t, c in df.items() if c >= min_doc_freq)
    if not kept:
        raise CorpusError(f"no token occurs in >= {min_doc_freq} training documents")
    return Vocabulary([PAD_TOKEN, UNK_TOKEN, *kept], {t: df[t] for t in kept}, min_doc_freq)


# -- labels ---------------------------------------------------------------------

DIAGNOSIS, PROCEDURE = "diagnosis", "procedure"


@dataclass
class LabelSpace:
    labels: list[str]
    description_text: dict[str, str] = field(default_factory=dict)
    kind: dict[str, str] = field(default_factory=dict)
    descriptions: dict[str, list[int]] = field(default_factory=dict)
    label_to_index: dict[str, int] = field(init=False)

    def __post_init__(self):
        self.label_to_index = {c: i for i, c in enumerate(self.labels)}

    def __len__(self) -> int:
        return len(self.labels)

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.labels).encode("utf-8")).hexdigest()

    def encode_descriptions(self, vocab: Vocabulary) -> None:
        self.descriptions = {
            code: vocab.encode_tokens(tokenize(text)) for code, text in self.description_text.items()
        }

    def description_ids(self) -> list[list[int] | None]:
        """Per label index, the description token ids (None when missing or empty)."""
        return [self.descriptions.get(code) or None for code in self.labels]

    def kinds(self) -> list[str | None]:
        return [self.kind.get(code) for code in self.labels]

    def to_json(self) -> dict:
        return {
            "labels": self.labels,
            "descriptions": {c: self.description_text[c] for c in sorted(self.description_text)},
            "kinds": {c: self.kind[c] for c in sorted(self.kind)},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "LabelSpace":
        return cls(list(obj["labels"]), dict(obj.get("descriptions", {})), dict(obj.get("kinds", {})))


def build_label_space(docs: Iterable[RawDocument], descriptions: dict[str, str] | None = None,
                      kinds: dict[str, str] | None = None) -> LabelSpace:
    codes = sorted({c for d in docs for c in d.labels})
    descriptions = descriptions or {}
    kinds = kinds or {}
    return LabelSpace(
        codes,
        {c: descriptions[c] for c in codes if c in descriptions},
        {c: kinds[c] for c in codes if c in kinds},
    )


# -- encoding -------------------------------------------------------------------

@dataclass
class EncodedDocument:
    doc_id: str
    token_ids: np.ndarray
    label_vector: np.ndarray
    tokens: list[str] = field(default_factory=list)
    dropped_labels: int = 0

    @property
    def N(self) -> int:
        return len(self.token_ids)

    def to_json(self) -> dict:
        return {
            "doc_id": self.doc_id,
            "token_ids": self.token_ids.tolist(),
            "labels": np.flatnonzero(self.label_vector).tolist(),
            "tokens": self.tokens,
        }

    @classmethod
    def from_json(cls, obj: dict, n_labels: int) -> "EncodedDocument":
        y = np.zeros(n_labels)
        y[obj["labels"]] = 1.0
        return cls(obj["doc_id"], np.asarray(obj["token_ids"], dtype=np.int64), y, list(obj.get("tokens", [])))


def encode(doc: RawDocument, vocab: Vocabulary, space: LabelSpace,
           max_len: int = DEFAULT_MAX_LEN) -> EncodedDocument:
    tokens = tokenize(doc.text)[:max_len]
    if not tokens:
        raise CorpusError(f"document {doc.doc_id!r} has no tokens after preprocessing")
    y = np.zeros(len(space))
    dropped = 0
    for code in doc.labels:
        idx = space.label_to_index.get(code)
        if idx is None:
            dropped += 1
        else:
            y[idx] = 1.0
    return EncodedDocument(doc.doc_id, np.asarray(vocab.encode_tokens(tokens), dtype=np.int64), y,
                           tokens, dropped)


def encode_all(docs: Sequence[RawDocument], vocab: Vocabulary, space: LabelSpace,
               max_len: int = DEFAULT_MAX_LEN) -> list[EncodedDocument]:
    out = [encode(d, vocab, space, max_len) for d in docs]
    dropped = sum(d.dropped_labels for d in out)
    if dropped:
        logger.warning("dropped %d label occurrences outside the label space", dropped)
    return out


# -- splitting ------------------------------------------------------------------

def _group_unit(group_id: str, seed: int) -> float:
    digest = hashlib.sha256(f"{seed}\x00{group_id}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") / 2.0**64


def split_by_group(docs: Sequence[RawDocument], fractions=(0.8, 0.1, 0.1), seed: int = 0):
    """Assign whole groups to (train, validation, test) by a seeded hash of the group id."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise CorpusError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    cuts = np.cumsum(fractions)[:2]
    splits: tuple[list, list, list] = ([], [], [])
    for doc in docs:
        u = _group_unit(doc.group_id, seed)
        splits[int(np.searchsorted(cuts, u, side="right"))].append(doc)
    for name, part in zip(("train", "validation", "test"), splits):
        if not part:
            raise CorpusError(f"{name} split is empty")
    return splits


# -- file formats ---------------------------------------------------------------

def read_corpus(path) -> list[RawDocument]:
    docs, seen = [], set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                doc = RawDocument(str(obj["doc_id"]), str(obj.get("group_id", obj["doc_id"])),
                                  str(obj["text"]), frozenset(str(c) for c in obj.get("labels", [])))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise CorpusError(f"{path}:{lineno}: malformed document ({exc})") from None
            if doc.doc_id in seen:
                raise CorpusError(f"{path}:{lineno}: duplicate doc_id {doc.doc_id!r}")
            seen.add(doc.doc_id)
            docs.append(doc)
    if not docs:
        raise CorpusError(f"{path}: corpus is empty")
    return docs


def write_corpus(docs: Iterable[RawDocument], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in docs:
            obj = {"doc_id": d.doc_id, "group_id": d.group_id, "text": d.text, "labels": sorted(d.labels)}
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")


def write_encoded(docs: Iterable[EncodedDocument], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in docs:
            fh.write(json.dumps(d.to_json(), ensure_ascii=False, separators=(",", ":")) + "\n")


def read_encoded(path, n_labels: int) -> list[EncodedDocument]:
    with open(path, encoding="utf-8") as fh:
        return [EncodedDocument.from_json(json.loads(line), n_labels) for line in fh if line.strip()]


def read_descriptions(path) -> tuple[dict[str, str], dict[str, str]]:
    """Read ``code,description[,kind]`` CSV; returns (descriptions, kinds)."""
    desc, kinds = {}, {}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"code", "description"} <= set(reader.fieldnames):
            raise CorpusError(f"{path}: expected header 'code,description'")
        for row in reader:
            desc[row["code"]] = row["description"]
            kind = (row.get("kind") or "").strip().lower()
            if kind in (DIAGNOSIS, PROCEDURE):
                kinds[row["code"]] = kind
    return desc, kinds


# -- embeddings -----------------------------------------------------------------

def random_embeddings(n_tokens: int, d_e: int, rng: np.random.Generator) -> np.ndarray:
    bound = 0.5 / d_e
    table = rng.uniform(-bound, bound, size=(n_tokens, d_e))
    table[PAD] = 0.0
    return table


def load_embeddings(path, vocab: Vocabulary, d_e: int, seed: int = 0) -> np.ndarray:
    """Read ``token v1 ... v_d`` lines into a table aligned with ``vocab``.

    Tokens the file does not cover get Uniform(-0.5/d_e, 0.5/d_e) rows; PAD is zero.
    """
    table = random_embeddings(len(vocab), d_e, make_rng(seed, "embeddings"))
    found = np.zeros(len(vocab), dtype=bool)
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").rstrip().split(" ")
            if not parts or parts == [""]:
                continue
            if lineno == 1 and len(parts) == 2 and all(p.isdigit() for p in parts):
                continue  # "<count> <dim>" header
            vec = parts[1:]
            if dim is None:
                dim = len(vec)
                if dim != d_e:
                    raise CorpusError(f"{path}: embedding dimension {dim} does not match configured d_e={d_e}")
            elif len(vec) != dim:
                raise CorpusError(f"{path}:{lineno}: vector has {len(vec)} dims, expected {dim}")
            idx = vocab.token_to_index.get(parts[0])
            if idx is None or idx == PAD:
                continue
            try:
                table[idx] = np.asarray(vec, dtype=np.float64)
            except ValueError:
                raise CorpusError(f"{path}:{lineno}: non-numeric vector entry") from None
            found[idx] = True
    if not np.all(np.isfinite(table)):
        raise CorpusError(f"{path}: non-finite embedding values")
    logger.info("embeddings: %d of %d vocabulary rows from %s", int(found.sum()), len(vocab), path)
    return table
