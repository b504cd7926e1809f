import time
from dataclasses import dataclass

import pytest

from caml.corpus import build_label_space, build_vocabulary, encode_all, split_by_group
from caml.linear import lr_train
from caml.synthetic import SyntheticCorpus, make_trigger_corpus
from caml.training import TrainConfig, train


@dataclass
class Dataset:
    corpus: SyntheticCorpus
    vocab: object
    space: object
    train: list
    val: list
    test: list

    @property
    def all_docs(self):
        return self.train + self.val + self.test


def build_dataset(fractions=(0.7, 0.15, 0.15), split_seed=0, **corpus_kw) -> Dataset:
    sc = make_trigger_corpus(**corpus_kw)
    tr, va, te = split_by_group(sc.docs, fractions, split_seed)
    vocab = build_vocabulary(tr, 1)
    space = build_label_space(sc.docs, sc.descriptions, sc.kinds)
    space.encode_descriptions(vocab)
    return Dataset(sc, vocab, space, *(encode_all(part, vocab, space) for part in (tr, va, te)))


@pytest.fixture(scope="session")
def small_dataset():
    return build_dataset(n_docs=60, n_labels=6, n_filler=40, n_trigger_words=24, length=(20, 30), seed=5)


# configuration of the end-to-end synthetic run shared by the explanation and acceptance tests
SYNTHETIC_CONFIG = dict(d_e=32, d_c=16, k=4, eta=3e-3, q=0.2, batch_size=16, patience=10, max_epochs=100,
                        val_metric="micro_f1", seed=0)


@dataclass
class SyntheticRun:
    data: Dataset
    caml: object  # Checkpoint
    lr: object  # LrParams
    caml_seconds: float


@pytest.fixture(scope="session")
def synthetic_run():
    data = build_dataset()
    start = time.perf_counter()
    ckpt = train(data.train, data.val, data.vocab, data.space, TrainConfig(**SYNTHETIC_CONFIG))
    seconds = time.perf_counter() - start
    lr = lr_train(data.train, len(data.vocab), len(data.space))
    return SyntheticRun(data, ckpt, lr, seconds)


def overlaps(start, k, trigger_start, width=4):
    return start < trigger_start + width and trigger_start < start + k


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
