"""``caml`` command line: preprocess, train, evaluate, explain, gradcheck, synthesize.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import corpus
from .checkpoint import CheckpointError
from .corpus import CorpusError, LabelSpace, Vocabulary
from .explain import (
    Method,
    build_idf,
    build_review_sheet,
    dump_sheets,
    explain_attention,
    explain_cosine,
    explain_lr,
    explain_maxpool,
)
from .linear import lr_predict_docs, lr_train
from .metrics import PredictionMatrix, evaluate, precision_at_n
from .model import ModelKind, forward
from .numerics import backend_name, make_rng
from .training import Checkpoint, TrainConfig, TrainingError, load_checkpoint, save_checkpoint, train

logger = logging.getLogger("caml")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3
SPLITS = ("train", "val", "test")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- helpers ----------------------------------------------------------------------

def _load_config(path) -> dict:
    if path is None:
        return {}
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file {path} not found")
    if path.suffix == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # python < 3.11
            import tomli as tomllib
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    return json.loads(path.read_text(encoding="utf-8"))


def _train_section(cfg: dict) -> dict:
    flat = {k: v for k, v in cfg.items() if not isinstance(v, dict)}
    return {**flat, **cfg.get("train", {})}


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _atomic_write(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _write_manifest(out_dir: Path, command: str, config: dict, seed: int, inputs, outputs, started: float):
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": {str(p): _sha256(p) for p in inputs if p is not None and Path(p).is_file()},
        "outputs": sorted(str(p) for p in outputs),
        "backend": backend_name(),
        "wall_time_s": round(time.time() - started, 3),
    }
    _atomic_write(out_dir / f"manifest_{command}.json", json.dumps(manifest, indent=1, sort_keys=True) + "\n")


class Dataset:
    """A preprocessed dataset directory."""

    def __init__(self, path):
        self.path = Path(path)
        if not (self.path / "vocab.tsv").is_file():
            raise CorpusError(f"{self.path} is not a preprocessed dataset (vocab.tsv missing)")
        self.vocab = Vocabulary.load(self.path / "vocab.tsv")
        self.space = LabelSpace.from_json(json.loads((self.path / "labels.json").read_text(encoding="utf-8")))
        self.space.encode_descriptions(self.vocab)
        self._splits = {}

    def split(self, name: str):
        if name not in SPLITS:
            raise UsageError(f"unknown split {name!r}; choose from {SPLITS}")
        if name not in self._splits:
            self._splits[name] = corpus.read_encoded(self.path / f"{name}.jsonl", len(self.space))
        return self._splits[name]


# -- commands -----------------------------------------------------------------------

def cmd_preprocess(args) -> int:
    started = time.time()
    cfg = _load_config(args.config).get("preprocess", {})
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    min_df = args.min_doc_freq if args.min_doc_freq is not None else cfg.get("min_doc_freq", corpus.DEFAULT_MIN_DOC_FREQ)
    max_len = args.max_len if args.max_len is not None else cfg.get("max_len", corpus.DEFAULT_MAX_LEN)
    fractions = tuple(args.fractions or cfg.get("fractions", (0.8, 0.1, 0.1)))

    docs = corpus.read_corpus(args.corpus)
    descriptions, kinds = corpus.read_descriptions(args.descriptions) if args.descriptions else ({}, {})
    train_raw, val_raw, test_raw = corpus.split_by_group(docs, fractions, seed)
    vocab = corpus.build_vocabulary(train_raw, min_df)
    space = corpus.build_label_space(docs, descriptions, kinds)

    out = Path(args.out_dir or "data")
    out.mkdir(parents=True, exist_ok=True)
    vocab.save(out / "vocab.tsv")
    (out / "labels.json").write_text(json.dumps(space.to_json(), indent=1, sort_keys=True, ensure_ascii=False) + "\n",
                                     encoding="utf-8")
    stats = {"vocabulary_size": len(vocab), "total_labels": len(space), "splits": {}}
    outputs = [out / "vocab.tsv", out / "labels.json", out / "stats.json"]
    for name, raw in zip(SPLITS, (train_raw, val_raw, test_raw)):
        enc = corpus.encode_all(raw, vocab, space, max_len)
        corpus.write_encoded(enc, out / f"{name}.jsonl")
        outputs.append(out / f"{name}.jsonl")
        stats["splits"][name] = {
            "documents": len(enc),
            "groups": len({d.group_id for d in raw}),
            "mean_tokens": float(np.mean([d.N for d in enc])),
            "mean_labels": float(np.mean([d.label_vector.sum() for d in enc])),
            "labels_present": int((np.vstack([d.label_vector for d in enc]).sum(axis=0) > 0).sum()),
            "dropped_labels": int(sum(d.dropped_labels for d in enc)),
        }
    (out / "stats.json").write_text(json.dumps(stats, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    snapshot = {"min_doc_freq": min_df, "max_len": max_len, "fractions": list(fractions)}
    _write_manifest(out, "preprocess", snapshot, seed, [args.corpus, args.descriptions], outputs, started)
    s = stats["splits"]
    print(f"vocabulary {len(vocab)} tokens, {len(space)} labels; "
          + ", ".join(f"{k} {v['documents']} docs" for k, v in s.items()))
    return 0


_TRAIN_FLAGS = ("d_e", "d_c", "k", "q", "rho", "eta", "lam", "batch_size", "patience", "max_epochs",
                "eval_n", "val_metric", "lr_l2", "lr_epochs")


def _train_config(args) -> TrainConfig:
    values = _train_section(_load_config(args.config))
    if args.model is not None:
        values["model_kind"] = args.model
    for name in _TRAIN_FLAGS:
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    if args.seed is not None:
        values["seed"] = args.seed
    try:
        return TrainConfig.from_mapping(values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None


def cmd_train(args) -> int:
    started = time.time()
    data_dir = Path(args.data)
    if not data_dir.is_dir():
        raise CorpusError(f"dataset directory {data_dir} does not exist")
    config = _train_config(args)
    ds = Dataset(data_dir)
    train_docs, val_docs = ds.split("train"), ds.split("val")
    out = Path(args.out_dir or "runs")
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / f"{config.model_kind}.ckpt"

    if config.model_kind == "lr":
        params = lr_train(train_docs, len(ds.vocab), len(ds.space), config.lr_l2, config.lr_epochs)
        scores = lr_predict_docs(val_docs, params)
        truth = np.vstack([d.label_vector for d in val_docs])
        val = precision_at_n(PredictionMatrix(scores, truth), min(config.eval_n, len(ds.space)))
        print(f"logistic regression: final loss {params.history[-1]:.6f}, validation P@{config.eval_n} {val:.4f}")
        ckpt = Checkpoint("lr", params, config, ds.vocab.digest(), ds.space.digest(), val, config.lr_epochs,
                          [{"epoch": config.lr_epochs, "loss": params.history[-1], "val": val}])
    else:
        embeddings = None
        if args.embeddings:
            embeddings = corpus.load_embeddings(args.embeddings, ds.vocab, config.d_e, config.seed)

        def report(rec):
            print(f"epoch {rec['epoch']:3d}  loss {rec['loss']:.6f}  val {config.val_metric} {rec['val']:.4f}",
                  flush=True)

        ckpt = train(train_docs, val_docs, ds.vocab, ds.space, config, embeddings, on_epoch=report)
        print(f"best epoch {ckpt.epoch} (val {config.val_metric} {ckpt.best_val:.4f})")
    save_checkpoint(ckpt, ckpt_path)
    print(f"wrote {ckpt_path}")
    _write_manifest(out, "train", config.to_dict(), config.seed,
                    [data_dir / "vocab.tsv", data_dir / "train.jsonl", data_dir / "val.jsonl", args.embeddings],
                    [ckpt_path], started)
    return 0


def cmd_evaluate(args) -> int:
    started = time.time()
    ds = Dataset(args.data)
    ckpt = load_checkpoint(args.checkpoint, ds.vocab, ds.space)
    L = len(ds.space)
    if args.n:
        bad = [n for n in args.n if not 1 <= n <= L]
        if bad:
            raise UsageError(f"precision@n requested for n={bad} but the label space has only {L} labels")
        ns = args.n
    else:
        ns = [n for n in (5, 8, 15) if n <= L] or [L]
    docs = ds.split(args.split)
    scores = ckpt.predict(docs)
    pm = PredictionMatrix(scores, np.vstack([d.label_vector for d in docs]), args.threshold)
    report = evaluate(pm, ns, ds.space.labels, ds.space.kinds())
    out = Path(args.out_dir or Path(args.checkpoint).parent)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"report_{args.split}.json"
    path.write_text(report.to_json(), encoding="utf-8")
    print(report.table())
    print(f"wrote {path}")
    _write_manifest(out, "evaluate", {"split": args.split, "n": list(ns), "threshold": args.threshold},
                    ckpt.config.seed, [args.checkpoint], [path], started)
    return 0


def cmd_explain(args) -> int:
    started = time.time()
    ds = Dataset(args.data)
    caml_ckpt = load_checkpoint(args.checkpoint, ds.vocab, ds.space)
    if caml_ckpt.kind == "lr":
        raise UsageError("--checkpoint must be a neural (caml or cnn) checkpoint")
    ckpts = {caml_ckpt.kind: caml_ckpt}
    for path in (args.cnn_checkpoint, args.lr_checkpoint):
        if path:
            c = load_checkpoint(path, ds.vocab, ds.space)
            ckpts[c.kind] = c
    available = []
    if "caml" in ckpts:
        available.append(Method.ATTENTION)
    if "cnn" in ckpts:
        available.append(Method.MAXPOOL)
    if "lr" in ckpts:
        available.append(Method.LR)
    has_desc = bool(ds.space.description_text)
    if has_desc:
        available.append(Method.COSINE)
    if args.methods:
        methods = [Method(m) for m in args.methods]
        if Method.COSINE in methods and not has_desc:
            raise CorpusError("cosine_sim requested but the dataset has no code descriptions")
        missing = [m.value for m in methods if m not in available]
        if missing:
            raise UsageError(f"methods {missing} need a checkpoint that was not given")
    else:
        methods = available

    docs = ds.split(args.split)
    scorer = ckpts.get("caml") or caml_ckpt
    scores = scorer.predict(docs)
    pairs = [(i, int(l)) for i in range(len(docs)) for l in np.flatnonzero(scores[i] >= args.threshold)]
    rng = make_rng(args.seed if args.seed is not None else 0, "explain-sample")
    chosen = sorted(rng.choice(len(pairs), size=min(args.sample, len(pairs)), replace=False).tolist())
    idf = None
    if Method.COSINE in methods:
        notes = [d.tokens for s in SPLITS for d in ds.split(s)]
        idf = build_idf(notes, ds.space.description_text.values())

    sheets, keys, dropped = [], [], {m.value: 0 for m in methods}
    for pos in chosen:
        i, l = pairs[pos]
        doc, code = docs[i], ds.space.labels[l]
        snippets = []
        for m in methods:
            if m is Method.ATTENTION:
                c = ckpts["caml"]
                s = explain_attention(forward(c.params, doc.token_ids, ModelKind.CAML), l, doc.tokens,
                                      c.params.k, args.k, code)
            elif m is Method.MAXPOOL:
                c = ckpts["cnn"]
                s = explain_maxpool(forward(c.params, doc.token_ids, ModelKind.CNN), l, c.params.out_weight,
                                    doc.tokens, c.params.k, args.k, code)
            elif m is Method.LR:
                s = explain_lr(doc.token_ids, doc.tokens, l, ckpts["lr"].params, args.k, code)
            else:
                s = explain_cosine(doc.tokens, l, ds.space.description_text.get(code, ""), idf, args.k, code)
            if s is None:
                dropped[m.value] += 1
            else:
                snippets.append(s)
        sheet, key = build_review_sheet(doc.doc_id, code, ds.space.description_text.get(code, ""), snippets,
                                        args.seed if args.seed is not None else 0)
        sheets.append(sheet)
        keys.append(key)

    out = Path(args.out_dir or "review")
    dump_sheets(sheets, keys, out)
    for sheet in sheets[: args.show]:
        print(sheet.to_markdown())
    print(f"{len(sheets)} review sheets from {len(pairs)} predicted pairs; "
          f"absent snippets per method: {dropped}; wrote {out}/review_sheets.json and review_key.json")
    _write_manifest(out, "explain", {"methods": [m.value for m in methods], "sample": args.sample, "k": args.k},
                    args.seed or 0, [args.checkpoint, args.cnn_checkpoint, args.lr_checkpoint],
                    [out / "review_sheets.json", out / "review_sheets.md", out / "review_key.json"], started)
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck

    cfg = _load_config(args.config).get("gradcheck", {})
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    report = run_gradcheck(seed=seed, kind=args.model or cfg.get("model_kind", "caml"),
                           lam=cfg.get("lam", 0.1), rho=cfg.get("rho", 0.01), tol=args.tol,
                           inject_fault=args.inject_fault)
    print(f"gradient check ({backend_name()} kernels, tol {args.tol:g})")
    print("\n".join(report.lines()))
    print("PASS" if report.passed else f"FAIL: {', '.join(report.failed)}")
    return 0 if report.passed else EXIT_NUMERIC


def cmd_synthesize(args) -> int:
    from .synthetic import make_trigger_corpus

    seed = args.seed if args.seed is not None else 0
    sc = make_trigger_corpus(n_docs=args.n_docs, n_labels=args.n_labels, noise=args.noise, seed=seed)
    out = Path(args.out_dir or "synthetic")
    out.mkdir(parents=True, exist_ok=True)
    corpus.write_corpus(sc.docs, out / "corpus.jsonl")
    with open(out / "descriptions.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["code", "description", "kind"])
        for code in sorted(sc.descriptions):
            w.writerow([code, sc.descriptions[code], sc.kinds[code]])
    planted = {d: dict(sorted(v.items())) for d, v in sorted(sc.planted.items())}
    (out / "planted.json").write_text(json.dumps({"triggers": sc.triggers, "planted": planted}, indent=1,
                                                 sort_keys=True) + "\n", encoding="utf-8")
    print(f"wrote {len(sc.docs)} documents to {out}/corpus.jsonl")
    return 0


# -- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="TOML or JSON config file")
    common.add_argument("--seed", type=int, help="root seed")
    common.add_argument("--out-dir", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="caml", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("preprocess", parents=[common], help="tokenize, split and encode a JSONL corpus")
    s.add_argument("corpus")
    s.add_argument("--descriptions", help="CSV with header code,description[,kind]")
    s.add_argument("--min-doc-freq", type=int)
    s.add_argument("--max-len", type=int)
    s.add_argument("--fractions", type=float, nargs=3, metavar=("TRAIN", "VAL", "TEST"))
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("train", parents=[common], help="train CAML, the CNN or logistic regression")
    s.add_argument("--data", required=True, help="preprocessed dataset directory")
    s.add_argument("--model", choices=["caml", "cnn", "lr"])
    s.add_argument("--embeddings", help="word vectors in text format")
    for name in _TRAIN_FLAGS:
        kind = str if name == "val_metric" else (int if name in ("d_e", "d_c", "k", "batch_size", "patience",
                                                                  "max_epochs", "eval_n", "lr_epochs") else float)
        s.add_argument("--" + name.replace("_", "-"), dest=name, type=kind)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", parents=[common], help="metrics report for a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="test", choices=SPLITS)
    s.add_argument("--n", type=int, nargs="+", help="precision@n cut-offs (default 5 8 15)")
    s.add_argument("--threshold", type=float, default=0.5)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("explain", parents=[common], help="blind review sheets of top k-grams")
    s.add_argument("--checkpoint", required=True, help="CAML (or CNN) checkpoint")
    s.add_argument("--cnn-checkpoint")
    s.add_argument("--lr-checkpoint")
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="test", choices=SPLITS)
    s.add_argument("--sample", type=int, default=100)
    s.add_argument("--methods", nargs="+", choices=[m.value for m in Method])
    s.add_argument("--k", type=int, default=4)
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--show", type=int, default=3, help="sheets to print")
    s.set_defaults(func=cmd_explain)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of all gradients")
    s.add_argument("--model", choices=["caml", "cnn"])
    s.add_argument("--tol", type=float, default=1e-4)
    s.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("synthesize", parents=[common], help="write a planted-trigger demo corpus")
    s.add_argument("--n-docs", type=int, default=400)
    s.add_argument("--n-labels", type=int, default=20)
    s.add_argument("--noise", type=float, default=0.1)
    s.set_defaults(func=cmd_synthesize)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # usage errors (exit 1) and --help (exit 0)
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"caml {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingError as exc:
        print(f"caml {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointError, OSError, ValueError) as exc:  # CorpusError and ModelError are ValueErrors
        print(f"caml {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
