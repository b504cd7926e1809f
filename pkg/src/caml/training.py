"""Loss assembly, Adam, the early-stopping training loop, and model checkpoints."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Mapping, Sequence

import numpy as np

from . import checkpoint as container
from .checkpoint import CheckpointError, HashMismatchError
from .corpus import EncodedDocument, LabelSpace, Vocabulary, random_embeddings
from .metrics import PredictionMatrix, micro_prf, precision_at_n
from .model import (
    WEIGHT_TENSORS,
    CamlParams,
    ModelKind,
    backward,
    desc_traces_for,
    dropout_mask,
    forward,
    init_params,
    predict,
)
from .numerics import make_rng

logger = logging.getLogger(__name__)

EPS_CLAMP = 1e-12


class TrainingError(RuntimeError):
    """Numerical failure during training (non-finite loss)."""


@dataclass
class TrainConfig:
    model_kind: str = "caml"
    d_e: int = 100
    d_c: int = 50
    k: int = 10
    q: float = 0.2
    rho: float = 0.0
    eta: float = 1e-4
    lam: float = 0.0
    batch_size: int = 16
    patience: int = 10
    max_epochs: int = 200
    seed: int = 0
    eval_n: int = 8
    val_metric: str = "p_at_n"  # or "micro_f1"
    # logistic-regression baseline
    lr_l2: float = 1e-3
    lr_epochs: int = 300

    def __post_init__(self):
        self.model_kind = str(getattr(self.model_kind, "value", self.model_kind))
        if self.model_kind not in ("caml", "cnn", "lr"):
            raise ValueError(f"unknown model kind {self.model_kind!r}")
        if not 0.0 <= self.q < 1.0:
            raise ValueError(f"dropout q must be in [0, 1), got {self.q}")
        if self.eta <= 0:
            raise ValueError(f"learning rate must be positive, got {self.eta}")
        if self.lam < 0 or self.rho < 0 or self.lr_l2 < 0:
            raise ValueError("lam, rho and lr_l2 must be non-negative")
        if min(self.d_e, self.d_c, self.k, self.batch_size, self.max_epochs, self.eval_n) < 1:
            raise ValueError("dimensions, batch size, max_epochs and eval_n must be >= 1")
        if self.val_metric not in ("p_at_n", "micro_f1"):
            raise ValueError(f"val_metric must be 'p_at_n' or 'micro_f1', got {self.val_metric!r}")
        if self.patience < 0:
            raise ValueError("patience must be >= 0")

    @classmethod
    def for_model(cls, kind: str, **overrides) -> "TrainConfig":
        """Built-in defaults per model (tuned values reported for CAML and the CNN)."""
        base = {"cnn": {"d_c": 500, "k": 4, "eta": 3e-3}}.get(kind, {})
        return cls(model_kind=kind, **{**base, **overrides})

    @classmethod
    def from_mapping(cls, values: Mapping) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        values = dict(values)
        return cls.for_model(values.pop("model_kind", "caml"), **values)

    def to_dict(self) -> dict:
        return asdict(self)


# -- loss -----------------------------------------------------------------------

def bce(yhat, y) -> float:
    p = np.clip(np.asarray(yhat, dtype=np.float64), EPS_CLAMP, 1.0 - EPS_CLAMP)
    y = np.asarray(y, dtype=np.float64)
    return float(-(y * np.log(p) + (1.0 - y) * np.log1p(-p)).sum())


def l2_penalty(params: CamlParams) -> float:
    t = params.tensors()
    return float(sum((t[n] * t[n]).sum() for n in WEIGHT_TENSORS if n in t))


def desc_penalty(params: CamlParams, y, z: Mapping[int, np.ndarray]) -> float:
    """Mean over positive labels of ``||z_l - beta_l||_2`` (0 when there are none)."""
    positives = np.flatnonzero(np.asarray(y) > 0.5)
    if positives.size == 0:
        return 0.0
    total = sum(float(np.linalg.norm(z[int(l)] - params.out_weight[l])) for l in positives)
    return total / positives.size


def loss(yhat, y, params: CamlParams, lam: float = 0.0, rho: float = 0.0,
         z: Mapping[int, np.ndarray] | None = None) -> float:
    """BCE + rho * squared L2 of non-bias weights + lam * description penalty."""
    total = bce(yhat, y)
    if rho > 0.0:
        total += rho * l2_penalty(params)
    if lam > 0.0:
        total += lam * desc_penalty(params, y, z or {})
    return total


# -- Adam -----------------------------------------------------------------------

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState, eta: float) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if p.shape != g.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= eta * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


# -- checkpoints ----------------------------------------------------------------

@dataclass
class Checkpoint:
    kind: str
    params: object  # CamlParams or LrParams
    config: TrainConfig
    vocab_hash: str
    label_hash: str
    best_val: float | None = None
    epoch: int = 0
    history: list[dict] = field(default_factory=list)

    def predict(self, docs) -> np.ndarray:
        if self.kind == "lr":
            from .linear import lr_predict_docs

            return lr_predict_docs(docs, self.params)
        return predict(self.params, docs, ModelKind(self.kind))


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    meta = {
        "format": 1,
        "kind": ckpt.kind,
        "config": ckpt.config.to_dict(),
        "vocab_hash": ckpt.vocab_hash,
        "label_hash": ckpt.label_hash,
        "best_val": ckpt.best_val,
        "epoch": ckpt.epoch,
        "history": ckpt.history,
    }
    container.write_container(path, meta, ckpt.params.tensors())


def load_checkpoint(path, vocab: Vocabulary | None = None, space: LabelSpace | None = None) -> Checkpoint:
    """Read a checkpoint; refuse it if ``vocab``/``space`` are given and do not match."""
    meta, tensors = container.read_container(path)
    try:
        kind = meta["kind"]
        config = TrainConfig.from_mapping(meta["config"])
        if kind == "lr":
            from .linear import LrParams

            params = LrParams.from_tensors(tensors)
        else:
            params = CamlParams.from_tensors(tensors)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: invalid checkpoint contents ({exc})") from None
    if vocab is not None and vocab.digest() != meta["vocab_hash"]:
        raise HashMismatchError(f"{path}: vocabulary hash does not match this dataset")
    if space is not None and space.digest() != meta["label_hash"]:
        raise HashMismatchError(f"{path}: label-space hash does not match this dataset")
    return Checkpoint(kind, params, config, meta["vocab_hash"], meta["label_hash"],
                      meta.get("best_val"), meta.get("epoch", 0), meta.get("history", []))


# -- training loop --------------------------------------------------------------

def batch_loss_and_grads(params: CamlParams, batch: Sequence[EncodedDocument], config: TrainConfig,
                         descriptions: Sequence | None = None, rng: np.random.Generator | None = None):
    """Mean loss and gradients over a minibatch; dropout masks drawn from ``rng``."""
    kind = ModelKind(config.model_kind)
    desc = {}
    if config.lam > 0.0:
        needed = sorted({int(l) for d in batch for l in np.flatnonzero(d.label_vector > 0.5)})
        desc = desc_traces_for(params, needed, descriptions)
    grads = None
    total = 0.0
    for doc in batch:
        mask = dropout_mask(rng, doc.N, params.d_e, config.q) if rng is not None else None
        trace = forward(params, doc.token_ids, kind, mask)
        total += loss(trace.yhat, doc.label_vector, params, lam=config.lam,
                      z={l: t.z for l, t in desc.items()})
        g = backward(trace, params, doc.label_vector, lam=config.lam, desc_traces=desc)
        if grads is None:
            grads = g
        else:
            for name in grads:
                grads[name] += g[name]
    scale = 1.0 / len(batch)
    for name in grads:
        grads[name] *= scale
    total *= scale
    if config.rho > 0.0:
        total += config.rho * l2_penalty(params)
        tensors = params.tensors()
        for name in WEIGHT_TENSORS:
            if name in tensors:
                grads[name] += 2.0 * config.rho * tensors[name]
        grads["embeddings"][0] = 0.0
    return total, grads


def validation_score(params: CamlParams, docs: Sequence[EncodedDocument], config: TrainConfig) -> float:
    """Early-stopping metric: precision@eval_n (default) or micro-F1."""
    scores = predict(params, docs, ModelKind(config.model_kind))
    pm = PredictionMatrix(scores, np.vstack([d.label_vector for d in docs]))
    if config.val_metric == "micro_f1":
        return micro_prf(pm)[2]
    return precision_at_n(pm, min(config.eval_n, scores.shape[1]))


def train(
    train_docs: Sequence[EncodedDocument],
    val_docs: Sequence[EncodedDocument],
    vocab: Vocabulary,
    space: LabelSpace,
    config: TrainConfig,
    embeddings: np.ndarray | None = None,
    val_scorer: Callable[[CamlParams, int], float] | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> Checkpoint:
    """Minibatch Adam with early stopping on a validation metric (precision@n by default).

    ``val_scorer(params, epoch)`` replaces the validation metric when given.
    Returns the checkpoint of the best epoch (earliest on ties).
    """
    if not train_docs:
        raise ValueError("no training documents")
    if val_scorer is None and not val_docs:
        raise ValueError("no validation documents")
    kind = ModelKind(config.model_kind)
    if embeddings is None:
        embeddings = random_embeddings(len(vocab), config.d_e, make_rng(config.seed, "embeddings"))
    if embeddings.shape != (len(vocab), config.d_e):
        raise ValueError(f"embedding table {embeddings.shape} does not match vocab/d_e {(len(vocab), config.d_e)}")
    if not np.all(np.isfinite(embeddings)):
        raise ValueError("embedding table contains non-finite values")
    descriptions = None
    if config.lam > 0.0:
        if not space.descriptions:
            space.encode_descriptions(vocab)
        descriptions = space.description_ids()

    params = init_params(embeddings, len(space), config.d_c, config.k, make_rng(config.seed, "init"),
                         with_desc=config.lam > 0.0)
    state = AdamState()
    shuffle_rng = make_rng(config.seed, "shuffle")
    dropout_rng = make_rng(config.seed, "dropout")
    tensors = params.tensors()

    best_val, best_params, best_epoch, stale = -math.inf, params.copy(), 0, 0
    history = []
    n = len(train_docs)
    for epoch in range(1, config.max_epochs + 1):
        order = shuffle_rng.permutation(n)
        epoch_loss = 0.0
        for b, start in enumerate(range(0, n, config.batch_size)):
            batch = [train_docs[i] for i in order[start:start + config.batch_size]]
            batch_loss, grads = batch_loss_and_grads(params, batch, config, descriptions, dropout_rng)
            if not np.isfinite(batch_loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            adam_step(tensors, grads, state, config.eta)
            epoch_loss += batch_loss * len(batch)
        val = val_scorer(params, epoch) if val_scorer is not None else validation_score(params, val_docs, config)
        record = {"epoch": epoch, "loss": epoch_loss / n, "val": float(val)}
        history.append(record)
        if on_epoch is not None:
            on_epoch(record)
        logger.info("epoch %d loss %.6f val %s %.4f", epoch, record["loss"], config.val_metric, val)
        if val > best_val:
            best_val, best_params, best_epoch, stale = float(val), params.copy(), epoch, 0
        else:
            stale += 1
        if stale >= config.patience:
            break

    return Checkpoint(kind.value, best_params, config, vocab.digest(), space.digest(), best_val, best_epoch, history)
