"""Candidate scoring, the three accuracy metrics, and the training loop."""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .config import Config
from .data import N_CHOICES, Instance
from .embedding import Vocab
from .kb import KnowledgeBase
from .model import Model, collate
from .pipeline import tokenize

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


def softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class ScoreVector:
    scores: np.ndarray

    @property
    def probabilities(self) -> np.ndarray:
        return softmax(self.scores)

    @property
    def argmax(self) -> int:
        # np.argmax returns the first maximal index
        return int(np.argmax(self.scores))


def score_pair(inst: Instance, cand: int, model: Model, kb: KnowledgeBase, k=None) -> float:
    enc = model.encode_pair(inst, cand, kb, k)
    return float(model.forward(collate([enc]))[0])


def _score_instances(insts: Sequence[Instance], model: Model, kb, k=None) -> np.ndarray:
    encs = [model.encode_pair(inst, c, kb, k) for inst in insts for c in range(N_CHOICES)]
    return model.forward(collate(encs)).reshape(len(insts), N_CHOICES)


def predict(inst: Instance, model: Model, kb: KnowledgeBase, k=None) -> ScoreVector:
    return ScoreVector(_score_instances([inst], model, kb, k)[0])


def accuracy_metrics(records: Iterable[tuple[str, str, bool]]) -> dict:
    """Metrics from ``(id, mode, correct)`` records.

    ``acc_joint`` counts ids whose QtoA and QAtoR predictions are both
    correct, over ids that have both; ids with only one mode are listed in
    ``unpaired``. A metric with no instances is None.
    """
    by_id: dict[str, dict[str, bool]] = {}
    qa, qar = [], []
    for iid, mode, ok in records:
        (qa if mode == "QtoA" else qar).append(bool(ok))
        by_id.setdefault(iid, {})[mode] = bool(ok)
    paired = [v for v in by_id.values() if len(v) == 2]
    unpaired = sorted(i for i, v in by_id.items() if len(v) != 2)
    mean = lambda xs: (sum(xs) / len(xs)) if xs else None
    return {
        "acc_QA": mean(qa),
        "acc_QAR_given": mean(qar),
        "acc_joint": mean([v["QtoA"] and v["QAtoR"] for v in paired]),
        "n_QA": len(qa),
        "n_QAR": len(qar),
        "n_joint": len(paired),
        "unpaired": unpaired,
    }


def evaluate(dataset: Sequence[Instance], model: Model, kb: KnowledgeBase, k=None,
             threads: int = 1, chunk: int = 64) -> dict:
    chunks = [dataset[i : i + chunk] for i in range(0, len(dataset), chunk)]

    def run(part):
        # Model.forward keeps a cache, so each worker gets its own shallow copy
        worker = Model(model.config, model.vocab, model.params)
        return _score_instances(part, worker, kb, k)

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            scores = list(pool.map(run, chunks))
    else:
        scores = [run(c) for c in chunks]
    records = []
    for part, s in zip(chunks, scores):
        for inst, row in zip(part, s):
            records.append((inst.id, inst.mode, int(np.argmax(row)) == inst.gold))
    result = accuracy_metrics(records)
    if result["unpaired"] and result["n_QAR"]:
        log.info("%d ids lack a QtoA/QAtoR partner and are excluded from acc_joint",
                 len(result["unpaired"]))
    return result


def build_vocab(instances: Iterable[Instance], kb: KnowledgeBase) -> Vocab:
    lists = []
    for inst in instances:
        lists.append(inst.query)
        lists.extend(inst.responses)
    for f in kb.facts:
        lists.append(tokenize(f.head))
        lists.append(tokenize(f.tail))
    return Vocab.build(lists)


class SGD:
    """SGD with momentum and L2 weight decay, updating arrays in place.

    With ``clip_norm`` the gradient is rescaled so its global L2 norm is at
    most ``clip_norm`` before the decay term is added.
    """

    def __init__(self, params: dict, lr: float, momentum: float, weight_decay: float,
                 clip_norm: float | None = None):
        self.params = params
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.clip_norm = clip_norm
        self.velocity = {k: np.zeros_like(v) for k, v in params.items()}
        self.last_norm = 0.0

    def step(self, grads: dict):
        self.last_norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        scale = 1.0
        if self.clip_norm is not None and self.last_norm > self.clip_norm:
            scale = self.clip_norm / self.last_norm
        for name, g in grads.items():
            if scale != 1.0:
                g = g * scale
            p = self.params[name]
            v = self.velocity[name]
            v *= self.momentum
            v += g + self.weight_decay * p
            p -= self.lr * v


def cross_entropy(scores: np.ndarray, gold: np.ndarray):
    """Mean 4-way cross-entropy and its gradient w.r.t. the scores."""
    probs = softmax(scores)
    rows = np.arange(len(gold))
    z = scores - scores.max(axis=1, keepdims=True)
    logp = z[rows, gold] - np.log(np.exp(z).sum(axis=1))
    d = probs.copy()
    d[rows, gold] -= 1.0
    return float(-logp.mean()), d / len(gold)


def train(dataset: Sequence[Instance], config: Config, kb: KnowledgeBase,
          eval_set: Sequence[Instance] | None = None, vocab: Vocab | None = None,
          on_epoch: Callable[[dict], None] | None = None):
    """Fit a fresh model; returns ``(model, metrics_log)``.

    One log record per epoch with the mean training loss and the accuracy
    metrics on ``eval_set`` (the training set when no eval set is given).
    """
    if not dataset:
        raise ValueError("training set is empty")
    rng = np.random.default_rng(config.seed)
    vocab = vocab if vocab is not None else build_vocab(dataset, kb)
    model = Model(config, vocab)
    encoded = [[model.encode_pair(inst, c, kb) for c in range(N_CHOICES)] for inst in dataset]
    gold = np.array([inst.gold for inst in dataset])
    opt = SGD(model.params, config.lr, config.momentum, config.weight_decay, config.clip_norm)
    history = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(dataset))
        total, seen = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            batch = collate([e for i in idx for e in encoded[i]])
            scores = model.forward(batch).reshape(len(idx), N_CHOICES)
            loss, dscores = cross_entropy(scores, gold[idx])
            if not math.isfinite(loss):
                raise TrainingDiverged(
                    f"loss became {loss} at epoch {epoch}, batch starting {start}; "
                    f"try a smaller learning rate than {config.lr}"
                )
            opt.step(model.backward(dscores.reshape(-1)))
            total += loss * len(idx)
            seen += len(idx)
        metrics = evaluate(eval_set if eval_set is not None else dataset, model, kb)
        record = {
            "epoch": epoch,
            "loss": total / seen,
            "acc_QA": metrics["acc_QA"],
            "acc_QAR_given": metrics["acc_QAR_given"],
            "acc_joint": metrics["acc_joint"],
        }
        history.append(record)
        log.info("epoch %d loss %.4f acc_QA %s", epoch, record["loss"], record["acc_QA"])
        if on_epoch is not None:
            on_epoch(record)
    return model, history


def metrics_jsonl(history: Sequence[dict]) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in history)
