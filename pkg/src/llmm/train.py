"""Training loop with class-imbalance handling, and evaluation reports."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .cohort import MULTICLASS_LABELS, POSITIVE, UNLABELED, EncounterRecord
from .errors import ConfigError, DataError
from .fusion import Batch, FusionModel, ModelConfig
from .lab_encoder import NormStats
from .metrics import auprc, auroc, confusion_metrics, macro_one_vs_rest
from .optim import AdamState, adam_step, clip_grad_norm
from .text_encoder import build_vocab
from .textualize import build_input

log = logging.getLogger(__name__)

CLASS_WEIGHTING = ("none", "inverse_frequency", "oversample", "undersample")


@dataclass
class TrainConfig:
    mode: str = "fusion"
    task: str = "binary"
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    clip_norm: float = 1.0
    class_weighting: str = "inverse_frequency"
    patience: int = 5
    seed: int = 0
    vocab_min_freq: int = 1
    vocab_max_size: int = 8192
    model: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.class_weighting not in CLASS_WEIGHTING:
            raise ConfigError(f"class_weighting must be one of {CLASS_WEIGHTING}")

    def model_config(self) -> ModelConfig:
        return ModelConfig(mode=self.mode, task=self.task, **self.model)


def label_index(record: EncounterRecord, task: str) -> int | None:
    if task == "binary":
        if record.label_binary == UNLABELED:
            return None
        return int(record.label_binary == POSITIVE)
    if record.label_multiclass == UNLABELED:
        return None
    return MULTICLASS_LABELS.index(record.label_multiclass)


def labeled_targets(records: Sequence[EncounterRecord], task: str):
    kept, targets = [], []
    for r in records:
        y = label_index(r, task)
        if y is not None:
            kept.append(r)
            targets.append(y)
    return kept, np.asarray(targets, dtype=np.int64)


def class_weights(targets: np.ndarray, n_classes: int, scheme: str) -> np.ndarray:
    """Inverse-frequency weights ``N / (C * n_c)``; all ones on balanced data."""
    if scheme != "inverse_frequency":
        return np.ones(n_classes)
    counts = np.bincount(targets, minlength=n_classes)
    if (counts == 0).any():
        empty = [int(c) for c in np.flatnonzero(counts == 0)]
        raise ConfigError(f"inverse-frequency weights undefined: no training records of class {empty}")
    return targets.size / (n_classes * counts.astype(np.float64))


def _epoch_order(targets, n_classes, scheme, rng) -> np.ndarray:
    idx = np.arange(targets.size)
    if scheme in ("oversample", "undersample"):
        groups = [idx[targets == c] for c in range(n_classes)]
        groups = [g for g in groups if g.size]
        size = max(g.size for g in groups) if scheme == "oversample" else min(g.size for g in groups)
        idx = np.concatenate([
            g if g.size == size else rng.choice(g, size=size, replace=scheme == "oversample")
            for g in groups
        ])
    return rng.permutation(idx)


def batch_loss(model: FusionModel, batch: Batch, targets, weights) -> ad.Tensor:
    return ad.cross_entropy(model.logits(batch), targets, weights)


def mean_loss(model: FusionModel, batch: Batch, targets, weights, chunk: int = 256) -> float:
    total = 0.0
    for start in range(0, len(batch), chunk):
        part = batch.take(slice(start, start + chunk))
        y = targets[start:start + chunk]
        total += batch_loss(model, part, y, weights).item() * y.size
    return total / max(1, targets.size)


@dataclass
class TrainResult:
    model: FusionModel
    history: list[dict]
    initial_val_loss: float | None
    best_epoch: int

    def history_json(self) -> dict:
        return {"initial_val_loss": self.initial_val_loss, "best_epoch": self.best_epoch,
                "epochs": self.history}


def train(train_records: Sequence[EncounterRecord], val_records: Sequence[EncounterRecord] | None,
          config: TrainConfig) -> TrainResult:
    """Fit a model with Adam on (optionally class-weighted) cross-entropy.

    The vocabulary and lab normalisation are fitted on ``train_records``.
    With validation records, training stops after ``patience`` epochs without
    a lower validation loss and the best epoch's parameters are restored.
    """
    mcfg = config.model_config()
    records, targets = labeled_targets(train_records, config.task)
    if not records:
        raise DataError("no labeled training records")
    n_classes = mcfg.n_classes
    weights = class_weights(targets, n_classes, config.class_weighting)

    vocab = None
    if mcfg.uses_text:
        vocab = build_vocab((build_input(r, mcfg.text_input) for r in records),
                            config.vocab_min_freq, config.vocab_max_size)
    stats = NormStats.fit((r.panel for r in records), mcfg.lab_items) if mcfg.uses_labs else None
    model = FusionModel(mcfg, vocab, stats, seed=config.seed)
    train_batch = model.prepare(records)

    val_batch = val_targets = None
    if val_records:
        vrec, val_targets = labeled_targets(val_records, config.task)
        if vrec:
            val_batch = model.prepare(vrec)

    rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(1,)))
    state = AdamState(lr=config.lr, beta1=config.beta1, beta2=config.beta2)
    names = sorted(model.params)

    initial_val = mean_loss(model, val_batch, val_targets, weights) if val_batch is not None else None
    best = (np.inf, 0, None)
    history = []
    stale = 0
    for epoch in range(1, config.epochs + 1):
        order = _epoch_order(targets, n_classes, config.class_weighting, rng)
        seen, total = 0, 0.0
        for start in range(0, order.size, config.batch_size):
            idx = order[start:start + config.batch_size]
            part = train_batch.take(idx)
            for p in model.params.values():
                p.grad = None
            with ad.Tape() as tape:
                loss = batch_loss(model, part, targets[idx], weights)
                ad.backward(loss, tape)
            grads = {n: model.params[n].grad for n in names if model.params[n].grad is not None}
            clip_grad_norm(grads, config.clip_norm)
            new, state = adam_step(model.param_arrays(), grads, state)
            model.set_param_arrays(new)
            total += loss.item() * idx.size
            seen += idx.size
        row = {"epoch": epoch, "train_loss": total / seen}
        if val_batch is not None:
            row["val_loss"] = mean_loss(model, val_batch, val_targets, weights)
        history.append(row)
        log.info("epoch %d %s", epoch, {k: round(v, 5) for k, v in row.items() if k != "epoch"})
        if val_batch is None:
            continue
        if row["val_loss"] < best[0]:
            best = (row["val_loss"], epoch, {k: v.copy() for k, v in model.param_arrays().items()})
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    best_epoch = history[-1]["epoch"]
    if best[2] is not None:
        model.set_param_arrays(best[2])
        best_epoch = best[1]
    return TrainResult(model, history, initial_val, best_epoch)


@dataclass
class MetricsReport:
    task: str
    mode: str
    n: int
    class_names: list[str]
    class_counts: list[int]
    accuracy: float
    precision: float
    recall: float
    f1: float
    auroc: float | None
    auprc: float | None
    confusion: list[list[int]]
    averaging: str

    def to_json(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"


def report_from_probs(probs: np.ndarray, targets: np.ndarray, task: str, mode: str) -> MetricsReport:
    """Metrics from per-record class probabilities; argmax ties go to the lowest index."""
    n_classes = probs.shape[1]
    names = ["negative", "positive"] if task == "binary" else list(MULTICLASS_LABELS)
    preds = np.argmax(probs, axis=1)
    cm = confusion_metrics(preds, targets, n_classes)
    counts = np.bincount(targets, minlength=n_classes)
    if task == "binary":
        both = counts.min() > 0
        roc = auroc(probs[:, 1], targets == 1) if both else None
        pr = auprc(probs[:, 1], targets == 1) if counts[1] > 0 else None
    else:
        roc = macro_one_vs_rest(auroc, probs, targets, n_classes)
        pr = macro_one_vs_rest(auprc, probs, targets, n_classes)
    return MetricsReport(
        task=task, mode=mode, n=int(targets.size), class_names=names,
        class_counts=[int(c) for c in counts],
        accuracy=cm["accuracy"], precision=cm["precision"], recall=cm["recall"], f1=cm["f1"],
        auroc=roc, auprc=pr, confusion=cm["confusion"].tolist(),
        averaging="binary (positive class)" if task == "binary" else "macro",
    )


@dataclass
class Evaluation:
    report: MetricsReport
    record_ids: list[str]
    targets: np.ndarray
    probs: np.ndarray

    def probability_rows(self) -> list[dict]:
        return [{"record_id": rid, "label": int(y), "probs": [float(p) for p in pr]}
                for rid, y, pr in zip(self.record_ids, self.targets, self.probs)]

    def write_probabilities(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for row in self.probability_rows():
                fh.write(json.dumps(row) + "\n")


def evaluate(model: FusionModel, records: Sequence[EncounterRecord], task: str | None = None) -> Evaluation:
    task = task or model.config.task
    kept, targets = labeled_targets(records, task)
    if not kept:
        raise DataError("no labeled records to evaluate")
    probs = model.predict_proba(kept)
    report = report_from_probs(probs, targets, task, model.config.mode)
    return Evaluation(report, [r.record_id for r in kept], targets, probs)


def read_probabilities(path) -> tuple[np.ndarray, np.ndarray]:
    targets, probs = [], []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                row = json.loads(line)
                targets.append(row["label"])
                probs.append(row["probs"])
    return np.asarray(probs, dtype=np.float64), np.asarray(targets, dtype=np.int64)
