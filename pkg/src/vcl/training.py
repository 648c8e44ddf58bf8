"""Loss, Adam, the repeated-run training protocol, and classification metrics."""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .data import AugmentConfig, LabeledDataset, augment
from .models import Model, build_model, freeze_backbone
from .rng import stream
from .tensor import NumericError, Tensor, no_grad, record

log = logging.getLogger(__name__)

CURVE_HEADER = ("epoch", "train_loss", "val_loss", "train_acc", "val_acc")
METRICS_HEADER = ("model", "accuracy", "precision", "recall", "f1")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 400
    batch_size: int = 256
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-7
    repetitions: int = 5
    seed: int = 0
    average: str = "macro"
    freeze_backbone: bool = False

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.repetitions < 1:
            raise ValueError(f"repetitions must be >= 1, got {self.repetitions}")
        if self.average not in ("macro", "weighted"):
            raise ValueError(f"average must be 'macro' or 'weighted', got {self.average!r}")


class Metrics(NamedTuple):
    accuracy: float
    precision: float
    recall: float
    f1: float


@dataclass
class TrainReport:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    train_acc: list = field(default_factory=list)
    val_acc: list = field(default_factory=list)
    best_epoch: int = -1
    test_metrics: Optional[Metrics] = None
    run_index: int = 0
    failed: bool = False
    error: str = ""
    runs: list = field(default_factory=list, repr=False)
    model: Optional[Model] = field(default=None, repr=False)

    @property
    def epochs_run(self) -> int:
        return len(self.train_loss)


# -- loss -----------------------------------------------------------------------------
def sparse_ce_loss(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    bad = np.flatnonzero((labels < 0) | (labels >= k))
    if bad.size:
        raise ValueError(f"label {labels[bad[0]]} at index {bad[0]} outside [0, {k})")
    z = logits.data.astype(np.float64)
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = np.mean(lse - shifted[rows, labels])
    probs = np.exp(shifted - lse[:, None])
    probs[rows, labels] -= 1.0
    probs /= n

    def back(g):
        return ((probs * g).astype(logits.data.dtype),)

    return record(np.array(loss, dtype=logits.data.dtype), (logits,), back, "sparse_ce")


# -- optimizer ------------------------------------------------------------------------
@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, cfg: TrainConfig, frozen=()) -> AdamState:
    """One bias-corrected Adam update, in place on ``params``.

    Parameters in ``frozen`` or without a gradient are skipped; the step
    counter advances regardless.
    """
    state.t += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name in sorted(params):
        g = grads.get(name)
        if name in frozen or g is None:
            continue
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name!r} {p.shape}")
        dt = p.data.dtype
        g = np.asarray(g, dtype=dt)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        # a single scratch buffer keeps the big dense layers cheap
        tmp = np.multiply(g, 1 - b1)
        m *= b1
        m += tmp
        np.multiply(g, g, out=tmp)
        tmp *= 1 - b2
        v *= b2
        v += tmp
        np.divide(v, c2, out=tmp)
        np.sqrt(tmp, out=tmp)
        tmp += cfg.adam_eps
        np.divide(m, tmp, out=tmp)
        tmp *= cfg.learning_rate / c1
        p.data = p.data - tmp
    return state


# -- metrics --------------------------------------------------------------------------
def confusion_matrix(pred, true, k: int) -> np.ndarray:
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (np.asarray(true), np.asarray(pred)), 1)
    return cm


def metrics(pred_labels, true_labels, k: int, average: str = "macro") -> Metrics:
    """Accuracy plus precision/recall/F1 averaged over the classes that occur.

    A class "occurs" if it appears among the true or predicted labels; a
    per-class ratio with an empty denominator counts as 0.
    """
    pred = np.asarray(pred_labels, dtype=np.int64)
    true = np.asarray(true_labels, dtype=np.int64)
    if pred.shape != true.shape:
        raise ValueError(f"length mismatch: {pred.shape[0] if pred.ndim else 0} predictions, {true.shape[0]} labels")
    if pred.size == 0:
        raise ValueError("metrics need at least one label")
    for arr in (pred, true):
        if arr.min() < 0 or arr.max() >= k:
            raise ValueError(f"labels must lie in [0, {k})")
    cm = confusion_matrix(pred, true, k)
    tp = np.diag(cm).astype(np.float64)
    predicted = cm.sum(axis=0)
    support = cm.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(predicted > 0, tp / predicted, 0.0)
        recall = np.where(support > 0, tp / support, 0.0)
        denom = precision + recall
        f1 = np.where(denom > 0, 2 * precision * recall / denom, 0.0)
    # fsum keeps the averages independent of summation order
    if average == "macro":
        present = np.flatnonzero((predicted + support) > 0)
        avg = [math.fsum(v[present].tolist()) / len(present) for v in (precision, recall, f1)]
    elif average == "weighted":
        avg = [math.fsum((v * support).tolist()) / pred.size for v in (precision, recall, f1)]
    else:
        raise ValueError(f"unknown average {average!r}")
    accuracy = int(tp.sum()) / pred.size
    return Metrics(float(accuracy), *avg)


# -- evaluation helpers -----------------------------------------------------------------
def predict_logits(model: Model, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            out.append(model.forward(images[start : start + batch_size]).data)
    return np.concatenate(out) if out else np.zeros((0, model.num_classes), dtype=np.float32)


def evaluate(model: Model, ds: LabeledDataset, batch_size: int = 256):
    """Return ``(mean loss, accuracy, predictions)`` in eval mode."""
    logits = predict_logits(model, ds.images, batch_size)
    loss = float(sparse_ce_loss(Tensor(logits), ds.labels).data)
    pred = logits.argmax(axis=1)
    return loss, float(np.mean(pred == ds.labels)), pred


# -- training protocol ----------------------------------------------------------------
def select_run(reports) -> int:
    """Index (into ``reports``) of the run with the best final validation
    accuracy; ties go to the lower ``run_index``. Failed runs never win."""
    best = None
    for pos, rep in enumerate(reports):
        if rep.failed or not rep.val_acc:
            continue
        key = (rep.val_acc[-1], -rep.run_index)
        if best is None or key > best[0]:
            best = (key, pos)
    if best is None:
        raise NumericError("every training run failed")
    return best[1]


def _snapshot(model: Model) -> dict:
    return {name: p.data.copy() for name, p in model.params.items()}


def _train_once(model_cfg, train_ds, val_ds, tcfg: TrainConfig, aug: Optional[AugmentConfig], run: int):
    seed = tcfg.seed + run
    model = build_model(model_cfg, stream(seed, "init"))
    if tcfg.freeze_backbone:
        freeze_backbone(model)
    report = TrainReport(run_index=run)
    state = AdamState()
    dropout_rng = stream(seed, "dropout")
    best_key, best_params = None, None
    n = len(train_ds)
    for epoch in range(tcfg.epochs):
        order = stream(seed, "shuffle", epoch).permutation(n)
        aug_rng = stream(seed, "augment", epoch)
        for start in range(0, n, tcfg.batch_size):
            idx = order[start : start + tcfg.batch_size]
            xb = train_ds.images[idx]
            if aug is not None:
                xb = augment(xb, aug, aug_rng)
            model.zero_grad()
            loss = sparse_ce_loss(model.forward(xb, True, dropout_rng), train_ds.labels[idx])
            if not np.isfinite(loss.data):
                raise NumericError(f"non-finite loss at epoch {epoch + 1}, run {run}")
            loss.backward()
            grads = {name: p.grad for name, p in model.params.items()}
            adam_step(model.params, grads, state, tcfg, model.frozen)
        tr_loss, tr_acc, _ = evaluate(model, train_ds)
        va_loss, va_acc, _ = evaluate(model, val_ds)
        if not (np.isfinite(tr_loss) and np.isfinite(va_loss)):
            raise NumericError(f"non-finite evaluation loss at epoch {epoch + 1}, run {run}")
        report.train_loss.append(tr_loss)
        report.val_loss.append(va_loss)
        report.train_acc.append(tr_acc)
        report.val_acc.append(va_acc)
        key = (va_acc, -va_loss)
        if best_key is None or key > best_key:
            best_key, best_params = key, _snapshot(model)
            report.best_epoch = epoch
        log.debug("run %d epoch %d: loss %.4f acc %.3f val_loss %.4f val_acc %.3f",
                  run, epoch + 1, tr_loss, tr_acc, va_loss, va_acc)
    for name, arr in best_params.items():
        model.params[name].data = arr
    report.model = model
    return report


def train(model_cfg, data, tcfg: TrainConfig, aug: Optional[AugmentConfig] = None) -> TrainReport:
    """Run ``tcfg.repetitions`` independent trainings and report the best.

    Run r is seeded with ``seed + r``. The winner (best final validation
    accuracy) is restored to its best-validation epoch and scored on test.
    The returned report carries every run in ``runs`` and the restored model
    in ``model``.
    """
    train_ds, val_ds, test_ds = data
    if min(len(train_ds), len(val_ds), len(test_ds)) == 0:
        raise ValueError("train, validation and test sets must all be non-empty")
    if not (train_ds.image_shape == val_ds.image_shape == test_ds.image_shape):
        raise ValueError("train/val/test image shapes differ")
    runs = []
    for run in range(tcfg.repetitions):
        try:
            runs.append(_train_once(model_cfg, train_ds, val_ds, tcfg, aug, run))
        except NumericError as exc:
            log.warning("run %d aborted: %s", run, exc)
            runs.append(TrainReport(run_index=run, failed=True, error=str(exc)))
    chosen = runs[select_run(runs)]
    _, _, pred = evaluate(chosen.model, test_ds)
    chosen.test_metrics = metrics(pred, test_ds.labels, test_ds.num_classes, tcfg.average)
    chosen.runs = runs
    return chosen


# -- file output --------------------------------------------------------------------------
def emit_curves(report: TrainReport, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CURVE_HEADER)
        rows = zip(report.train_loss, report.val_loss, report.train_acc, report.val_acc)
        for epoch, values in enumerate(rows, start=1):
            writer.writerow([epoch] + [f"{v:.6g}" for v in values])


def format_metrics_row(model_name: str, m: Metrics) -> str:
    return ",".join([model_name] + [f"{v:.4f}" for v in m])


def append_metrics(path, model_name: str, m: Metrics) -> None:
    """Append one metrics row, writing the header for a new file."""
    new = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="") as fh:
        if new:
            fh.write(",".join(METRICS_HEADER) + "\n")
        fh.write(format_metrics_row(model_name, m) + "\n")
