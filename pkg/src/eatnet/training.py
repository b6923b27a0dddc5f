"""Adam optimization loop, cross-entropy loss and the evaluation metrics
(accuracy, precision, recall, F1 over multi-class confusion counts)."""

from __future__ import annotations

import csv
import json
import math
import os
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor, NumericError
from .backbone import Model, save_checkpoint
from .data import AugmentPolicy, Dataset, augment, batch_iter


@dataclass
class OptimConfig:
    learning_rate: float = 0.008
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 10
    batch_size: int = 50
    precision: int = 32

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.precision not in (32, 64):
            raise ValueError("precision must be 32 or 64")


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    B, K = logits.shape
    labels = np.asarray(labels)
    if labels.max() >= K or labels.min() < 0:
        raise ValueError(f"labels must lie in [0, {K}), got {labels.min()}..{labels.max()}")
    lsm = T.log_softmax(logits, axis=-1)
    picked = lsm[(np.arange(B), labels)]
    return -picked.mean()


class Adam:
    """Bias-corrected Adam over named parameter tensors."""

    def __init__(self, named_params, cfg: OptimConfig):
        self.items = list(named_params)
        self.cfg = cfg
        self.t = 0
        self.m = [np.zeros_like(p.data) for _, p in self.items]
        self.v = [np.zeros_like(p.data) for _, p in self.items]

    def step(self) -> None:
        cfg = self.cfg
        self.t += 1
        for i, (name, p) in enumerate(self.items):
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient in {name!r}")
            self.m[i] = cfg.beta1 * self.m[i] + (1 - cfg.beta1) * g
            self.v[i] = cfg.beta2 * self.v[i] + (1 - cfg.beta2) * g * g
            m_hat = self.m[i] / (1 - cfg.beta1 ** self.t)
            v_hat = self.v[i] / (1 - cfg.beta2 ** self.t)
            p.data = p.data - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.eps)

    def zero_grad(self) -> None:
        for _, p in self.items:
            p.zero_grad()


# -- metrics -----------------------------------------------------------------------


@dataclass
class ConfusionCounts:
    matrix: np.ndarray  # [K, K], rows = true class, cols = predicted

    @staticmethod
    def from_predictions(labels: np.ndarray, preds: np.ndarray,
                         num_classes: int) -> "ConfusionCounts":
        m = np.zeros((num_classes, num_classes), dtype=np.int64)
        np.add.at(m, (labels, preds), 1)
        return ConfusionCounts(m)

    @property
    def total(self) -> int:
        return int(self.matrix.sum())

    def per_class(self, k: int) -> tuple[int, int, int, int]:
        """(TP, FP, FN, TN) for class k."""
        tp = int(self.matrix[k, k])
        fp = int(self.matrix[:, k].sum()) - tp
        fn = int(self.matrix[k, :].sum()) - tp
        tn = self.total - tp - fp - fn
        return tp, fp, fn, tn


@dataclass
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class MetricReport:
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    weighted_precision: float
    weighted_recall: float
    weighted_f1: float
    per_class: list[ClassMetrics] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _safe_div(num: float, den: float) -> float:
    # zero-denominator convention: metric of an unpredicted/absent class is 0
    return num / den if den > 0 else 0.0


def compute_metrics(counts: ConfusionCounts) -> MetricReport:
    # math.fsum: exactly-rounded sums, so averages do not depend on order
    k = counts.matrix.shape[0]
    total = counts.total
    accuracy = _safe_div(float(np.trace(counts.matrix)), total)
    per = []
    for c in range(k):
        tp, fp, fn, _ = counts.per_class(c)
        p = _safe_div(tp, tp + fp)
        r = _safe_div(tp, tp + fn)
        f1 = _safe_div(2 * p * r, p + r)
        per.append(ClassMetrics(precision=p, recall=r, f1=f1, support=tp + fn))
    tot_support = sum(cm.support for cm in per)
    weights = [cm.support / tot_support if tot_support else 0.0 for cm in per]
    return MetricReport(
        accuracy=accuracy,
        macro_precision=math.fsum(cm.precision for cm in per) / k,
        macro_recall=math.fsum(cm.recall for cm in per) / k,
        macro_f1=math.fsum(cm.f1 for cm in per) / k,
        weighted_precision=math.fsum(w * cm.precision
                                     for w, cm in zip(weights, per)),
        weighted_recall=math.fsum(w * cm.recall for w, cm in zip(weights, per)),
        weighted_f1=math.fsum(w * cm.f1 for w, cm in zip(weights, per)),
        per_class=per,
    )


def predict(model: Model, dataset: Dataset, batch_size: int = 50) -> np.ndarray:
    preds = []
    for batch in batch_iter(dataset, batch_size):
        logits = model.forward(Tensor(batch.images))
        preds.append(np.argmax(logits.data, axis=1))
    return np.concatenate(preds)


def evaluate(model: Model, dataset: Dataset, batch_size: int = 50
             ) -> tuple[ConfusionCounts, MetricReport]:
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    preds = predict(model, dataset, batch_size)
    counts = ConfusionCounts.from_predictions(dataset.labels(), preds,
                                              dataset.num_classes)
    return counts, compute_metrics(counts)


# -- training loop -------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_acc: float
    seconds: float


@dataclass
class TrainResult:
    history: list[EpochRecord]
    best_val_acc: float
    best_epoch: int
    checkpoint_path: str | None


def write_history_csv(path, history: list[EpochRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "train_acc", "val_acc", "seconds"])
        for rec in history:
            w.writerow([rec.epoch, f"{rec.train_loss:.8f}", f"{rec.train_acc:.6f}",
                        f"{rec.val_acc:.6f}", f"{rec.seconds:.3f}"])


def _atomic_save(path: Path, model: Model, seed: int, extra: dict) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    save_checkpoint(tmp, model, seed, extra)
    os.replace(tmp, path)


def train(model: Model, train_ds: Dataset, val_ds: Dataset, cfg: OptimConfig,
          augment_policy: AugmentPolicy | None = None, rng_seed: int = 0,
          out_dir=None, verification: bool = False) -> TrainResult:
    """Run the optimization loop; retains the best-validation checkpoint.

    In verification mode the wall-time column is recorded as zero so reruns
    with the same seeds produce byte-identical history files.
    """
    if train_ds.num_classes != model.spec.num_classes:
        raise ValueError(
            f"dataset has {train_ds.num_classes} classes but model expects "
            f"{model.spec.num_classes}")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    opt = Adam(list(model.named_parameters()), cfg)
    history: list[EpochRecord] = []
    best_val, best_epoch = -1.0, -1
    ckpt_path = out_dir / "best.ckpt" if out_dir is not None else None
    n = len(train_ds)

    for epoch in range(cfg.epochs):
        t0 = time.monotonic()
        if augment_policy is not None:
            epoch_samples = [augment(s, augment_policy, epoch * n + i)
                             for i, s in enumerate(train_ds.samples)]
            epoch_ds = Dataset(epoch_samples, train_ds.num_classes)
        else:
            epoch_ds = train_ds
        loss_sum, correct, seen = 0.0, 0, 0
        for batch in batch_iter(epoch_ds, cfg.batch_size,
                                shuffle_seed=rng_seed * 100003 + epoch):
            logits = model.forward(Tensor(batch.images))
            loss = cross_entropy(logits, batch.labels)
            if not np.isfinite(loss.data):
                if out_dir is not None:
                    write_history_csv(out_dir / "history.csv", history)
                raise NumericError(
                    f"loss became non-finite at epoch {epoch}; "
                    f"best checkpoint preserved")
            opt.zero_grad()
            loss.backward()
            opt.step()
            # sample-weighted so the epoch loss is shuffle-independent
            loss_sum += float(loss.data) * len(batch.labels)
            correct += int((np.argmax(logits.data, axis=1) == batch.labels).sum())
            seen += len(batch.labels)
        _, val_report = evaluate(model, val_ds, cfg.batch_size)
        seconds = 0.0 if verification else time.monotonic() - t0
        rec = EpochRecord(epoch=epoch, train_loss=loss_sum / seen,
                          train_acc=correct / seen,
                          val_acc=val_report.accuracy, seconds=seconds)
        history.append(rec)
        if rec.val_acc > best_val:
            best_val, best_epoch = rec.val_acc, epoch
            if ckpt_path is not None:
                _atomic_save(ckpt_path, model, rng_seed,
                             {"epoch": epoch, "val_acc": rec.val_acc})
    if out_dir is not None:
        write_history_csv(out_dir / "history.csv", history)
    return TrainResult(history=history, best_val_acc=best_val,
                       best_epoch=best_epoch,
                       checkpoint_path=str(ckpt_path) if ckpt_path else None)
