"""Mini-batch training with seeded shuffling and clean/corrupted loss traces."""

import csv
from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import TrainingDiverged
from ..rng import Xoshiro256
from .network import EVAL, TRAIN
from .optim import SGD, Adam


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 256
    epochs: int = 100
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    seed: int = 0
    # None trains on mean cross-entropy; a value in (0, 1] switches to the
    # summed-CE gamma/sigma regularized objective
    mitigation_alpha: float = None
    mitigation_variant: str = "layer_mean"
    loss_reduction: str = "mean"
    trace: bool = True

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.mitigation_alpha is not None and not 0 < self.mitigation_alpha <= 1:
            raise ValueError("mitigation_alpha must lie in (0, 1]")
        if self.loss_reduction not in ("mean", "sum"):
            raise ValueError("loss_reduction must be 'mean' or 'sum'")


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    clean_loss: float
    clean_acc: float
    corrupted_loss: float = float("nan")
    corrupted_acc: float = float("nan")


@dataclass
class TrainResult:
    net: object
    trace: list = field(default_factory=list)

    def first_epoch_below(self, threshold, column="corrupted_loss"):
        """1-based epoch at which ``column`` first drops below ``threshold``."""
        for rec in self.trace:
            if getattr(rec, column) < threshold:
                return rec.epoch
        return None

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            cols = list(EpochStats.__dataclass_fields__)
            w.writerow(cols)
            for rec in self.trace:
                row = asdict(rec)
                w.writerow([row[c] if c == "epoch" else repr(float(row[c])) for c in cols])


def evaluate(net, dataset, mask=None, batch_size=2048):
    """Eval-mode mean loss and accuracy on ``dataset`` (optionally masked)."""
    idx = np.arange(len(dataset)) if mask is None else np.flatnonzero(mask)
    if len(idx) == 0:
        return float("nan"), float("nan")
    losses = []
    correct = 0
    for s in range(0, len(idx), batch_size):
        b = idx[s:s + batch_size]
        logits = net.logits(dataset.features[b], mode=EVAL)
        per, _ = net.head.loss(logits, dataset.labels[b])
        losses.append(per)
        correct += int((logits.argmax(axis=1) == dataset.labels[b]).sum())
    return float(np.concatenate(losses).mean()), correct / len(idx)


def _make_optimizer(cfg):
    if cfg.optimizer == "sgd":
        return SGD(cfg.learning_rate)
    return Adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps_adam)


def train(net, dataset, config):
    """Train ``net`` in place; returns the net and its per-epoch trace.

    Batch order for epoch e comes from the stream ``(seed, "shuffle", e)``.
    A trailing batch of a single sample is dropped since train-mode batch
    norm needs two rows.
    """
    from ..mitigation import regularizer_terms

    cfg = config
    if cfg.batch_size > len(dataset):
        raise ValueError(f"batch_size {cfg.batch_size} exceeds dataset size {len(dataset)}")
    opt = _make_optimizer(cfg)
    params = [a for _, _, a in net.param_items()]
    keys = [(i, name) for i, name, _ in net.param_items()]
    regularize = cfg.mitigation_alpha is not None
    summed = regularize or cfg.loss_reduction == "sum"
    alpha = cfg.mitigation_alpha if regularize else 1.0
    corrupted = dataset.corrupted
    result = TrainResult(net)
    n = len(dataset)
    net.mode = TRAIN
    for epoch in range(cfg.epochs):
        order = Xoshiro256.derived(cfg.seed, "shuffle", epoch).permutation(n)
        total, count = 0.0, 0
        for step, s in enumerate(range(0, n, cfg.batch_size)):
            b = order[s:s + cfg.batch_size]
            if len(b) < 2:
                continue
            loss, _, caches = net.forward(dataset.features[b], dataset.labels[b], mode=TRAIN)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch + 1}, step {step}", epoch + 1, step)
            scale = alpha if summed else 1.0 / len(b)
            grads = net.backward(caches, grad_scale=scale)
            if regularize and alpha < 1.0:
                _, reg_grads = regularizer_terms(net, caches, cfg.mitigation_variant)
                for li, gg in reg_grads.items():
                    grads[li]["gamma"] = grads[li]["gamma"] + (1.0 - alpha) * gg
            opt.step(params, [grads[i][name] for i, name in keys])
            total += loss * len(b)
            count += len(b)
        if not cfg.trace:
            continue
        net.mode = EVAL
        clean_loss, clean_acc = evaluate(net, dataset, ~corrupted)
        corr_loss, corr_acc = evaluate(net, dataset, corrupted) if corrupted.any() else (float("nan"), float("nan"))
        net.mode = TRAIN
        result.trace.append(EpochStats(epoch + 1, total / count, clean_loss, clean_acc, corr_loss, corr_acc))
        if not np.isfinite(clean_loss):
            raise TrainingDiverged(f"non-finite evaluation loss after epoch {epoch + 1}", epoch + 1)
    net.mode = EVAL
    return result
