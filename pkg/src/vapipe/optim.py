"""SGD with momentum and coupled L2 weight decay, plus the epoch loop with
early stopping shared by the CNN and RNN recipes.

A trainable model exposes ``params`` (name -> array), ``trainable`` (names
that receive gradients), ``no_decay`` (names exempt from weight decay),
``forward(x, train, rng)``, ``backward(grad_out) -> grads`` and
``predict(x)``.
"""
import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import objectives as obj
from .errors import ConfigError, DataError, NumericalError, ShapeError

log = logging.getLogger(__name__)

LOSSES = ("ccc", "mse", "cross_entropy")


@dataclass
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-5
    max_epochs: int = 100
    batch_size: int = 64
    early_stop_patience: int = 10
    seed: int = 0
    loss: str = "ccc"

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must be in [0, 1)")
        if self.early_stop_patience < 1:
            raise ConfigError("early_stop_patience must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}, got {self.loss!r}")


LOG_COLUMNS = ("epoch", "train_loss", "val_loss", "val_ccc_v", "val_ccc_a", "val_accuracy")


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)
    best_epoch: int = 0

    @property
    def epochs_run(self):
        return len(self.rows)

    @property
    def best_val_loss(self):
        return self.rows[self.best_epoch - 1]["val_loss"] if self.best_epoch else math.inf

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LOG_COLUMNS)
            for r in self.rows:
                w.writerow([r["epoch"]] + ["" if r.get(c) is None else repr(float(r[c]))
                                           for c in LOG_COLUMNS[1:]])

    @classmethod
    def from_csv(cls, path):
        rows = []
        with open(path, newline="") as fh:
            for r in csv.DictReader(fh):
                row = {"epoch": int(r["epoch"])}
                for c in LOG_COLUMNS[1:]:
                    row[c] = float(r[c]) if r.get(c) else None
                rows.append(row)
        best = min(range(len(rows)), key=lambda i: rows[i]["val_loss"]) + 1 if rows else 0
        return cls(rows, best)


def sgd_step(params, grads, velocity, cfg, no_decay=()):
    """One in-place momentum step over every name in ``grads``:
    v <- momentum * v + (g + weight_decay * w);  w <- w - lr * v.
    Returns ``(params, velocity)``."""
    for name, g in grads.items():
        w = params[name]
        if g.shape != w.shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} != parameter shape {w.shape}")
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = np.zeros_like(w)
        step = g.astype(w.dtype, copy=False)
        if cfg.weight_decay and name not in no_decay:
            step = step + w.dtype.type(cfg.weight_decay) * w
        v *= w.dtype.type(cfg.momentum)
        v += step
        w -= w.dtype.type(cfg.lr) * v
    return params, velocity


class EarlyStopping:
    """Tracks the best (lowest) monitored value; ``stop`` turns true after
    ``patience`` consecutive epochs without strict improvement."""

    def __init__(self, patience):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.epoch = 0
        self.bad_epochs = 0

    def update(self, value):
        self.epoch += 1
        if value < self.best:
            self.best, self.best_epoch, self.bad_epochs = value, self.epoch, 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def stop(self):
        return self.bad_epochs >= self.patience


def loss_and_grad(name, out, target):
    if name == "ccc":
        return obj.ccc_loss(out, target), obj.ccc_loss_grad(out, target)
    if name == "mse":
        return obj.mse(out, target), obj.mse_grad(out, target).astype(out.dtype)
    if name == "cross_entropy":
        return obj.cross_entropy(out, target), obj.cross_entropy_grad(out, target).astype(out.dtype)
    raise ConfigError(f"unknown loss {name!r}")


def evaluate(model, X, Y, loss):
    """Eval-mode loss over the whole set plus CCC (regression) or accuracy."""
    pred = model.predict(X)
    row = {"val_loss": None, "val_ccc_v": None, "val_ccc_a": None, "val_accuracy": None}
    if loss == "cross_entropy":
        row["val_loss"] = obj.cross_entropy(pred, Y)
        row["val_accuracy"] = float(np.mean(pred.argmax(axis=1) == Y))
    else:
        row["val_loss"] = obj.ccc_loss(pred, Y) if loss == "ccc" else obj.mse(pred, Y)
        row["val_ccc_v"] = obj.ccc(pred[:, 0], Y[:, 0])
        row["val_ccc_a"] = obj.ccc(pred[:, 1], Y[:, 1])
    return row


def _batches(n, size):
    bounds = list(range(0, n, size)) + [n]
    if len(bounds) > 2 and bounds[-1] - bounds[-2] < 2:
        del bounds[-2]  # never emit a 1-sample batch (CCC and batchnorm need two)
    return list(zip(bounds[:-1], bounds[1:]))


def train(model, train_set, val_set, cfg: TrainConfig, augment=None, on_epoch=None):
    """Minibatch SGD with per-epoch shuffling and early stopping on the
    validation loss. Loads the best epoch's parameters back into ``model``
    and returns ``(best_params, TrainLog)``.

    ``augment(batch, rng)`` optionally transforms each training batch;
    ``on_epoch(row)`` is called after every epoch.
    """
    X, Y = train_set
    Xv, Yv = val_set
    if len(X) < 2 or len(Xv) < 2:
        raise DataError("training and validation sets need at least 2 samples each")
    # overflow surfaces as a NumericalError below rather than as warnings
    with np.errstate(over="ignore", invalid="ignore"):
        best, tlog = _epochs(model, X, Y, Xv, Yv, cfg, augment, on_epoch)
    model.params = best
    return best, tlog


def _epochs(model, X, Y, Xv, Yv, cfg, augment, on_epoch):
    rng = np.random.default_rng(cfg.seed)
    velocity = {}
    stopper = EarlyStopping(cfg.early_stop_patience)
    tlog = TrainLog()
    best = {k: v.copy() for k, v in model.params.items()}
    for epoch in range(1, cfg.max_epochs + 1):
        perm = rng.permutation(len(X))
        total = 0.0
        for s, e in _batches(len(X), cfg.batch_size):
            idx = perm[s:e]
            xb, yb = X[idx], Y[idx]
            if augment is not None:
                xb = augment(xb, rng)
            out = model.forward(xb, train=True, rng=rng)
            loss, grad = loss_and_grad(cfg.loss, out, yb)
            if not np.isfinite(loss) or not np.all(np.isfinite(out)):
                raise NumericalError(f"non-finite training loss at epoch {epoch}", epoch=epoch)
            grads = model.backward(grad)
            sgd_step(model.params, {k: grads[k] for k in model.trainable if k in grads},
                     velocity, cfg, model.no_decay)
            total += loss * (e - s)
        row = {"epoch": epoch, "train_loss": total / len(X)}
        row.update(evaluate(model, Xv, Yv, cfg.loss))
        if not np.isfinite(row["val_loss"]):
            raise NumericalError(f"non-finite validation loss at epoch {epoch}", epoch=epoch)
        tlog.rows.append(row)
        if stopper.update(row["val_loss"]):
            best = {k: v.copy() for k, v in model.params.items()}
            tlog.best_epoch = epoch
        log.debug("epoch %d train %.5f val %.5f", epoch, row["train_loss"], row["val_loss"])
        if on_epoch is not None:
            on_epoch(row)
        if stopper.stop:
            break
    return best, tlog


