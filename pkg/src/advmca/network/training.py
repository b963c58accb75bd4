"""Minibatch SGD with momentum, inverted dropout and early stopping."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ..evaluation import compute_fom
from . import layers
from .model import (NetworkError, _run, _xent, _backprop, _as_elements, forward,
                    confidence, init_params, standardizer_fit)

log = logging.getLogger(__name__)


class TrainingDivergence(RuntimeError):
    def __init__(self, epoch):
        super().__init__(f"training diverged (non-finite loss) at epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 64
    max_epochs: int = 100
    patience: int = 20
    dropout: float | tuple = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1 or self.max_epochs < 0 or self.patience < 1:
            raise ValueError("batch size, epochs and patience must be positive")
        probs = np.atleast_1d(self.dropout)
        if np.any(probs < 0) or np.any(probs >= 1):
            raise ValueError("dropout probabilities must lie in [0, 1)")


def stack_elements(examples):
    """Flatten ``(sequence, label)`` pairs into element and label arrays."""
    xs, ys = [], []
    for seq, label in examples:
        xs.append(seq.magnitudes)
        ys.append(np.full(len(seq), label, dtype=np.int64))
    if not xs:
        raise NetworkError("no training examples")
    return np.concatenate(xs), np.concatenate(ys)


def evaluate(params, examples):
    """Recording-level mean recall and element-level mean cross-entropy."""
    truths, preds, losses = [], [], []
    for seq, label in examples:
        P = forward(params, seq)
        preds.append(int(np.argmax(confidence(P))))
        truths.append(label)
        losses.append(-np.log(np.maximum(P[:, label], 1e-38)).mean())
    fom = compute_fom(truths, preds, n_classes=params.n_classes)
    return fom.mean_recall, float(np.mean(losses))


def _label_names(examples, label_names):
    if label_names is not None:
        return list(label_names)
    k = 1 + max(label for _, label in examples)
    return [str(i) for i in range(k)]


def fit(spec, train, valid, cfg: TrainConfig, label_names=None, perturb=None):
    """Train a network on labelled sequences.

    ``train`` and ``valid`` are lists of ``(SpectralSequence, label)`` with
    0-based labels.  Elements are shuffled individually; model selection uses
    the validation mean recall of whole recordings, ties broken by lower
    validation loss.

    ``perturb(params, xb, rng)`` may replace each minibatch's inputs before
    the parameter update (used for adversarial training).

    Returns ``(params, history)``; ``history`` has one dict per epoch.
    """
    if not train or not valid:
        raise NetworkError("training and validation sets must be non-empty")
    names = _label_names(list(train) + list(valid), label_names)
    for _, label in list(train) + list(valid):
        if not 0 <= label < len(names):
            raise NetworkError(f"label {label} outside [0, {len(names)})")
    x, y = stack_elements(train)
    _as_elements(init_params(spec, names, zero=True), x[:1])  # shape check
    rng = np.random.default_rng(cfg.seed)
    params = init_params(spec, names, standardizer_fit(x), rng)
    shuffle_rng = np.random.default_rng([cfg.seed, 1])
    dropout_rng = np.random.default_rng([cfg.seed, 2])
    perturb_rng = np.random.default_rng([cfg.seed, 3])
    velocity = [np.zeros_like(a) for a in params.arrays()]
    history = []
    best = None
    best_key = None
    stale = 0
    use_dropout = np.any(np.atleast_1d(cfg.dropout) > 0)
    for epoch in range(1, cfg.max_epochs + 1):
        order = shuffle_rng.permutation(len(y))
        batch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb, yb = x[idx], y[idx]
            if perturb is not None:
                xb = perturb(params, xb, perturb_rng)
            z, cache = _run(params, xb, cfg.dropout if use_dropout else None,
                            dropout_rng if use_dropout else None)
            losses, dz = _xent(z, yb)
            _, dws, dbs = _backprop(params, cache, dz / len(idx))
            batch_losses.append(losses.mean())
            grads = []
            for dw, db in zip(dws, dbs):
                grads.extend((dw, db))
            for v, a, g in zip(velocity, params.arrays(), grads):
                v *= cfg.momentum
                v -= cfg.learning_rate * g
                a += v
        train_loss = float(np.mean(batch_losses))
        if not np.isfinite(train_loss) or not all(np.all(np.isfinite(a)) for a in params.arrays()):
            raise TrainingDivergence(epoch)
        recall, vloss = evaluate(params, valid)
        history.append({"epoch": epoch, "train_loss": train_loss,
                        "valid_mean_recall": recall, "valid_loss": vloss})
        log.info("epoch %d  train loss %.4f  valid mean recall %.4f", epoch, train_loss, recall)
        key = (recall, -vloss)
        if best_key is None or key > best_key:
            best_key, best, stale = key, params.copy(), 0
        else:
            stale += 1
            if stale >= cfg.patience:
                log.info("early stop after %d epochs without improvement", stale)
                break
    return (best if best is not None else params), history


def element_accuracy(params, x, y):
    z = _run(params, x)[0]
    return float(np.mean(np.argmax(layers.softmax(z), axis=1) == y))
