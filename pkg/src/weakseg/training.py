"""Adam optimization with early stopping on a strong-pixel validation score."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError, TrainingDiverged
from .losses import LossConfig, batch_loss
from .unet import Model, forward, parameter_tensors

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AdamHyper:
    step_size: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    max_epochs: int = 50
    patience: int = 5
    batch_size: int = 4

    def validate(self) -> None:
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigurationError("Adam betas must lie in (0, 1)")
        if not self.step_size > 0:
            raise ConfigurationError("step_size must be positive")
        if self.max_epochs < 1 or self.patience < 1 or self.batch_size < 1:
            raise ConfigurationError("max_epochs, patience and batch_size must be >= 1")


@dataclass
class TrainState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    best_val: float = math.inf
    since_improvement: int = 0


def adam_step(params: dict, grads: dict, state: TrainState, hyper: AdamHyper) -> tuple[dict, TrainState]:
    """One bias-corrected Adam update; returns new parameter arrays."""
    state.t += 1
    b1, b2 = hyper.beta1, hyper.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    out = {}
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise DimensionError(f"gradient for {name!r} has shape {g.shape}, parameter has {theta.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        out[name] = theta - hyper.step_size * (m / c1) / (np.sqrt(v / c2) + hyper.epsilon)
    return out, state


@dataclass
class History:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int = 0
    initial_val_loss: float = math.nan

    def __len__(self) -> int:
        return len(self.train_loss)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss"])
            for i, (tr, va) in enumerate(zip(self.train_loss, self.val_loss), start=1):
                w.writerow([i, repr(tr), repr(va)])


def validation_loss(model: Model, samples, prob_floor: float = 1e-7) -> float:
    """Cross-entropy pooled over the strong pixels of all ``samples``."""
    total, count = 0.0, 0
    for s in samples:
        probs = T.softmax_channels(forward(model, s.volume)).data[0]
        ann = s.annotation
        strong = ann.lung_mask & (ann.labels >= 0) & (ann.labels < 5)
        if not strong.any():
            continue
        cls = ann.labels[strong].astype(int)
        p = np.maximum(probs[strong, cls], prob_floor)
        total += float(-np.log(p).sum())
        count += int(strong.sum())
    return total / count if count else 0.0


def sample_gradients(model: Model, sample, loss_cfg: LossConfig) -> tuple[float, dict]:
    params = parameter_tensors(model)
    loss = batch_loss(forward(model, sample.volume, params), sample.annotation, loss_cfg)
    names = list(params)
    grads = T.backward(loss, [params[n] for n in names])
    return loss.item(), dict(zip(names, grads))


def train(model: Model, train_samples, val_samples, loss_cfg: LossConfig, hyper: AdamHyper = AdamHyper(), seed: int = 0):
    """Train a copy of ``model``; returns ``(best_model, history)``.

    Each epoch visits the training slices in a seeded order, in batches whose
    gradients are averaged in index order.  The returned parameters are those
    of the epoch with the lowest validation loss.
    """
    hyper.validate()
    train_samples, val_samples = list(train_samples), list(val_samples)
    if not train_samples or not val_samples:
        raise ConfigurationError("training and validation sets must both be non-empty")
    current = model.copy()
    best = model.copy()
    state = TrainState()
    history = History(initial_val_loss=validation_loss(current, val_samples, loss_cfg.prob_floor))

    for epoch in range(hyper.max_epochs):
        order = np.random.default_rng([seed, epoch]).permutation(len(train_samples))
        epoch_losses = []
        for start in range(0, len(order), hyper.batch_size):
            batch = order[start : start + hyper.batch_size]
            acc = None
            for i in batch:
                value, g = sample_gradients(current, train_samples[i], loss_cfg)
                if not math.isfinite(value):
                    raise TrainingDiverged(f"non-finite training loss at epoch {epoch + 1}")
                epoch_losses.append(value)
                acc = g if acc is None else {k: acc[k] + g[k] for k in acc}
            mean_grads = {k: v / len(batch) for k, v in acc.items()}
            current.params, state = adam_step(current.params, mean_grads, state, hyper)

        val = validation_loss(current, val_samples, loss_cfg.prob_floor)
        if not math.isfinite(val):
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch + 1}")
        history.train_loss.append(float(np.mean(epoch_losses)))
        history.val_loss.append(val)
        logger.debug("epoch %d train %.5f val %.5f", epoch + 1, history.train_loss[-1], val)
        if val < state.best_val:
            state.best_val = val
            state.since_improvement = 0
            history.best_epoch = epoch + 1
            best = current.copy()
        else:
            state.since_improvement += 1
            if state.since_improvement >= hyper.patience:
                break
    return best, history


def save_history(history: History, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    history.write_csv(path)
