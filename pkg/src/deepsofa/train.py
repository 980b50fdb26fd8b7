"""Mini-batch Adam training with validation-AUC early stopping."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .eval import roc_auc
from .model import DeepSofaModel, ModelConfig, fit_normalization, gradients, init_params
from .numerics import AdamState, adam_step, make_rng
from .variables import VAR_INDEX

logger = logging.getLogger(__name__)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_auc: float
    seconds: float


@dataclass
class TrainingLog:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_val_auc: float = float("-inf")
    stopped_early: bool = False

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("epoch,train_loss,val_auc\n")
            for r in self.epochs:
                fh.write(f"{r.epoch},{r.train_loss:.10g},{r.val_auc:.10g}\n")


class EarlyStopping:
    """Tracks the best validation AUC; signals a stop after ``patience`` epochs without improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best_auc = float("-inf")
        self.best_epoch = 0
        self.best_params = None
        self.stale = 0

    def update(self, epoch: int, auc: float, params: dict) -> bool:
        if auc > self.best_auc:
            self.best_auc = auc
            self.best_epoch = epoch
            self.best_params = {k: v.copy() for k, v in params.items()}
            self.stale = 0
        else:
            self.stale += 1
        return self.stale >= self.patience


def split_validation(cohort, fraction: float, seed: int):
    """Seeded split of a training cohort into (train, validation)."""
    n = len(cohort)
    n_val = max(1, int(round(fraction * n)))
    order = make_rng(seed, 99).permutation(n)
    val_idx = set(order[:n_val].tolist())
    train = [s for i, s in enumerate(cohort) if i not in val_idx]
    val = [s for i, s in enumerate(cohort) if i in val_idx]
    return train, val


def final_hour_probs(model: DeepSofaModel, cohort, chunk: int = 64) -> np.ndarray:
    """Last-hour probability per encounter (eval mode), batched by similar length."""
    order = sorted(range(len(cohort)), key=lambda i: cohort[i].T)
    out = np.empty(len(cohort))
    for start in range(0, len(order), chunk):
        idx = order[start : start + chunk]
        for i, (probs, _) in zip(idx, model.forward([cohort[i] for i in idx])):
            out[i] = probs[-1]
    return out


def train(
    cohort,
    val_cohort,
    config: ModelConfig,
    val_auc_fn: Optional[Callable[[DeepSofaModel, int], float]] = None,
) -> tuple[DeepSofaModel, TrainingLog]:
    """Train on ``cohort``; early-stop on final-hour AUC over ``val_cohort``.

    Returns the model holding the best-validation-epoch parameters. ``val_auc_fn``
    replaces the validation scorer (called with the current model and epoch).
    """
    if not cohort:
        raise ValueError("empty training cohort")
    train_ids = {s.encounter_id for s in cohort}
    if any(s.encounter_id in train_ids for s in val_cohort):
        raise ValueError("training and validation cohorts overlap")

    columns = np.array([VAR_INDEX[c] for c in config.columns])
    mean, std = fit_normalization(cohort, columns)
    model = DeepSofaModel(config, init_params(config), mean, std)
    inputs = [(model.inputs(s), s.label) for s in cohort]
    val_labels = np.array([s.label for s in val_cohort])

    state = AdamState(
        lr=config.learning_rate,
        beta1=config.beta1,
        beta2=config.beta2,
        eps=config.adam_eps,
        l2=config.l2_lambda,
    )
    stopper = EarlyStopping(config.patience_epochs)
    log = TrainingLog()
    bs = config.batch_size
    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        order = make_rng(config.seed, 1, epoch).permutation(len(inputs))
        losses = []
        for b, start in enumerate(range(0, len(order), bs)):
            batch = [inputs[i] for i in order[start : start + bs]]
            rng = make_rng(config.seed, 2, epoch, b)
            loss_value, grads = gradients(model.params, batch, config, rng=rng)
            model.params, state = adam_step(model.params, grads, state)
            losses.append(loss_value)
        if val_auc_fn is not None:
            auc = float(val_auc_fn(model, epoch))
        else:
            auc = roc_auc(final_hour_probs(model, val_cohort), val_labels)
        record = EpochRecord(epoch, float(np.mean(losses)), auc, time.perf_counter() - t0)
        log.epochs.append(record)
        logger.info("epoch %d loss %.4f val_auc %.4f (%.1fs)", epoch, record.train_loss, auc, record.seconds)
        if stopper.update(epoch, auc, model.params):
            log.stopped_early = True
            break
    model.params = stopper.best_params
    log.best_epoch = stopper.best_epoch
    log.best_val_auc = stopper.best_auc
    return model, log

