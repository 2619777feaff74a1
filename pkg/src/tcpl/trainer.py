"""Training loop: optimize, refresh pseudo-labels, then (late) project prototypes.

Epochs are numbered from 1. ``learning_rate`` takes the number of completed
epochs, so training epoch ``e`` runs at ``learning_rate(e - 1)``. Projection
runs after epoch ``e`` iff ``e > epoch_update_proto``.

All randomness is derived from ``(seed, epoch)`` or from the augmentation key
``(seed, sample id, epoch, view)``; nothing depends on a running generator,
so a resumed run replays the uninterrupted one exactly.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from .checkpoint import read_checkpoint, save_checkpoint
from .config import TrainConfig, config_from_any
from .data import AugmentationPolicy, committee_batch
from .exceptions import ConfigError, LossError
from .interpret import project_prototypes
from .losses import total_loss
from .model import build_model
from .selftrain import PseudoLabeledSet, audit_document, refresh_pseudo_labels

logger = logging.getLogger(__name__)

_SHUFFLE_STREAM = 1
_POOL_STREAM = 2


@dataclass
class TrainState:
    model: torch.nn.Module
    optimizer: torch.optim.Optimizer
    epoch: int = 0
    step: int = 0
    plt: PseudoLabeledSet = field(default_factory=PseudoLabeledSet)
    history: list = field(default_factory=list)


def learning_rate(epoch, config) -> float:
    """``lr0 * factor ** (epoch // decay_every)`` for a 0-based epoch index."""
    return config.lr0 * config.lr_decay_factor ** (epoch // config.lr_decay_every)


def committee_policy(config) -> AugmentationPolicy:
    return AugmentationPolicy(config.thresholds.q, list(config.augment), config.seed)


def training_policy(config) -> AugmentationPolicy:
    ops = config.augment if config.train_augment is None else config.train_augment
    return AugmentationPolicy(config.thresholds.q, list(ops), config.seed)


def make_optimizer(model, config):
    return torch.optim.SGD(model.parameters(), lr=config.lr0, momentum=config.momentum)


def initialize(config, n_classes) -> TrainState:
    config = config_from_any(config)
    if n_classes < 2:
        raise ConfigError("data", "need at least two classes")
    model = build_model(config, n_classes)
    state = TrainState(model, make_optimizer(model, config))
    state.history.append({"kind": "epoch", "epoch": 0, "n_pseudo_labeled": 0, "n_projected": 0})
    return state


class TrainingLog:
    """Newline-delimited JSON sink; ``None`` path keeps records in memory only."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.records = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, record):
        self.records.append(record)
        if self.path:
            with self.path.open("a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


def _set_lr(optimizer, lr):
    for group in optimizer.param_groups:
        group["lr"] = lr


def train_epoch(state, source, target, config, log=None, audit_dir=None, monitor=None):
    """Run one epoch of the loop and return ``state`` (mutated in place)."""
    config = config_from_any(config)
    model, optimizer = state.model, state.optimizer
    epoch = state.epoch + 1
    log = log or TrainingLog()
    lr = learning_rate(epoch - 1, config)
    _set_lr(optimizer, lr)
    model.train()

    bs, bt = config.batch_size.source, config.batch_size.target_pl
    order = np.random.default_rng([config.seed, _SHUFFLE_STREAM, epoch]).permutation(len(source))
    y_source = torch.as_tensor(source.labels())

    # augmented views of every pseudo-labeled sample, carrying its pseudo-label
    members = [s for s in target if s.id in state.plt] if target is not None else []
    if members and bt > 0:
        views = committee_batch(members, training_policy(config), epoch)
        q = views.shape[1]
        pool_images = views.reshape((-1,) + views.shape[2:])
        pool_labels = np.repeat([state.plt.label_of(s.id) for s in members], q)
        pool_order = np.random.default_rng([config.seed, _POOL_STREAM, epoch]).permutation(len(pool_labels))
    else:
        pool_images, pool_labels, pool_order = None, None, np.zeros(0, dtype=int)

    sums = {"ce": 0.0, "cdpd": 0.0, "dd": 0.0, "total": 0.0}
    n_steps = math.ceil(len(source) / bs)
    for k in range(n_steps):
        idx = order[k * bs:(k + 1) * bs]
        tidx = pool_order[k * bt:(k + 1) * bt]
        tx = ty = None
        if len(tidx):
            tx = pool_images[tidx]
            ty = torch.as_tensor(pool_labels[tidx])
        optimizer.zero_grad()
        try:
            breakdown = total_loss(model, source.images(idx), y_source[idx], config.loss, tx, ty,
                                   attract=config.cdpd_attract)
        except LossError as exc:
            exc.args = (f"epoch {epoch} step {state.step + 1}: {exc.args[0]}",)
            raise
        breakdown.total.backward()
        optimizer.step()
        model.normalize_prototypes_()
        state.step += 1
        record = {"kind": "step", "step": state.step, "epoch": epoch, **breakdown.as_dict()}
        if breakdown.cdpd_clamped:
            record["cdpd_clamped"] = True
        log.write(record)
        for key in sums:
            sums[key] += record[key]

    model.eval()
    if config.pseudo_label and target is not None and len(target):
        state.plt = refresh_pseudo_labels(target, model, committee_policy(config), config.thresholds,
                                          epoch, config.criteria, config.prototype_block_multiplier)
        if audit_dir is not None:
            path = Path(audit_dir) / f"epoch_{epoch:04d}.json"
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps(audit_document(state.plt.verdicts, epoch, target), indent=1))
    else:
        state.plt = PseudoLabeledSet(epoch=epoch)

    projected = []
    if epoch > config.epoch_update_proto:
        projected = project_prototypes(model, source, state.plt, target, eta=config.loss.eta)
    state.epoch = epoch

    summary = {"kind": "epoch", "epoch": epoch, "lr": lr, "steps": n_steps,
               **{k: v / n_steps for k, v in sums.items()},
               "n_pseudo_labeled": len(state.plt),
               "n_projected": sum(p is not None for p in model.provenance),
               "projected_this_epoch": len(projected)}
    if monitor is not None:
        summary.update(monitor(model, state.plt))
    state.history.append(summary)
    log.write(summary)
    return state


def restore_state(payload, config=None) -> TrainState:
    config = config_from_any(config if config is not None else payload["config"])
    model = build_model(config, len(payload["class_names"]))
    model.load_state_dict(payload["model"])
    model.provenance = list(payload["provenance"])
    optimizer = make_optimizer(model, config)
    if payload.get("optimizer") is not None:
        optimizer.load_state_dict(payload["optimizer"])
    plt = PseudoLabeledSet.from_dict(payload["pseudo_labels"])
    return TrainState(model, optimizer, payload["epoch"], payload["step"], plt, list(payload["history"]))


def load_state(path, config=None):
    payload = read_checkpoint(path)
    return restore_state(payload, config), payload


def fit(config, source, target=None, out_dir=None, resume_from=None, monitor: Optional[Callable] = None,
        callback: Optional[Callable] = None, stop_after: Optional[int] = None) -> TrainState:
    """Train for ``config.epochs`` epochs (or until ``stop_after``).

    ``monitor(model, plt) -> dict`` adds evaluation metrics to each epoch
    record; it is the only place target ground truth may be consulted.
    ``callback(state)`` runs after every epoch. With ``out_dir`` the training
    log, per-epoch audits and checkpoints are written there.
    """
    config = config_from_any(config)
    if resume_from is not None:
        state, _ = load_state(resume_from, config) if not isinstance(resume_from, TrainState) else (resume_from, None)
    else:
        state = initialize(config, source.n_classes)
    out = Path(out_dir) if out_dir else None
    log = TrainingLog(out / "train_log.jsonl" if out else None)
    audit_dir = out / "audit" if (out and config.write_audit) else None
    if out and resume_from is None:
        save_checkpoint(out / "checkpoints" / "epoch_0000.pt", state, config, source.class_names)

    last = config.epochs if stop_after is None else min(config.epochs, stop_after)
    while state.epoch < last:
        train_epoch(state, source, target, config, log, audit_dir, monitor)
        if callback is not None:
            callback(state)
        if out and (state.epoch % config.checkpoint_every == 0 or state.epoch == last):
            save_checkpoint(out / "checkpoints" / f"epoch_{state.epoch:04d}.pt", state, config,
                            source.class_names)
    if out:
        save_checkpoint(out / "final.pt", state, config, source.class_names)
    return state


def accuracy(model, dataset, labels=None):
    """Top-1 accuracy; ``labels`` defaults to training labels, else evaluation labels."""
    if labels is None:
        labels = dataset.labels() if dataset.domain == "source" else dataset.eval_labels()
    model.eval()
    _, logits = model.predict_batches(dataset.images())
    return float(np.mean(logits.argmax(axis=1) == labels))


def target_monitor(target):
    """Monitor reporting target accuracy and pseudo-label precision from evaluation labels."""
    truth = dict(zip(target.ids, target.eval_labels()))

    def monitor(model, plt):
        metrics = {"target_accuracy": accuracy(model, target, target.eval_labels())}
        if len(plt):
            metrics["pseudo_label_precision"] = float(np.mean([plt.label_of(i) == truth[i] for i in plt.ids]))
        return metrics

    return monitor
