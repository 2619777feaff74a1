"""Self-predictive consistent pseudo-labeling.

A target image joins the pseudo-labeled set only when a committee of ``q``
label-preserving views agrees with the untransformed prediction on three
counts: every view is confident (``v > V``), a strict majority of views
predicts the same class, and for a strict majority the most similar prototype
lies in that class's block.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .config import CRITERIA
from .data import committee_batch, committee_views
from .exceptions import ContractError

AUDIT_SCHEMA_VERSION = 1


@dataclass
class ViewRecord:
    confidence: float
    pred: int
    top_prototype: int


@dataclass
class CommitteeVerdict:
    sample_id: str
    base_pred: int
    per_view: list
    criteria: dict
    consistent: bool

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        views = [ViewRecord(**v) for v in d["per_view"]]
        return cls(d["sample_id"], int(d["base_pred"]), views, dict(d["criteria"]), bool(d["consistent"]))


def committee_criteria(base_pred, confidences, preds, top_prototypes, V, block_size):
    """The three criterion booleans for one sample's committee records."""
    q = len(confidences)
    confidences = np.asarray(confidences, dtype=np.float64)
    preds = np.asarray(preds)
    tops = np.asarray(top_prototypes)
    lo, hi = base_pred * block_size, (base_pred + 1) * block_size
    return {
        "confidence": bool(np.all(confidences > V)),
        "prediction": bool(2 * np.sum(preds == base_pred) > q),
        "prototype": bool(2 * np.sum((tops >= lo) & (tops < hi)) > q),
    }


def make_verdict(sample_id, base_pred, confidences, preds, top_prototypes, V, block_size,
                 enabled=CRITERIA):
    crit = committee_criteria(base_pred, confidences, preds, top_prototypes, V, block_size)
    views = [ViewRecord(float(v), int(p), int(w)) for v, p, w in zip(confidences, preds, top_prototypes)]
    return CommitteeVerdict(str(sample_id), int(base_pred), views, crit, all(crit[k] for k in enabled))


@dataclass
class PseudoLabel:
    pseudo_label: int
    epoch_assigned: int
    verdict: CommitteeVerdict


@dataclass
class PseudoLabeledSet:
    entries: dict = field(default_factory=dict)
    epoch: int = 0
    # every verdict of the refresh that built this set, accepted or not
    verdicts: list = field(default_factory=list, repr=False)

    def __len__(self):
        return len(self.entries)

    def __contains__(self, sample_id):
        return sample_id in self.entries

    @property
    def ids(self):
        return list(self.entries)

    def label_of(self, sample_id):
        return self.entries[sample_id].pseudo_label

    def to_dict(self):
        return {"epoch": self.epoch,
                "entries": {k: {"pseudo_label": e.pseudo_label, "epoch_assigned": e.epoch_assigned,
                                "verdict": e.verdict.to_dict()} for k, e in self.entries.items()}}

    @classmethod
    def from_dict(cls, d):
        entries = {k: PseudoLabel(int(e["pseudo_label"]), int(e["epoch_assigned"]),
                                  CommitteeVerdict.from_dict(e["verdict"]))
                   for k, e in d["entries"].items()}
        return cls(entries, int(d["epoch"]))


def block_size(model, multiplier="M"):
    return model.n_per_class if multiplier == "M" else len(model.pool_sizes)


@torch.no_grad()
def base_prediction(x, model) -> int:
    return int(model(x.image).prediction[0])


@torch.no_grad()
def _records(model, images, batch_size):
    """``(confidence, pred, top_prototype)`` arrays for a stack of NHWC images."""
    f, logits = model.predict_batches(images, batch_size)
    logits = logits.astype(np.float64)
    z = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    return probs.max(axis=1), logits.argmax(axis=1), f.argmax(axis=1)


def evaluate_committee_batch(samples, model, policy, V, epoch=0, criteria=CRITERIA,
                             block_multiplier="M", batch_size=256):
    """Verdicts for many samples; one eval-mode pass over originals and views."""
    samples = list(samples)
    if not samples:
        return []
    was_training = model.training
    model.eval()
    try:
        originals = np.stack([s.image for s in samples])
        _, base, _ = _records(model, originals, batch_size)
        views = committee_batch(samples, policy, epoch)
        n, q = views.shape[:2]
        conf, pred, top = _records(model, views.reshape((n * q,) + views.shape[2:]), batch_size)
    finally:
        model.train(was_training)
    bs = block_size(model, block_multiplier)
    conf, pred, top = conf.reshape(n, q), pred.reshape(n, q), top.reshape(n, q)
    return [make_verdict(s.id, base[i], conf[i], pred[i], top[i], V, bs, criteria)
            for i, s in enumerate(samples)]


def evaluate_committee(x, model, policy, V, epoch=0, criteria=CRITERIA, block_multiplier="M"):
    return evaluate_committee_batch([x], model, policy, V, epoch, criteria, block_multiplier)[0]


def refresh_pseudo_labels(target, model, policy, thresholds, epoch=0, criteria=CRITERIA,
                          block_multiplier="M"):
    """Rebuild the pseudo-labeled set from scratch with fresh verdicts."""
    if policy.q != thresholds.q:
        raise ContractError(f"policy has q={policy.q}, thresholds say q={thresholds.q}")
    verdicts = evaluate_committee_batch(target.samples, model, policy, thresholds.V, epoch,
                                        criteria, block_multiplier)
    plt = PseudoLabeledSet(epoch=epoch, verdicts=verdicts)
    for v in verdicts:
        if v.consistent:
            plt.entries[v.sample_id] = PseudoLabel(v.base_pred, epoch, v)
    return plt


def training_views_for(x, plt, policy, epoch):
    """Committee views of a consistent sample; the loss is taken on these, not on ``x``."""
    if x.id not in plt:
        raise ContractError(f"sample {x.id} is not in the pseudo-labeled set")
    return committee_views(x, policy, epoch)


def audit_summary(verdicts, target=None):
    n = len(verdicts)
    accepted = [v for v in verdicts if v.consistent]
    summary = {
        "n_samples": n,
        "n_accepted": len(accepted),
        "acceptance_rate": len(accepted) / n if n else 0.0,
        "criterion_failures": {k: sum(not v.criteria[k] for v in verdicts) for k in CRITERIA},
    }
    if target is not None and target.has_eval_labels():
        truth = {s.id: s.eval_label for s in target}
        summary["pseudo_label_accuracy"] = (
            sum(v.base_pred == truth[v.sample_id] for v in accepted) / len(accepted) if accepted else None)
        summary["base_accuracy"] = sum(v.base_pred == truth[v.sample_id] for v in verdicts) / n if n else None
    return summary


def audit_document(verdicts, epoch, target=None):
    return {"schema_version": AUDIT_SCHEMA_VERSION, "epoch": epoch,
            "summary": audit_summary(verdicts, target),
            "verdicts": [v.to_dict() for v in verdicts]}
