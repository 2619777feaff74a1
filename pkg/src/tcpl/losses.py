"""Interpretable prototype learning objective.

``total = ce + lambda1 * cdpd + lambda2 * dd`` where ``cdpd`` pulls patch
features of a labeled image toward prototypes of its class and away from the
others (across both domains) and ``dd`` drives off-class head weights to zero.
Gradients come from autograd; ``tests/test_losses.py`` checks them against
central differences.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .exceptions import LossError

logger = logging.getLogger(__name__)

EXPONENT_CLAMP = 30.0


@dataclass
class LossBreakdown:
    total: torch.Tensor
    ce: torch.Tensor
    cdpd: torch.Tensor
    dd: torch.Tensor
    n_source: int
    n_target_pl: int
    cdpd_clamped: bool = False

    def as_dict(self):
        return {
            "ce": self.ce.item(), "cdpd": self.cdpd.item(), "dd": self.dd.item(),
            "total": self.total.item(), "n_source": self.n_source, "n_target_pl": self.n_target_pl,
        }


def smooth_l1(x):
    ax = x.abs()
    return torch.where(ax < 1, 0.5 * x * x, ax - 0.5)


def cross_entropy(logits, labels):
    if logits.shape[0] == 0:
        raise LossError("cross-entropy of an empty batch", component="ce")
    return F.cross_entropy(logits, labels)


def normalized_similarities(pyramid, prototypes):
    """``b . p / ||b||`` for every (prototype, grid): shape ``(B, P, G)``."""
    b = pyramid.flatten()
    norms = b.norm(dim=2).clamp_min(1e-12)
    return torch.einsum("bgd,pd->bpg", b, prototypes) / norms.unsqueeze(1)


def _extreme(cos, mask, attract):
    """Per-sample min (or max) of ``cos`` over prototypes selected by ``mask`` and all grids."""
    per_proto = cos.min(dim=2).values if attract == "min" else cos.max(dim=2).values
    fill = math.inf if attract == "min" else -math.inf
    masked = per_proto.masked_fill(~mask, fill)
    return masked.min(dim=1).values if attract == "min" else masked.max(dim=1).values


def attraction_separation(cos, labels, n_per_class, attract="min"):
    """``(r, r_tilde)`` averaged over the batch.

    ``r`` uses prototypes of each sample's class, ``r_tilde`` the others;
    both take the minimum over prototypes and grids unless ``attract='max'``
    switches the attraction term to a maximum.
    """
    owner = torch.arange(cos.shape[1], device=cos.device) // n_per_class
    own = owner.unsqueeze(0) == labels.unsqueeze(1)
    r = _extreme(cos, own, attract).mean()
    r_tilde = _extreme(cos, ~own, "min").mean()
    return r, r_tilde


def cdpd_from_terms(r_s, rt_s, r_t=None, rt_t=None, eta=1.0):
    """``exp((r~s + eta r~t) - (rs + eta rt))`` with target terms optional."""
    exponent = rt_s - r_s
    if r_t is not None:
        exponent = exponent + eta * (rt_t - r_t)
    clamped = bool(exponent.detach().abs() > EXPONENT_CLAMP)
    if clamped:
        logger.warning("cdpd exponent %.3f clamped to +-%g", float(exponent), EXPONENT_CLAMP)
    return torch.exp(exponent.clamp(-EXPONENT_CLAMP, EXPONENT_CLAMP)), clamped


def cdpd_loss(source, target, prototypes, n_per_class, eta=1.0, attract="min", return_clamped=False):
    """Cross-domain prototype discrimination loss.

    ``source`` and ``target`` are ``(pyramid, labels)`` pairs or ``None``; the
    target pair holds pseudo-labeled images. An empty target batch drops the
    target terms.
    """
    terms = []
    for batch in (source, target):
        if batch is None or batch[1].numel() == 0:
            terms.append(None)
            continue
        cos = normalized_similarities(batch[0], prototypes)
        terms.append(attraction_separation(cos, batch[1], n_per_class, attract))
    if terms[0] is None and terms[1] is None:
        raise LossError("cdpd needs a non-empty source or target batch", component="cdpd")
    zero = prototypes.new_zeros(())
    r_s, rt_s = terms[0] if terms[0] is not None else (zero, zero)
    r_t, rt_t = terms[1] if terms[1] is not None else (None, None)
    loss, clamped = cdpd_from_terms(r_s, rt_s, r_t, rt_t, eta)
    return (loss, clamped) if return_clamped else loss


def dd_loss(head, n_per_class):
    """smoothL1 summed over off-class head weights; own-class entries excluded."""
    C, P = head.shape
    owner = torch.arange(P, device=head.device) // n_per_class
    off = owner.unsqueeze(0) != torch.arange(C, device=head.device).unsqueeze(1)
    return smooth_l1(head[off]).sum()


def compose(ce, cdpd, dd, weights):
    return ce + weights.lambda1 * cdpd + weights.lambda2 * dd


def total_loss(model, source_x, source_y, weights, target_x=None, target_y=None, attract="min"):
    """Forward a mixed batch and return the :class:`LossBreakdown`.

    Call ``breakdown.total.backward()`` for gradients of every trainable
    parameter (backbone, prototypes, head).
    """
    ns = 0 if source_x is None else len(source_x)
    nt = 0 if target_x is None else len(target_x)
    if ns == 0:
        raise LossError("total loss needs a non-empty source batch", component="ce")
    x = model.to_input(source_x)
    if nt:
        x = torch.cat([x, model.to_input(target_x)])
        y = torch.cat([source_y, target_y])
    else:
        y = source_y
    out = model(x)
    ce = cross_entropy(out.logits, y)

    pyr = out.pyramid
    src_pyr = type(pyr)([lv[:ns] for lv in pyr.levels], pyr.pool_sizes, pyr.image_size)
    tgt = None
    if nt:
        tgt = (type(pyr)([lv[ns:] for lv in pyr.levels], pyr.pool_sizes, pyr.image_size), target_y)
    cdpd, clamped = cdpd_loss((src_pyr, source_y), tgt, model.prototypes, model.n_per_class,
                              eta=weights.eta, attract=attract, return_clamped=True)
    dd = dd_loss(model.head, model.n_per_class)
    total = compose(ce, cdpd, dd, weights)
    breakdown = LossBreakdown(total, ce, cdpd, dd, ns, nt, clamped)
    for name in ("ce", "cdpd", "dd", "total"):
        if not torch.isfinite(getattr(breakdown, name)):
            raise LossError(f"non-finite {name} loss: {breakdown.as_dict()}", component=name,
                            breakdown=breakdown.as_dict())
    return breakdown
