"""Prototype projection, activation maps, evidence boxes and reasoning traces."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .data import SOURCE, TARGET

logger = logging.getLogger(__name__)

TRACE_SCHEMA_VERSION = 1


# ---------------------------------------------------------------------------
# projection


@torch.no_grad()
def _grid_features(model, images, batch_size=128):
    """Yield ``(start, b, cos)`` chunks: grids ``(n, G, D)`` and normalized sims ``(n, P, G)``."""
    for start in range(0, len(images), batch_size):
        pyr = model.pyramid(model.to_input(images[start:start + batch_size]))
        b = pyr.flatten()
        cos = torch.einsum("bgd,pd->bpg", b, model.prototypes) / b.norm(dim=2).clamp_min(1e-12).unsqueeze(1)
        yield start, pyr, b, cos


@torch.no_grad()
def project_prototypes(model, source, plt=None, target=None, eta=1.0, batch_size=128):
    """Overwrite each prototype with its most similar same-class training patch.

    Candidates for a class-``c`` prototype are every grid of every source image
    labeled ``c`` (scored by cosine) and every grid of every pseudo-labeled
    target image with pseudo-label ``c`` (scored by ``eta`` times cosine). The
    winner is normalized to unit length and recorded as provenance. With
    ``eta == 0`` target candidates are not considered. Ties keep the first
    candidate (source before target, dataset order, canonical grid order).

    Returns the indices of prototypes that were projected.
    """
    was_training = model.training
    model.eval()
    P = model.n_prototypes
    best = np.full(P, -np.inf)
    winner = [None] * P
    owner = np.arange(P) // model.n_per_class

    pools = [(source, [s.label for s in source], 1.0, SOURCE)]
    if plt is not None and target is not None and len(plt) and eta > 0:
        members = [s for s in target if s.id in plt]
        pools.append((members, [plt.label_of(s.id) for s in members], float(eta), TARGET))

    try:
        for samples, labels, scale, domain in pools:
            samples = list(samples)
            if not samples:
                continue
            labels = np.asarray(labels)
            images = np.stack([s.image for s in samples])
            for start, pyr, b, cos in _grid_features(model, images, batch_size):
                scores = (scale * cos).cpu().numpy()
                coords = pyr.coords()
                lab = labels[start:start + len(scores)]
                for j in range(P):
                    rows = np.flatnonzero(lab == owner[j])
                    if rows.size == 0:
                        continue
                    flat = scores[rows, j, :]
                    k = int(np.argmax(flat))
                    val = flat.flat[k]
                    if val > best[j]:
                        i, g = rows[k // flat.shape[1]], k % flat.shape[1]
                        best[j] = val
                        winner[j] = (samples[start + i], domain, coords[g], b[i, g].clone(), float(val))
        projected = []
        for j in range(P):
            if winner[j] is None:
                logger.info("prototype %d: no candidate patches for class %d, left unchanged", j, owner[j])
                continue
            sample, domain, (level, row, col), vec, score = winner[j]
            model.prototypes[j] = vec / vec.norm().clamp_min(1e-12)
            model.provenance[j] = {
                "sample_id": sample.id, "domain": domain, "level": int(level), "row": int(row),
                "col": int(col), "similarity": score,
                "image": np.asarray(sample.image, dtype=np.float32).copy(),
            }
            projected.append(j)
    finally:
        model.train(was_training)
    return projected


# ---------------------------------------------------------------------------
# activation maps and boxes


@dataclass
class ActivationMap:
    values: np.ndarray
    source_level: int
    prototype_index: int
    raw: np.ndarray


def upsample(raw, size):
    """Bilinear upsampling (pixel-center aligned) of a 2-D map to ``size``."""
    t = torch.as_tensor(np.asarray(raw, dtype=np.float64))[None, None]
    return F.interpolate(t, size=tuple(size), mode="bilinear", align_corners=False)[0, 0].numpy()


@torch.no_grad()
def activation_map(image, model, j, level=None) -> ActivationMap:
    """Similarity map of prototype ``j`` on the pyramid level holding its argmax grid."""
    if not 0 <= j < model.n_prototypes:
        raise IndexError(f"prototype index {j} outside 0..{model.n_prototypes - 1}")
    was_training = model.training
    model.eval()
    try:
        out = model(image)
    finally:
        model.train(was_training)
    if level is None:
        level = out.argmax_grid(0)[j][0]
    pyr = out.pyramid
    h, w = pyr.level_shapes[level]
    raw = out.sims[0, j, pyr.level_slice(level)].reshape(h, w).double().cpu().numpy()
    return ActivationMap(upsample(raw, pyr.image_size), int(level), int(j), raw)


def box_threshold(values, percentile=95.0, rule="percentile"):
    values = np.asarray(values, dtype=np.float64)
    if rule == "percentile":
        return float(np.percentile(values, percentile))
    if rule == "fraction_of_max":
        return float(values.max() * percentile / 100.0)
    raise ValueError(f"unknown box rule {rule!r}")


def high_activation_box(values, percentile=95.0, rule="percentile"):
    """Smallest rectangle enclosing every pixel at or above the threshold.

    Returns inclusive ``(top, left, bottom, right)`` pixel indices.
    """
    if isinstance(values, ActivationMap):
        values = values.values
    values = np.asarray(values, dtype=np.float64)
    t = box_threshold(values, percentile, rule)
    rows, cols = np.nonzero(values >= t)
    if rows.size == 0:
        # fraction_of_max on an all-negative map selects nothing; fall back to the max
        rows, cols = np.unravel_index(np.argmax(values), values.shape)
        rows, cols = np.atleast_1d(rows), np.atleast_1d(cols)
    return int(rows.min()), int(cols.min()), int(rows.max()), int(cols.max())


def crop(image, box):
    top, left, bottom, right = box
    return np.asarray(image)[top:bottom + 1, left:right + 1]


# ---------------------------------------------------------------------------
# prototype cards


@dataclass
class PrototypeCard:
    prototype_index: int
    cls: int
    provenance: Optional[dict]
    patch_image: Optional[np.ndarray]
    similarity_at_projection: Optional[float]
    cosine: Optional[float] = None
    status: str = "projected"
    box: Optional[tuple] = None


@torch.no_grad()
def provenance_feature(model, j):
    prov = model.provenance[j]
    out = model(prov["image"])
    return out.pyramid.at(prov["level"], prov["row"], prov["col"], 0)


def provenance_cosine(model, j):
    b = provenance_feature(model, j)
    p = model.prototypes[j].detach()
    return float(torch.dot(b, p) / (b.norm() * p.norm()))


def prototype_card(model, j, percentile=95.0, rule="percentile") -> PrototypeCard:
    prov = model.provenance[j]
    if prov is None:
        return PrototypeCard(j, model.class_of(j), None, None, None, status="unprojected")
    amap = activation_map(prov["image"], model, j, level=prov["level"])
    box = high_activation_box(amap.values, percentile, rule)
    meta = {k: v for k, v in prov.items() if k != "image"}
    return PrototypeCard(j, model.class_of(j), meta, crop(prov["image"], box), prov["similarity"],
                         cosine=provenance_cosine(model, j), box=box)


@torch.no_grad()
def nearest_patch_preview(model, j, source, batch_size=128):
    """Best same-class source patch for ``j`` without touching the prototype."""
    c = model.class_of(j)
    samples = [s for s in source if s.label == c]
    if not samples:
        return None
    images = np.stack([s.image for s in samples])
    best, found = -np.inf, None
    for start, pyr, _, cos in _grid_features(model, images, batch_size):
        sc = cos[:, j, :].cpu().numpy()
        k = int(np.argmax(sc))
        if sc.flat[k] > best:
            i, g = divmod(k, sc.shape[1])
            best = sc.flat[k]
            level, row, col = pyr.coords()[g]
            found = {"sample_id": samples[start + i].id, "domain": SOURCE, "level": level, "row": row,
                     "col": col, "similarity": float(best), "image": samples[start + i].image}
    return found


# ---------------------------------------------------------------------------
# reasoning traces


@dataclass
class Contribution:
    prototype_index: int
    own: bool
    similarity: float
    weight: float
    contribution: float
    box: Optional[tuple] = None
    card: Optional[str] = None


@dataclass
class ExplanationTrace:
    """Per-prototype decomposition of every class logit.

    ``per_class[c]`` lists all prototypes once; ``logits[c]`` is the exact sum
    of that row's contributions. Similarities and weights are float32 values,
    so their products are exact in float64 and 9 significant digits restore
    them bit for bit.
    """

    sample_id: str
    per_class: list
    logits: list
    predicted: int
    class_names: list = field(default_factory=list)

    def reconstruction_error(self):
        return max(abs(math.fsum(e.contribution for e in row) - lg)
                   for row, lg in zip(self.per_class, self.logits))

    def top_evidence(self, c=None, k=None):
        c = self.predicted if c is None else c
        rows = sorted((e for e in self.per_class[c] if e.own), key=lambda e: -e.contribution)
        return rows[:k] if k else rows

    def to_json(self):
        def num(x):
            return format(x, ".9g")

        return {
            "schema_version": TRACE_SCHEMA_VERSION,
            "sample_id": self.sample_id,
            "predicted": self.predicted,
            "class_names": list(self.class_names),
            "logits": [num(v) for v in self.logits],
            "per_class": [[{
                "prototype_index": e.prototype_index, "own": e.own,
                "similarity": num(e.similarity), "weight": num(e.weight),
                "contribution": num(e.contribution),
                "box": list(e.box) if e.box is not None else None, "card": e.card,
            } for e in row] for row in self.per_class],
        }

    @classmethod
    def from_json(cls, doc):
        """Inverse of :meth:`to_json`; contributions and logits are recomputed exactly."""
        per_class = []
        for row in doc["per_class"]:
            entries = []
            for e in row:
                s, w = _f32(e["similarity"]), _f32(e["weight"])
                entries.append(Contribution(int(e["prototype_index"]), bool(e["own"]), s, w, s * w,
                                            tuple(e["box"]) if e["box"] is not None else None, e["card"]))
            per_class.append(entries)
        logits = [math.fsum(e.contribution for e in row) for row in per_class]
        return cls(doc["sample_id"], per_class, logits, int(doc["predicted"]), list(doc.get("class_names", [])))


def _f32(x):
    return float(np.float32(float(x)))


def trace_from_arrays(sample_id, f, W, class_names=(), n_per_class=None):
    """Trace from one similarity vector ``f`` (P,) and head ``W`` (C, P)."""
    f = np.asarray(f, dtype=np.float32).astype(np.float64)
    W = np.asarray(W, dtype=np.float32).astype(np.float64)
    C, P = W.shape
    m = n_per_class or P // C
    per_class, logits = [], []
    for c in range(C):
        row = [Contribution(j, j // m == c, float(f[j]), float(W[c, j]), float(W[c, j] * f[j]))
               for j in range(P)]
        per_class.append(row)
        logits.append(math.fsum(e.contribution for e in row))
    predicted = int(np.argmax(logits))
    return ExplanationTrace(str(sample_id), per_class, logits, predicted, list(class_names))


@torch.no_grad()
def build_trace(image, model, sample_id="query", class_names=(), percentile=95.0, rule="percentile",
                box_classes=None):
    """Trace of one image, with evidence boxes for the predicted class's prototypes.

    ``box_classes`` adds boxes for further classes.
    """
    was_training = model.training
    model.eval()
    try:
        out = model(image)
    finally:
        model.train(was_training)
    trace = trace_from_arrays(sample_id, out.f[0].cpu().numpy(), model.head.detach().cpu().numpy(),
                              class_names, model.n_per_class)
    wanted = {trace.predicted} | set(box_classes or ())
    argmax_grid = out.argmax_grid(0)
    for c in wanted:
        for e in trace.per_class[c]:
            if not e.own:
                continue
            j = e.prototype_index
            amap = activation_map(image, model, j, level=argmax_grid[j][0])
            e.box = high_activation_box(amap.values, percentile, rule)
            e.card = f"prototype_{j}_card.png"
    return trace
