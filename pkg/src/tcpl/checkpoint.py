"""Versioned checkpoint container.

One ``torch.save`` file holding the model state dict, provenance records,
optimizer state, pseudo-labeled set, epoch, config, class names and a
random-state snapshot. Tensors round-trip bit-exactly.
"""
from __future__ import annotations

import hashlib
import os
from pathlib import Path

import numpy as np
import torch

CHECKPOINT_FORMAT = "tcpl-checkpoint"
CHECKPOINT_VERSION = 1


def _provenance_payload(records):
    return [None if r is None else {k: (torch.from_numpy(v) if isinstance(v, np.ndarray) else v)
                                    for k, v in r.items()} for r in records]


def _provenance_restore(records):
    return [None if r is None else {k: (v.numpy() if isinstance(v, torch.Tensor) else v)
                                    for k, v in r.items()} for r in records]


def state_payload(state, config, class_names):
    model = state.model
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "epoch": state.epoch,
        "step": state.step,
        "config": config.to_dict(),
        "class_names": list(class_names),
        "model": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "pool_sizes": list(model.pool_sizes),
        "class_of": [model.class_of(j) for j in range(model.n_prototypes)],
        "provenance": _provenance_payload(model.provenance),
        "optimizer": state.optimizer.state_dict() if state.optimizer is not None else None,
        "pseudo_labels": state.plt.to_dict(),
        "history": list(state.history),
        "rng": {"torch": torch.get_rng_state()},
    }


def save_checkpoint(path, state, config, class_names):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(state_payload(state, config, class_names), tmp)
    os.replace(tmp, path)
    return path


def read_checkpoint(path):
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a checkpoint file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    payload["provenance"] = _provenance_restore(payload["provenance"])
    return payload


def parameter_digest(model):
    """SHA-256 over the raw bytes of every parameter and buffer, in state-dict order."""
    h = hashlib.sha256()
    for name, t in model.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
