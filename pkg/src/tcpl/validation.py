"""Input checks shared by the estimator and the command line."""
from __future__ import annotations

import numpy as np

from .data import SOURCE, TARGET, DomainDataset, ImageSample
from .exceptions import ShapeError


def check_images(X, name="X"):
    """Return ``X`` as a float32 ``(n, H, W, 3)`` array with values in ``[0, 1]``.

    ``uint8`` input is scaled by ``1/255``; a single ``(H, W, 3)`` image gains
    a leading axis. A :class:`DomainDataset` is unpacked.
    """
    if isinstance(X, DomainDataset):
        return X.images()
    arr = np.asarray(X)
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    elif not np.issubdtype(arr.dtype, np.number):
        raise ShapeError(f"{name} must be numeric, got dtype {arr.dtype}")
    arr = arr.astype(np.float32, copy=False)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ShapeError(f"{name} must have shape (n, H, W, 3), got {arr.shape}")
    if arr.shape[0] == 0:
        raise ShapeError(f"{name} is empty")
    if arr.shape[1] != arr.shape[2]:
        raise ShapeError(f"{name} images must be square, got {arr.shape[1]}x{arr.shape[2]}")
    if not np.isfinite(arr).all():
        raise ShapeError(f"{name} contains NaN or infinite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ShapeError(f"{name} values must lie in [0, 1]")
    return arr


def dataset_from_arrays(images, labels=None, class_names=None, domain=SOURCE, prefix=None):
    """Wrap an image array as a :class:`DomainDataset` with ids ``<prefix>-00000``..."""
    images = check_images(images)
    prefix = prefix or ("src" if domain == SOURCE else "tgt")
    if domain == SOURCE and labels is None:
        raise ShapeError("source images need labels")
    if labels is not None and len(labels) != len(images):
        raise ShapeError(f"{len(images)} images but {len(labels)} labels")
    samples = []
    for i, img in enumerate(images):
        lab = int(labels[i]) if labels is not None else None
        if domain == TARGET:
            samples.append(ImageSample(img, None, TARGET, f"{prefix}-{i:05d}", eval_label=lab))
        else:
            samples.append(ImageSample(img, lab, SOURCE, f"{prefix}-{i:05d}"))
    return DomainDataset(samples, list(class_names or []), domain)
