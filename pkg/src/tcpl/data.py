"""Datasets, the synthetic two-domain generator and the augmentation committee.

Images are ``H x W x 3`` float32 arrays with values in ``[0, 1]``.
"""
from __future__ import annotations

import colorsys
import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .exceptions import ConfigError, DatasetError, ShapeError

logger = logging.getLogger(__name__)

SOURCE = "source"
TARGET = "target"
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


@dataclass
class ImageSample:
    image: np.ndarray
    label: Optional[int]
    domain: str
    id: str
    # ground truth of target samples: evaluation only, never read by training
    eval_label: Optional[int] = field(default=None, repr=False)

    def __post_init__(self):
        if self.domain not in (SOURCE, TARGET):
            raise DatasetError(f"unknown domain {self.domain!r}")
        if self.domain == SOURCE and self.label is None:
            raise DatasetError(f"source sample {self.id} has no label")
        if self.domain == TARGET and self.label is not None:
            raise DatasetError(f"target sample {self.id} must not carry a training label")


@dataclass
class DomainDataset:
    samples: list
    class_names: list
    domain: str
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        C = len(self.class_names)
        seen = set()
        for s in self.samples:
            if s.domain != self.domain:
                raise DatasetError(f"sample {s.id} is {s.domain}, dataset is {self.domain}")
            for lab in (s.label, s.eval_label):
                if lab is not None and not 0 <= lab < C:
                    raise DatasetError(f"sample {s.id} label {lab} outside 0..{C - 1}")
            if s.id in seen:
                raise DatasetError(f"duplicate sample id {s.id}")
            seen.add(s.id)
        self._index = {s.id: i for i, s in enumerate(self.samples)}

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def __iter__(self):
        return iter(self.samples)

    @property
    def n_classes(self):
        return len(self.class_names)

    @property
    def ids(self):
        return [s.id for s in self.samples]

    def get(self, sample_id):
        return self.samples[self._index[sample_id]]

    def position(self, sample_id):
        return self._index[sample_id]

    def __contains__(self, sample_id):
        return sample_id in self._index

    def images(self, indices=None):
        idx = range(len(self.samples)) if indices is None else indices
        return np.stack([self.samples[i].image for i in idx]).astype(np.float32)

    def labels(self):
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def has_eval_labels(self):
        return len(self.samples) > 0 and all(s.eval_label is not None for s in self.samples)

    def eval_labels(self):
        return np.array([s.eval_label for s in self.samples], dtype=np.int64)


def _read_image(path, image_size):
    with Image.open(path) as im:
        im = im.convert("RGB")
        if image_size is not None and im.size != (image_size, image_size):
            im = im.resize((image_size, image_size), Image.BILINEAR)
        return np.asarray(im, dtype=np.float32) / 255.0


def _image_files(directory):
    return sorted(p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def load_folder_dataset(root, domain, image_size=None) -> DomainDataset:
    """Load ``root/<class>/*.png`` (source) or ``root/*.png`` (target).

    A target directory laid out by class is also accepted; its labels are kept
    as evaluation-only ground truth.
    """
    root = Path(root)
    if not root.is_dir():
        raise ConfigError("data", f"dataset root not found: {root}")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if domain == SOURCE and not class_dirs:
        raise DatasetError(f"{root}: source datasets need one subdirectory per class")

    entries = []
    if class_dirs:
        class_names = [p.name for p in class_dirs]
        for c, d in enumerate(class_dirs):
            entries += [(p, c) for p in _image_files(d)]
    else:
        class_names = []
        entries = [(p, None) for p in _image_files(root)]

    samples, skipped, shape = [], 0, None
    for path, c in entries:
        try:
            img = _read_image(path, image_size)
        except (OSError, ValueError) as exc:
            logger.warning("skipping unreadable image %s: %s", path, exc)
            skipped += 1
            continue
        if shape is None:
            shape = img.shape
        elif img.shape != shape:
            raise DatasetError(f"{path}: size {img.shape[:2]} differs from {shape[:2]}; pass image_size")
        sid = str(path.relative_to(root).as_posix())
        if domain == SOURCE:
            samples.append(ImageSample(img, c, SOURCE, sid))
        else:
            samples.append(ImageSample(img, None, TARGET, sid, eval_label=c))
    if not samples:
        raise DatasetError(f"{root}: no usable images")
    return DomainDataset(samples, class_names, domain, metadata={"root": str(root), "skipped": skipped})


# ---------------------------------------------------------------------------
# synthetic domain pair

_BODIES = ("circle", "square", "triangle", "diamond", "ring", "cross")
_PARTS = ("top_block", "wheels", "tail", "left_spike", "antenna", "base_bar")


def _body_mask(kind, dx, dy, r):
    if kind == "circle":
        return dx ** 2 + dy ** 2 <= r ** 2
    if kind == "square":
        return np.maximum(abs(dx), abs(dy)) <= 0.85 * r
    if kind == "triangle":
        return (dy <= 0.8 * r) & (abs(dx) <= (dy + r) * 0.62)
    if kind == "diamond":
        return abs(dx) + abs(dy) <= 1.15 * r
    if kind == "ring":
        d2 = dx ** 2 + dy ** 2
        return (d2 <= r ** 2) & (d2 >= (0.5 * r) ** 2)
    if kind == "cross":
        return ((abs(dx) <= r / 3) & (abs(dy) <= r)) | ((abs(dy) <= r / 3) & (abs(dx) <= r))
    raise ValueError(kind)


def _part_mask(kind, dx, dy, r):
    s = max(1.5, 0.3 * r)
    if kind == "top_block":
        return (abs(dx) <= s) & (dy >= -r - 2.2 * s) & (dy < -r + 0.3 * s)
    if kind == "wheels":
        return ((dx + 0.55 * r) ** 2 + (dy - r - s) ** 2 <= s ** 2) | \
               ((dx - 0.55 * r) ** 2 + (dy - r - s) ** 2 <= s ** 2)
    if kind == "tail":
        return (dx > r - 0.3 * s) & (dx <= r + 2.5 * s) & (abs(dy) <= 0.6 * s)
    if kind == "left_spike":
        return (dx < -r + 0.3 * s) & (dx >= -r - 2.5 * s) & (abs(dy) <= (dx + r + 2.5 * s) * 0.45)
    if kind == "antenna":
        return (abs(dx - 0.5 * r) <= 0.45 * s) & (dy >= -r - 2.5 * s) & (dy < -0.5 * r)
    if kind == "base_bar":
        return (abs(dx) <= 1.1 * r) & (dy > r) & (dy <= r + 1.2 * s)
    raise ValueError(kind)


def _hsv(h, s, v):
    return np.array(colorsys.hsv_to_rgb(h % 1.0, s, v), dtype=np.float64)


def _render_scene(c, C, size, rng):
    """Draw the random parameters of one scene of class ``c``."""
    r = rng.uniform(0.17, 0.24) * size
    margin = r + max(1.5, 0.3 * r) * 2.6 + 1
    return {
        "c": c,
        "r": r,
        "cx": rng.uniform(margin, size - margin),
        "cy": rng.uniform(margin, size - margin),
        "hue": c / C + rng.uniform(-0.06, 0.06),
        "sat": rng.uniform(0.6, 0.95),
        "val": rng.uniform(0.65, 0.95),
        "bg_level": rng.uniform(0.7, 0.85),
        "bg_tilt": rng.uniform(-0.08, 0.08, size=2),
        "noise_seed": int(rng.integers(2 ** 31)),
    }


def _paint(scene, size, shift):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    u, v = xx / (size - 1) - 0.5, yy / (size - 1) - 0.5
    bg = scene["bg_level"] + scene["bg_tilt"][0] * u + scene["bg_tilt"][1] * v
    img = np.repeat(bg[..., None], 3, axis=2)
    noise_rng = np.random.default_rng(scene["noise_seed"])
    if shift.background_swap > 0:
        phase = noise_rng.uniform(0, 2 * np.pi)
        stripes = 0.22 + 0.12 * np.sin(2 * np.pi * 3.0 * (u + v) + phase)
        alt = stripes[..., None] * np.array([0.8, 1.0, 1.2])
        img = (1 - shift.background_swap) * img + shift.background_swap * alt

    c, r = scene["c"], scene["r"]
    n_kinds = len(_BODIES)
    dx, dy = xx - scene["cx"], yy - scene["cy"]
    hue = scene["hue"] + shift.hue_delta
    body = _body_mask(_BODIES[c % n_kinds], dx, dy, r)
    part = _part_mask(_PARTS[(c + c // n_kinds) % len(_PARTS)], dx, dy, r) & ~body
    img[body] = _hsv(hue, scene["sat"], scene["val"])
    img[part] = _hsv(hue + 0.5, scene["sat"], 0.5 * scene["val"])
    if shift.texture_noise > 0:
        img = img + shift.texture_noise * noise_rng.uniform(-1, 1, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_synthetic_pair(config):
    """Build a (source, target) pair of colored-shape datasets.

    Every class has a body shape, a class-specific part and a preferred hue.
    The target domain re-renders the same scenes (in a per-class shuffled
    order) under the configured hue rotation, texture noise and background
    swap, so a zero shift yields identical per-class pixel statistics. Target
    ground truth is only stored as ``eval_label``.
    """
    from .config import ShiftConfig, SyntheticConfig

    if isinstance(config, dict):
        config = dict(config)
        shift = config.pop("shift", {}) or {}
        config = SyntheticConfig(shift=ShiftConfig(**shift), **config)
    C, per_class, size = config.C, config.per_class, config.image_size
    if C < 2:
        raise ConfigError("C", "must be >= 2")
    if per_class < 4:
        raise ConfigError("per_class", "must be >= 4")
    if size < 32:
        raise ConfigError("image_size", "must be >= 32")
    shift = config.shift
    for name in ("hue_delta", "texture_noise", "background_swap"):
        if getattr(shift, name) < 0:
            raise ConfigError(f"shift.{name}", "must be >= 0")

    rng = np.random.default_rng(config.seed)
    scenes = [[_render_scene(c, C, size, rng) for _ in range(per_class)] for c in range(C)]
    perms = [rng.permutation(per_class) for _ in range(C)]
    zero = ShiftConfig()
    source, target = [], []
    # interleave classes so every prefix of the dataset is roughly balanced
    for i in range(per_class):
        for c in range(C):
            k = len(source)
            source.append(ImageSample(_paint(scenes[c][i], size, zero), c, SOURCE, f"src-{k:05d}"))
            target.append(ImageSample(_paint(scenes[c][perms[c][i]], size, shift), None, TARGET,
                                      f"tgt-{k:05d}", eval_label=c))
    names = [f"class_{c}" for c in range(C)]
    meta = {"synthetic": True, "seed": config.seed}
    return DomainDataset(source, names, SOURCE, dict(meta)), DomainDataset(target, names, TARGET, dict(meta))


# ---------------------------------------------------------------------------
# augmentation committee

_OPS = ("identity", "resized_crop", "hflip", "color_jitter", "cutout")


@dataclass
class AugmentationPolicy:
    """``q`` label-preserving transforms; view ``j`` is a pure function of
    ``(seed, sample id, epoch, j)``."""

    q: int = 4
    ops: list = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        if self.q < 1:
            raise ConfigError("thresholds.q", "committee size must be >= 1")
        for op in self.ops:
            if op.get("op") not in _OPS:
                raise ConfigError("augment", f"unknown transform {op.get('op')!r}")

    def rng(self, sample_id, epoch, j):
        key = zlib.crc32(str(sample_id).encode("utf-8"))
        return np.random.default_rng([int(self.seed), key, int(epoch), int(j)])


def _resized_crop(img, rng, scale=(0.75, 1.0), ratio=(0.85, 1.18)):
    H, W, _ = img.shape
    area = rng.uniform(*scale) * H * W
    aspect = np.exp(rng.uniform(np.log(ratio[0]), np.log(ratio[1])))
    h = int(min(H, max(1, round(np.sqrt(area / aspect)))))
    w = int(min(W, max(1, round(np.sqrt(area * aspect)))))
    top = rng.integers(0, H - h + 1)
    left = rng.integers(0, W - w + 1)
    # bilinear resample of the crop window back to H x W (pixel-center aligned)
    ys = top + (np.arange(H) + 0.5) * h / H - 0.5
    xs = left + (np.arange(W) + 0.5) * w / W - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    out = np.stack([ndimage.map_coordinates(img[..., ch], [yy, xx], order=1, mode="nearest")
                    for ch in range(3)], axis=-1)
    return out


def _color_jitter(img, rng, brightness=0.0, contrast=0.0, saturation=0.0, hue=0.0):
    out = img
    if brightness:
        out = out * rng.uniform(1 - brightness, 1 + brightness)
    if contrast:
        mean = out.mean()
        out = (out - mean) * rng.uniform(1 - contrast, 1 + contrast) + mean
    if saturation:
        gray = out.mean(axis=2, keepdims=True)
        out = (out - gray) * rng.uniform(1 - saturation, 1 + saturation) + gray
    if hue:
        # rotate chroma around the gray axis, an RGB-space hue shift
        theta = rng.uniform(-hue, hue) * 2 * np.pi
        cos, sin = np.cos(theta), np.sin(theta)
        k = 1 / 3
        sq = np.sqrt(k)
        rot = np.array([
            [cos + (1 - cos) * k, k * (1 - cos) - sq * sin, k * (1 - cos) + sq * sin],
            [k * (1 - cos) + sq * sin, cos + k * (1 - cos), k * (1 - cos) - sq * sin],
            [k * (1 - cos) - sq * sin, k * (1 - cos) + sq * sin, cos + k * (1 - cos)],
        ])
        out = out @ rot.T
    return np.clip(out, 0.0, 1.0)


def _cutout(img, rng, fraction=0.25, p=1.0):
    if rng.uniform() >= p:
        return img
    H, W, _ = img.shape
    h, w = max(1, int(round(H * fraction))), max(1, int(round(W * fraction)))
    top = rng.integers(0, H - h + 1)
    left = rng.integers(0, W - w + 1)
    out = img.copy()
    out[top:top + h, left:left + w] = 0.5
    return out


def apply_ops(img, ops, rng):
    out = np.asarray(img, dtype=np.float64)
    for spec in ops:
        kind = spec["op"]
        params = {k: v for k, v in spec.items() if k != "op"}
        if kind == "identity":
            continue
        if kind == "resized_crop":
            out = _resized_crop(out, rng, **params)
        elif kind == "hflip":
            if rng.uniform() < params.get("p", 0.5):
                out = out[:, ::-1]
        elif kind == "color_jitter":
            out = _color_jitter(out, rng, **params)
        elif kind == "cutout":
            out = _cutout(out, rng, **params)
    return np.ascontiguousarray(np.clip(out, 0.0, 1.0), dtype=np.float32)


def committee_views(x: ImageSample, policy: AugmentationPolicy, epoch: int) -> list:
    if x.image.ndim != 3 or x.image.shape[2] != 3:
        raise ShapeError(f"expected H x W x 3 image, got {x.image.shape}")
    return [apply_ops(x.image, policy.ops, policy.rng(x.id, epoch, j)) for j in range(policy.q)]


def committee_batch(samples: Sequence[ImageSample], policy: AugmentationPolicy, epoch: int) -> np.ndarray:
    """Views of many samples stacked as ``(n, q, H, W, 3)``."""
    return np.stack([np.stack(committee_views(s, policy, epoch)) for s in samples])


def datasets_from_config(config):
    """``(source, target)`` named by a run configuration; ``target`` may be ``None``."""
    data = config.data
    if data.source is not None:
        source = load_folder_dataset(data.source, SOURCE, data.image_size)
        target = load_folder_dataset(data.target, TARGET, data.image_size) if data.target else None
        if target is not None and target.class_names and target.class_names != source.class_names:
            raise DatasetError(f"target classes {target.class_names} differ from source {source.class_names}")
        if target is not None:
            target.class_names = list(source.class_names)
        return source, target
    return generate_synthetic_pair(data.synthetic)
