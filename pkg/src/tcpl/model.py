"""Hierarchical prototype network: backbone, max-pool pyramid, prototype layer, linear head.

Tensors follow the torch layout: images ``(B, 3, H, W)``, feature maps
``(B, D, H, W)``. Grids are enumerated level by level, row-major within a
level; every argmax/argmin resolves ties to the first index in that order.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .exceptions import ConfigError, ShapeError

DTYPES = {"float32": torch.float32, "float64": torch.float64}


class Backbone(nn.Module):
    """Stride-2 conv stages followed by 1x1 channel-adjust layers.

    With three stages a 64x64 image yields an 8x8 map. The last 1x1 layer is
    linear so prototype inner products can take either sign.
    """

    def __init__(self, channels=(16, 32, 64), feature_dim=64):
        super().__init__()
        layers, cin = [], 3
        for cout in channels:
            layers += [nn.Conv2d(cin, cout, 3, stride=2, padding=1), nn.ReLU()]
            cin = cout
        self.stages = nn.Sequential(*layers)
        self.add_on = nn.Sequential(
            nn.Conv2d(cin, feature_dim, 1), nn.ReLU(),
            nn.Conv2d(feature_dim, feature_dim, 1),
        )
        self.feature_dim = feature_dim

    def output_size(self, size):
        for _ in range(len(self.stages) // 2):
            size = (size + 1) // 2
        return size

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected (B, 3, H, W) images, got {tuple(x.shape)}")
        return self.add_on(self.stages(x))


@dataclass
class FeaturePyramid:
    levels: list
    pool_sizes: tuple
    image_size: tuple

    @property
    def depth(self):
        return self.levels[0].shape[1]

    @property
    def level_shapes(self):
        return [tuple(lv.shape[2:]) for lv in self.levels]

    @property
    def n_grids(self):
        return sum(h * w for h, w in self.level_shapes)

    def flatten(self):
        """All grids as ``(B, G, D)`` in canonical order."""
        return torch.cat([lv.flatten(2).transpose(1, 2) for lv in self.levels], dim=1)

    def coords(self):
        return [(n, r, c) for n, (h, w) in enumerate(self.level_shapes)
                for r in range(h) for c in range(w)]

    def grid_index(self, level, row, col):
        offset = sum(h * w for h, w in self.level_shapes[:level])
        return offset + row * self.level_shapes[level][1] + col

    def level_slice(self, level):
        start = self.grid_index(level, 0, 0)
        h, w = self.level_shapes[level]
        return slice(start, start + h * w)

    def at(self, level, row, col, index=0):
        return self.levels[level][index, :, row, col]


def build_pyramid(feature_map, pool_sizes, image_size=None) -> FeaturePyramid:
    """Stride-1, valid max pooling with each window size in ``pool_sizes``."""
    if feature_map.dim() == 3:
        feature_map = feature_map.unsqueeze(0)
    H, W = feature_map.shape[2:]
    for k in pool_sizes:
        if not 1 <= k <= min(H, W):
            raise ConfigError("pool_sizes", f"pool size {k} does not fit a {H}x{W} feature map")
    levels = [feature_map if k == 1 else F.max_pool2d(feature_map, int(k), stride=1)
              for k in pool_sizes]
    return FeaturePyramid(levels, tuple(int(k) for k in pool_sizes), image_size)


def grids(pyramid: FeaturePyramid, index=0):
    """``(vector, level, row, col)`` for every grid of image ``index``."""
    return [(pyramid.at(n, r, c, index), n, r, c) for n, r, c in pyramid.coords()]


def prototype_similarities(pyramid: FeaturePyramid, prototypes):
    """Raw inner products of every grid with every prototype, globally max-pooled.

    Returns ``(f, argmax, sims)`` with shapes ``(B, P)``, ``(B, P)``, ``(B, P, G)``.
    """
    if prototypes.shape[1] != pyramid.depth:
        raise ShapeError(f"prototype depth {prototypes.shape[1]} != feature depth {pyramid.depth}")
    b = pyramid.flatten()
    sims = torch.einsum("bgd,pd->bpg", b, prototypes)
    f, argmax = sims.max(dim=2)
    return f, argmax, sims


def head_forward(f, weights):
    if f.shape[-1] != weights.shape[1]:
        raise ShapeError(f"similarity length {f.shape[-1]} != head input {weights.shape[1]}")
    return f @ weights.t()


def predict_from_logits(logits):
    return logits.argmax(dim=-1)


def initial_head(n_classes, per_class, own=1.0, other=-0.5):
    """Own-class entries ``own``, everything else ``other`` (block layout)."""
    P = n_classes * per_class
    w = np.full((n_classes, P), other)
    for c in range(n_classes):
        w[c, c * per_class:(c + 1) * per_class] = own
    return w


@dataclass
class ModelOutput:
    f: torch.Tensor
    logits: torch.Tensor
    argmax: torch.Tensor
    pyramid: FeaturePyramid
    sims: Optional[torch.Tensor] = None

    def argmax_grid(self, index=0):
        """Per-prototype ``(level, row, col)`` of the maximizing grid."""
        coords = self.pyramid.coords()
        return [coords[g] for g in self.argmax[index].tolist()]

    @property
    def prediction(self):
        return predict_from_logits(self.logits)

    @property
    def probabilities(self):
        return torch.softmax(self.logits, dim=-1)


class PrototypeNetwork(nn.Module):
    """Backbone + pyramid + ``C * M`` unit-norm prototypes + bias-free head.

    Prototype ``j`` belongs to class ``j // M``. ``provenance[j]`` is filled
    when the prototype is projected onto a training patch.
    """

    def __init__(self, n_classes, n_per_class=3, feature_dim=64, pool_sizes=(1, 2, 3),
                 channels=(16, 32, 64)):
        super().__init__()
        self.n_classes = int(n_classes)
        self.n_per_class = int(n_per_class)
        self.pool_sizes = tuple(int(k) for k in pool_sizes)
        self.backbone = Backbone(tuple(channels), feature_dim)
        P = self.n_classes * self.n_per_class
        self.prototypes = nn.Parameter(torch.randn(P, feature_dim))
        self.head = nn.Parameter(torch.as_tensor(initial_head(self.n_classes, self.n_per_class),
                                                 dtype=torch.float32))
        self.provenance = [None] * P
        with torch.no_grad():
            self.normalize_prototypes_()

    @property
    def n_prototypes(self):
        return self.n_classes * self.n_per_class

    @property
    def dtype(self):
        return self.prototypes.dtype

    def class_of(self, j):
        return j // self.n_per_class

    def class_block(self, c, multiplier=None):
        m = self.n_per_class if multiplier is None else multiplier
        return range(c * m, (c + 1) * m)

    def own_mask(self, labels):
        """``(B, P)`` boolean mask of prototypes owned by each label."""
        owner = torch.arange(self.n_prototypes, device=labels.device) // self.n_per_class
        return owner.unsqueeze(0) == labels.unsqueeze(1)

    def off_class_mask(self):
        owner = torch.arange(self.n_prototypes) // self.n_per_class
        return owner.unsqueeze(0) != torch.arange(self.n_classes).unsqueeze(1)

    @torch.no_grad()
    def normalize_prototypes_(self):
        self.prototypes.div_(self.prototypes.norm(dim=1, keepdim=True).clamp_min(1e-12))

    def to_input(self, images):
        """NHWC numpy images (or a single HWC image) to an NCHW tensor."""
        if isinstance(images, torch.Tensor):
            x = images.to(self.dtype)
        else:
            x = torch.as_tensor(np.asarray(images), dtype=self.dtype)
            if x.dim() == 3:
                x = x.unsqueeze(0)
            if x.dim() != 4 or x.shape[-1] != 3:
                raise ShapeError(f"expected (N, H, W, 3) images, got {tuple(x.shape)}")
            x = x.permute(0, 3, 1, 2)
        return x.contiguous()

    def pyramid(self, x):
        return build_pyramid(self.backbone(x), self.pool_sizes, tuple(x.shape[2:]))

    def forward(self, x) -> ModelOutput:
        x = self.to_input(x)
        pyr = self.pyramid(x)
        f, argmax, sims = prototype_similarities(pyr, self.prototypes)
        logits = head_forward(f, self.head)
        return ModelOutput(f, logits, argmax, pyr, sims)

    @torch.no_grad()
    def predict_batches(self, images, batch_size=256):
        """Eval-mode ``(f, logits)`` for many images, as numpy arrays."""
        fs, ls = [], []
        for start in range(0, len(images), batch_size):
            out = self(images[start:start + batch_size])
            fs.append(out.f.cpu().numpy())
            ls.append(out.logits.cpu().numpy())
        P = self.n_prototypes
        if not fs:
            return np.zeros((0, P)), np.zeros((0, self.n_classes))
        return np.concatenate(fs), np.concatenate(ls)


def build_model(config, n_classes) -> PrototypeNetwork:
    """Seeded construction: backbone and prototypes random, head at its fixed init."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(config.seed))
        model = PrototypeNetwork(n_classes, config.M, config.D, config.pool_sizes,
                                 config.backbone_channels)
    model = model.to(DTYPES[config.dtype])
    model.normalize_prototypes_()
    return model
