"""AugMix-style view generation for a single test image.

Each view is a random resized crop plus optional horizontal flip, followed by
an AugMix blend: ``width`` chains of 1..``depth`` randomly chosen operations
are mixed with Dirichlet weights and then blended with the crop through a
Beta-distributed factor.  Randomness comes only from the ``seed`` argument.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np
import torch
import torchvision.transforms.v2.functional as TF

from .errors import ConfigurationError, InputError

DEFAULT_OPS = (
    "autocontrast",
    "equalize",
    "posterize",
    "rotate",
    "solarize",
    "shear_x",
    "shear_y",
    "translate_x",
    "translate_y",
)


@dataclass(frozen=True)
class AugmentConfig:
    n_views: int = 63
    crop_scale: tuple[float, float] = (0.08, 1.0)
    crop_ratio: tuple[float, float] = (3 / 4, 4 / 3)
    flip_prob: float = 0.5
    mixture_width: int = 3
    mixture_depth: tuple[int, int] = (1, 3)
    severity: int = 3
    operations: tuple[str, ...] = DEFAULT_OPS

    def validate(self):
        if self.n_views < 0:
            raise ConfigurationError(f"n_views must be >= 0, got {self.n_views}")
        lo, hi = self.crop_scale
        if not 0 < lo <= hi <= 1:
            raise ConfigurationError(f"crop_scale must satisfy 0 < lo <= hi <= 1, got {self.crop_scale}")
        if self.mixture_width < 0 or not 1 <= self.mixture_depth[0] <= self.mixture_depth[1]:
            raise ConfigurationError("invalid mixture width/depth")
        unknown = set(self.operations) - set(OPERATIONS)
        if unknown:
            raise ConfigurationError(f"unknown augmentation operations {sorted(unknown)}")

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> AugmentConfig:
        d = dict(d)
        for key in ("crop_scale", "crop_ratio", "mixture_depth", "operations"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class ViewBatch:
    views: torch.Tensor  # (N + 1, C, H, W); index 0 is the untouched input
    seed: int
    source_id: Any = None

    def __len__(self):
        return self.views.shape[0]

    @property
    def original(self) -> torch.Tensor:
        return self.views[0]


# -- primitive operations, AugMix level conventions ----------------------------


def _level(rng: np.random.Generator, severity: int) -> float:
    return rng.uniform(0.1, severity)


def _int_param(level: float, maxval: float) -> int:
    return int(level * maxval / 10)


def _float_param(level: float, maxval: float) -> float:
    return float(level) * maxval / 10.0


def _signed(rng: np.random.Generator, v: float) -> float:
    return -v if rng.uniform() > 0.5 else v


def _as_uint8(img: torch.Tensor) -> torch.Tensor:
    return (img * 255).round().clamp(0, 255).to(torch.uint8)


def _from_uint8(img: torch.Tensor, dtype) -> torch.Tensor:
    return img.to(dtype) / 255.0


def _autocontrast(img, rng, severity):
    return TF.autocontrast(img)


def _equalize(img, rng, severity):
    return _from_uint8(TF.equalize(_as_uint8(img)), img.dtype)


def _posterize(img, rng, severity):
    bits = 4 - _int_param(_level(rng, severity), 4)
    return _from_uint8(TF.posterize(_as_uint8(img), max(bits, 1)), img.dtype)


def _solarize(img, rng, severity):
    threshold = 256 - _int_param(_level(rng, severity), 256)
    return TF.solarize(img, threshold / 256.0)


def _affine(img, angle=0.0, translate=(0, 0), shear=(0.0, 0.0)):
    return TF.affine(img, angle=angle, translate=list(translate), scale=1.0, shear=list(shear))


def _rotate(img, rng, severity):
    deg = _signed(rng, _int_param(_level(rng, severity), 30))
    return _affine(img, angle=float(deg))


def _shear_x(img, rng, severity):
    s = _signed(rng, _float_param(_level(rng, severity), 0.3))
    return _affine(img, shear=(math.degrees(math.atan(s)), 0.0))


def _shear_y(img, rng, severity):
    s = _signed(rng, _float_param(_level(rng, severity), 0.3))
    return _affine(img, shear=(0.0, math.degrees(math.atan(s))))


def _translate_x(img, rng, severity):
    t = _signed(rng, _int_param(_level(rng, severity), img.shape[-1] / 3))
    return _affine(img, translate=(int(t), 0))


def _translate_y(img, rng, severity):
    t = _signed(rng, _int_param(_level(rng, severity), img.shape[-2] / 3))
    return _affine(img, translate=(0, int(t)))


OPERATIONS: dict[str, Callable] = {
    "autocontrast": _autocontrast,
    "equalize": _equalize,
    "posterize": _posterize,
    "rotate": _rotate,
    "solarize": _solarize,
    "shear_x": _shear_x,
    "shear_y": _shear_y,
    "translate_x": _translate_x,
    "translate_y": _translate_y,
}


def _crop_box(rng: np.random.Generator, h: int, w: int, scale, ratio) -> tuple[int, int, int, int]:
    # same sampling scheme as torchvision's RandomResizedCrop, driven by our rng
    area = h * w
    log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(10):
        target = area * rng.uniform(*scale)
        aspect = math.exp(rng.uniform(*log_ratio))
        cw = int(round(math.sqrt(target * aspect)))
        ch = int(round(math.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    in_ratio = w / h
    if in_ratio < min(ratio):
        cw, ch = w, int(round(w / min(ratio)))
    elif in_ratio > max(ratio):
        ch, cw = h, int(round(h * max(ratio)))
    else:
        cw, ch = w, h
    return (h - ch) // 2, (w - cw) // 2, ch, cw


def augment_one(image: torch.Tensor, cfg: AugmentConfig, rng: np.random.Generator) -> torch.Tensor:
    _, h, w = image.shape
    top, left, ch, cw = _crop_box(rng, h, w, cfg.crop_scale, cfg.crop_ratio)
    base = TF.resized_crop(image, top, left, ch, cw, [h, w], antialias=True)
    if rng.uniform() < cfg.flip_prob:
        base = TF.horizontal_flip(base)
    base = base.clamp(0, 1)
    if cfg.mixture_width == 0 or not cfg.operations:
        return base
    weights = rng.dirichlet([1.0] * cfg.mixture_width)
    m = rng.beta(1.0, 1.0)
    mix = torch.zeros_like(base)
    for i in range(cfg.mixture_width):
        x = base
        for _ in range(int(rng.integers(cfg.mixture_depth[0], cfg.mixture_depth[1] + 1))):
            op = cfg.operations[int(rng.integers(len(cfg.operations)))]
            x = OPERATIONS[op](x, rng, cfg.severity).clamp(0, 1)
        mix = mix + weights[i] * x
    return (m * base + (1 - m) * mix).clamp(0, 1)


def augment_views(image, cfg: AugmentConfig = AugmentConfig(), seed: int = 0, source_id=None) -> ViewBatch:
    """Stack the original image with ``cfg.n_views`` augmented views.

    Deterministic in ``(image, cfg, seed)``; no global random state is used.
    """
    cfg.validate()
    image = torch.as_tensor(image)
    if not torch.is_floating_point(image):
        raise InputError("images must be floating point tensors in [0, 1]")
    if image.ndim != 3:
        raise InputError(f"expected a (C, H, W) image, got shape {tuple(image.shape)}")
    if image.min() < 0 or image.max() > 1:
        raise InputError("pixels must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    views = [image.clone()]
    views.extend(augment_one(image, cfg, rng) for _ in range(cfg.n_views))
    return ViewBatch(torch.stack(views), seed, source_id)


def identity_config(n_views: int) -> AugmentConfig:
    """Views that are exact copies of the input; handy for degenerate checks."""
    return AugmentConfig(n_views=n_views, crop_scale=(1.0, 1.0), crop_ratio=(1.0, 1.0),
                         flip_prob=0.0, mixture_width=0)


def sample_seed(global_seed: int, sample_id) -> int:
    """Per-sample seed keyed by identity, so processing order never matters."""
    if isinstance(sample_id, (int, np.integer)):
        key = int(sample_id)
    else:
        key = zlib.crc32(str(sample_id).encode())
    return (int(global_seed) ^ key) & 0xFFFFFFFF
