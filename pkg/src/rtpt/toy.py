"""A small, fully differentiable stand-in for a contrastive image-text model.

The toy world is a family of striped color textures, one prototype per class.
The toy image tower has two branches:

* a *semantic* branch built from pooled, scale-free statistics (channel
  means, signed stripe tint, mirror-symmetric orientation from the gradient
  structure tensor), which tolerates crops, flips and mild photometric changes;
* a *pixel-aligned* branch, a high-gain random projection of the high-pass
  residual of a block-pooled image.  It carries no class information but
  responds strongly to small perturbations that line up with its weights;
  that alignment mostly survives gentle resampling and is lost under
  zooming crops or mirroring.

The text tower maps the mean of the prompt-token embeddings and a per-class
name vector through ``tanh`` and an orthogonal matrix.  Name vectors for the
toy class names are solved in closed form so that the default template
reproduces the mean image feature of each class prototype.
"""

from __future__ import annotations

import functools
import hashlib
import zlib
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigurationError
from .model import DEFAULT_TEMPLATE, EncoderBackend, register_backend, template_words

WORLD_SEED = 20250611
MAX_TOY_CLASSES = 128
TOY_IMAGE_SHAPE = (3, 32, 32)
DEFAULT_NOISE = 1.0
PIXEL_NOISE = 0.05


@dataclass(frozen=True)
class TexturePrototype:
    color: tuple[float, float, float]
    tint: tuple[float, float, float]
    frequency: float  # cycles per image width
    orientation: float  # radians


def toy_class_name(k: int) -> str:
    return f"texture {k}"


def toy_class_names(n: int) -> list[str]:
    if not 2 <= n <= MAX_TOY_CLASSES:
        raise ConfigurationError(f"toy world supports 2..{MAX_TOY_CLASSES} classes, got {n}")
    return [toy_class_name(k) for k in range(n)]


def _folded_angle(theta: float) -> float:
    # mirror images (theta -> pi - theta) are indistinguishable to the toy encoder
    t = theta % np.pi
    return min(t, np.pi - t)


def _prototype_distance(a: TexturePrototype, b: TexturePrototype) -> float:
    # stripe frequency is not a class cue: crops rescale it arbitrarily
    dc = np.linalg.norm(np.subtract(a.color, b.color)) / 0.12
    # a tint and its negation differ only by a half-period phase shift
    dt = min(np.linalg.norm(np.subtract(a.tint, b.tint)), np.linalg.norm(np.add(a.tint, b.tint))) / 0.15
    do = abs(_folded_angle(a.orientation) - _folded_angle(b.orientation)) / 0.4
    return float(np.sqrt(dc**2 + dt**2 + do**2))


@functools.lru_cache(maxsize=None)
def texture_prototypes() -> tuple[TexturePrototype, ...]:
    """Class prototypes of the toy world, fixed for every backend and dataset."""
    rng = np.random.default_rng(WORLD_SEED)
    protos: list[TexturePrototype] = []
    min_sep = 2.0
    attempts = 0
    while len(protos) < MAX_TOY_CLASSES:
        cand = TexturePrototype(
            color=tuple(rng.uniform(0.25, 0.75, 3)),
            tint=tuple(rng.uniform(0.08, 0.22, 3) * rng.choice([-1.0, 1.0], 3)),
            frequency=float(np.exp(rng.uniform(np.log(3.0), np.log(8.0)))),
            orientation=float(rng.uniform(0, np.pi)),
        )
        attempts += 1
        if all(_prototype_distance(cand, p) >= min_sep for p in protos):
            protos.append(cand)
            attempts = 0
        elif attempts > 500:
            min_sep *= 0.95
            attempts = 0
    return tuple(protos)


def render_texture(
    k: int, rng: np.random.Generator, shape=TOY_IMAGE_SHAPE, noise: float = DEFAULT_NOISE
) -> np.ndarray:
    """One image of class ``k``; ``noise`` scales every per-sample perturbation."""
    p = texture_prototypes()[k]
    c, h, w = shape
    yy, xx = np.mgrid[0:h, 0:w] / float(w)
    color = np.asarray(p.color) + noise * 0.06 * rng.standard_normal(3)
    tint = np.asarray(p.tint) * np.exp(noise * 0.2 * rng.standard_normal())
    freq = p.frequency * np.exp(noise * 0.12 * rng.standard_normal())
    theta = p.orientation + noise * 0.15 * rng.standard_normal()
    phase = rng.uniform(0, 2 * np.pi)
    wave = np.cos(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    img = color[:, None, None] + tint[:, None, None] * wave
    img = img + noise * PIXEL_NOISE * rng.standard_normal((c, h, w))
    return np.clip(img, 0.0, 1.0)


@dataclass(frozen=True)
class ToyConfig:
    seed: int = 0
    input_shape: tuple[int, int, int] = TOY_IMAGE_SHAPE
    image_dim: int = 32
    text_dim: int = 16
    hidden: int = 32
    nonrobust_units: int = 32
    nonrobust_gain: float = 12.0
    nonrobust_mix: float = 0.35
    shared_offset: float = 2.0
    prompt_gain: float = 0.15
    word_scale: float = 0.02
    nonrobust_pool: int = 2


class ToyBackend(EncoderBackend):
    name = "toy"

    def __init__(self, config: ToyConfig = ToyConfig()):
        self.config = config
        self.input_shape = tuple(config.input_shape)
        self.image_dim = config.image_dim
        self.text_dim = config.text_dim
        c, h, w = self.input_shape
        if c != 3:
            raise ConfigurationError("the toy backend expects 3-channel images")
        d = config.image_dim
        rng = np.random.default_rng([WORLD_SEED, config.seed])

        def tensor(a):
            return torch.tensor(a, dtype=torch.float64)

        self.pixel_mean, self.pixel_std = 0.5, 0.25
        sobel = torch.tensor([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]], dtype=torch.float64) / 8
        self._sobel = torch.stack([sobel, sobel.T])[:, None]
        n_sem = 8
        hann = torch.hann_window(h + 2, periodic=False, dtype=torch.float64)[1:-1]
        hann_w = torch.hann_window(w + 2, periodic=False, dtype=torch.float64)[1:-1]
        window = torch.outer(hann, hann_w)
        self._window = window / window.sum()

        # shared direction both towers carry; it keeps cosines in a narrow band
        offset_dir = rng.standard_normal(d)
        self._offset_dir = tensor(offset_dir / np.linalg.norm(offset_dir))
        proj_out = torch.eye(d, dtype=torch.float64) - torch.outer(self._offset_dir, self._offset_dir)

        self._sem_in = tensor(rng.standard_normal((config.hidden, n_sem)) / np.sqrt(n_sem))
        self._sem_out = proj_out @ tensor(rng.standard_normal((d, config.hidden)) / np.sqrt(config.hidden))
        n_pix = c * (h // config.nonrobust_pool) * (w // config.nonrobust_pool)
        self._nr_in = tensor(
            rng.standard_normal((config.nonrobust_units, n_pix)) * config.nonrobust_gain / np.sqrt(n_pix)
        )
        self._nr_out = proj_out @ tensor(
            rng.standard_normal((d, config.nonrobust_units)) / np.sqrt(config.nonrobust_units)
        )
        self._sem_shift = torch.zeros(n_sem, dtype=torch.float64)
        self._sem_scale = torch.ones(n_sem, dtype=torch.float64)
        self._fit_standardizer(rng)

        self._prompt_proj = tensor(
            rng.standard_normal((d, config.text_dim))
            * config.prompt_gain / (config.word_scale * np.sqrt(config.text_dim))
        )
        q, _ = np.linalg.qr(rng.standard_normal((d, d)))
        self._text_out = tensor(q)
        self._word_cache: dict[str, torch.Tensor] = {}
        self._aligned_names = self._solve_name_vectors()

    # -- image tower ----------------------------------------------------------

    def _semantic_stats(self, z: torch.Tensor) -> torch.Tensor:
        # pooled under a centered window so borders (crop edges, affine fill) count little
        win = self._window

        def pool(t):
            return (t * win).sum((-1, -2))

        gray = z.mean(1, keepdim=True)
        g = F.conv2d(F.pad(gray, (1, 1, 1, 1), mode="replicate"), self._sobel)
        gx, gy = g[:, 0], g[:, 1]
        jxx, jyy, jxy = pool(gx * gx), pool(gy * gy), pool(gx * gy)
        total = jxx + jyy + 1e-4
        # mirroring flips the sign of jxy, so only its magnitude is kept
        orient = torch.stack([(jxx - jyy) / total, (4 * jxy.square() + 1e-6).sqrt() / total], dim=1)
        mean = pool(z)
        centered = z - mean[..., None, None]
        gc = centered.mean(1)
        gstd = (pool(gc.square()) + 1e-4).sqrt()
        tint = pool(centered * gc[:, None]) / gstd[:, None]
        return torch.cat([orient, mean, tint], dim=1)

    def _fit_standardizer(self, rng: np.random.Generator):
        imgs = [
            render_texture(k, rng, self.input_shape)
            for k in range(MAX_TOY_CLASSES)
            for _ in range(2)
        ]
        z = (torch.tensor(np.stack(imgs)) - self.pixel_mean) / self.pixel_std
        stats = self._semantic_stats(z)
        self._sem_shift = stats.mean(0)
        self._sem_scale = stats.std(0) + 1e-6

    def image_features(self, images: torch.Tensor) -> torch.Tensor:
        z = (images - self.pixel_mean) / self.pixel_std
        sem = (self._semantic_stats(z) - self._sem_shift) / self._sem_scale
        semantic = torch.tanh(sem @ self._sem_in.T) @ self._sem_out.T
        # coarse grid: the branch sees 2x2 blocks, so only mild resampling keeps its alignment
        z = F.avg_pool2d(z, self.config.nonrobust_pool)
        z = z - F.avg_pool2d(z, 3, stride=1, padding=1, count_include_pad=False)
        aligned = torch.tanh(z.flatten(1) @ self._nr_in.T) @ self._nr_out.T
        variable = semantic + self.config.nonrobust_mix * aligned
        return variable + self.config.shared_offset * self._offset_dir

    # -- text tower -----------------------------------------------------------

    def embed_words(self, text: str) -> torch.Tensor:
        return torch.stack([self._word(w) for w in text.split()])

    def _word(self, word: str) -> torch.Tensor:
        if word not in self._word_cache:
            rng = np.random.default_rng([WORLD_SEED, self.config.seed, zlib.crc32(word.encode())])
            self._word_cache[word] = torch.tensor(self.config.word_scale * rng.standard_normal(self.text_dim))
        return self._word_cache[word]

    def _name_vector(self, name: str) -> torch.Tensor:
        if name in self._aligned_names:
            return self._aligned_names[name]
        rng = np.random.default_rng([WORLD_SEED, self.config.seed, 7, zlib.crc32(name.encode())])
        return torch.tensor(0.3 * rng.standard_normal(self.image_dim))

    def text_features(self, tokens: torch.Tensor, class_names: Sequence[str]) -> torch.Tensor:
        m = tokens.mean(0)
        context = m @ self._prompt_proj.T
        names = torch.stack([self._name_vector(n) for n in class_names])
        variable = torch.tanh(names + context) @ self._text_out.T
        return variable + self.config.shared_offset * self._offset_dir

    def _solve_name_vectors(self) -> dict[str, torch.Tensor]:
        rng = np.random.default_rng([WORLD_SEED, self.config.seed, 3])
        targets = []
        with torch.no_grad():
            for k in range(MAX_TOY_CLASSES):
                imgs = np.stack(
                    [render_texture(k, rng, self.input_shape, noise=0.0) for _ in range(8)]
                )
                feats = self.image_features(torch.tensor(imgs))
                feats = feats / feats.norm(dim=-1, keepdim=True)
                # keep the class-specific part; the shared offset is added back by the text tower
                var = feats.mean(0)
                var = var - (var @ self._offset_dir) * self._offset_dir
                targets.append(var / var.norm())
            targets = torch.stack(targets)
            coords = targets @ self._text_out  # inverse of an orthogonal map
            scale = 0.8 / coords.abs().max()
            template = self.embed_words(" ".join(template_words(DEFAULT_TEMPLATE)))
            m = template.mean(0)
            context = m @ self._prompt_proj.T
            names = torch.atanh(scale * coords) - context
        return {toy_class_name(k): names[k] for k in range(MAX_TOY_CLASSES)}

    def parameters_dict(self) -> dict[str, torch.Tensor]:
        """Every fixed weight tensor of the backend, by name."""
        return {k: v for k, v in sorted(vars(self).items()) if isinstance(v, torch.Tensor)}

    @property
    def identifier(self) -> str:
        blob = repr(sorted(asdict(self.config).items())).encode()
        return f"toy-{hashlib.sha256(blob).hexdigest()[:12]}"


@register_backend("toy")
def make_toy_backend(seed: int = 0, **overrides) -> ToyBackend:
    """Deterministic toy backend; identical ``seed`` and overrides give identical weights."""
    if "input_shape" in overrides:
        overrides["input_shape"] = tuple(overrides["input_shape"])
    return ToyBackend(ToyConfig(seed=seed, **overrides))
