"""Encoder-backend contract and the cosine-similarity zero-shot classifier.

Features and predictions travel as plain ``torch`` tensors: a batch of image
features is an ``(n, d)`` tensor with unit rows, a batch of predictions is an
``(n, C)`` tensor whose rows are probability vectors.
"""

from __future__ import annotations

import abc
import os
import re
from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch

from .errors import ConfigurationError, InputError

DEFAULT_TEMPLATE = "a photo of a"
DEFAULT_TEMPERATURE = 0.01
NORM_TOL = 1e-6

CHECKPOINT_ENV = "RTPT_CHECKPOINT_ROOT"


@dataclass
class PromptContext:
    """Learnable context-token embeddings prepended to every class name."""

    tokens: torch.Tensor
    init_template: str = DEFAULT_TEMPLATE
    trainable: bool = True

    def __post_init__(self):
        if self.tokens.ndim != 2 or self.tokens.shape[0] < 1:
            raise ConfigurationError(
                f"prompt tokens must have shape (M >= 1, dim), got {tuple(self.tokens.shape)}"
            )

    @property
    def length(self) -> int:
        return self.tokens.shape[0]

    def fresh_copy(self) -> PromptContext:
        tokens = self.tokens.detach().clone()
        if self.trainable:
            tokens.requires_grad_(True)
        return PromptContext(tokens, self.init_template, self.trainable)


@dataclass
class ClassHead:
    class_names: list[str]
    text_features: torch.Tensor
    temperature: float = DEFAULT_TEMPERATURE

    def __post_init__(self):
        if len(self.class_names) < 2:
            raise InputError("a classification head needs at least two classes")
        if self.text_features.shape[0] != len(self.class_names):
            raise ConfigurationError("one text feature per class name is required")
        _check_temperature(self.temperature)
        norms = self.text_features.detach().norm(dim=-1)
        if torch.any((norms - 1).abs() > NORM_TOL):
            raise InputError("text features must be unit-normalized")

    @property
    def n_classes(self) -> int:
        return len(self.class_names)


class EncoderBackend(abc.ABC):
    """Image tower F and prompt-conditioned text tower G.

    Subclasses implement the raw (unnormalized) encoders; normalization,
    validation and classification live in the module-level functions so
    every backend behaves the same way downstream.
    """

    name: str = "abstract"
    image_dim: int
    text_dim: int
    input_shape: tuple[int, int, int]
    grad_wrt_prompt = True
    grad_wrt_pixels = True
    dtype = torch.float64

    @abc.abstractmethod
    def image_features(self, images: torch.Tensor) -> torch.Tensor:
        """Map ``(B, C, H, W)`` pixels in [0, 1] to ``(B, image_dim)`` features."""

    @abc.abstractmethod
    def text_features(self, tokens: torch.Tensor, class_names: Sequence[str]) -> torch.Tensor:
        """Map context tokens ``(M, text_dim)`` plus class names to ``(C, image_dim)``."""

    @abc.abstractmethod
    def embed_words(self, text: str) -> torch.Tensor:
        """Token embeddings ``(M, text_dim)`` for a whitespace-separated phrase."""

    @property
    def identifier(self) -> str:
        return self.name

    def prompt_from_template(
        self, template: str = DEFAULT_TEMPLATE, n_ctx: int | None = None, trainable: bool = True
    ) -> PromptContext:
        """Initialize a prompt context from a text template.

        A class-name placeholder ``[]`` and trailing punctuation are dropped,
        so ``"a photo of a []"`` and ``"a photo of a"`` give the same context.
        """
        words = template_words(template)
        if not words:
            raise ConfigurationError(f"template {template!r} contains no context words")
        if n_ctx is not None and n_ctx != len(words):
            raise ConfigurationError(
                f"context length {n_ctx} does not match the {len(words)} words of {template!r}"
            )
        tokens = self.embed_words(" ".join(words)).detach().clone()
        tokens.requires_grad_(trainable)
        return PromptContext(tokens, " ".join(words), trainable)


def template_words(template: str) -> list[str]:
    text = template.replace("[]", " ").replace("{}", " ")
    text = re.sub(r"[.,;:!?]+\s*$", "", text.strip())
    return text.split()


def _check_temperature(temperature: float):
    if not temperature > 0:
        raise ConfigurationError(f"temperature must be positive, got {temperature}")


def build_class_head(
    backend: EncoderBackend,
    prompt: PromptContext,
    class_names: Sequence[str],
    temperature: float = DEFAULT_TEMPERATURE,
) -> ClassHead:
    """Text features ``G(prompt + class name)`` for every class, unit-normalized.

    Differentiable with respect to ``prompt.tokens`` when they require grad.
    """
    class_names = list(class_names)
    if not class_names:
        raise InputError("class_names is empty")
    if prompt.tokens.ndim != 2 or prompt.tokens.shape[1] != backend.text_dim:
        raise ConfigurationError(
            f"prompt token width {tuple(prompt.tokens.shape)} does not match "
            f"backend text_dim {backend.text_dim}"
        )
    raw = backend.text_features(prompt.tokens, class_names)
    return ClassHead(class_names, _unit(raw), temperature)


def encode_image(backend: EncoderBackend, image: torch.Tensor) -> torch.Tensor:
    """Unit-normalized image features; a single ``(C, H, W)`` image gives ``(d,)``."""
    image = torch.as_tensor(image, dtype=backend.dtype)
    single = image.ndim == 3
    batch = image.unsqueeze(0) if single else image
    if batch.ndim != 4 or tuple(batch.shape[1:]) != tuple(backend.input_shape):
        raise InputError(
            f"expected image shape {tuple(backend.input_shape)}, got {tuple(image.shape)}"
        )
    lo, hi = batch.detach().min(), batch.detach().max()
    if lo < 0 or hi > 1:
        raise InputError(f"pixels must lie in [0, 1], got range [{lo:.4g}, {hi:.4g}]")
    feats = _unit(backend.image_features(batch))
    return feats[0] if single else feats


def similarity_softmax(similarities: torch.Tensor, temperature: float) -> torch.Tensor:
    _check_temperature(temperature)
    return torch.softmax(similarities / temperature, dim=-1)


def logits(features: torch.Tensor, head: ClassHead) -> torch.Tensor:
    """Temperature-scaled cosine similarities, the pre-softmax class scores."""
    _check_temperature(head.temperature)
    return features @ head.text_features.T / head.temperature


def classify(features: torch.Tensor, head: ClassHead) -> torch.Tensor:
    """Class probabilities ``softmax(cos(f, g_c) / tau)`` for one or many features."""
    norms = features.detach().norm(dim=-1)
    if torch.any((norms - 1).abs() > NORM_TOL):
        raise InputError("image features must be unit-normalized before classification")
    return similarity_softmax(features @ head.text_features.T, head.temperature)


def _unit(x: torch.Tensor) -> torch.Tensor:
    return x / x.norm(dim=-1, keepdim=True)


# -- backend registry ---------------------------------------------------------

_REGISTRY: dict[str, Callable[..., EncoderBackend]] = {}


def register_backend(name: str):
    def decorator(factory):
        _REGISTRY[name] = factory
        return factory

    return decorator


def available_backends() -> list[str]:
    _ensure_builtin_backends()
    return sorted(_REGISTRY)


def load_backend(name: str, **kwargs) -> EncoderBackend:
    """Instantiate a registered backend (``"toy"``, ``"clip-rn50"``, ``"clip-vit-b16"``)."""
    _ensure_builtin_backends()
    try:
        factory = _REGISTRY[name]
    except KeyError:
        raise ConfigurationError(
            f"unknown backend {name!r}; choose from {sorted(_REGISTRY)}"
        ) from None
    return factory(**kwargs)


def checkpoint_root(explicit: str | os.PathLike | None = None) -> str | None:
    if explicit is not None:
        return os.fspath(explicit)
    return os.environ.get(CHECKPOINT_ENV)


def _ensure_builtin_backends():
    # registration happens on import of these modules
    from . import clip_adapter, toy  # noqa: F401
