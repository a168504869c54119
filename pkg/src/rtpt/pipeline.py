"""Per-sample inference: zero-shot, uniform ensemble, TPT, R-TPT and ablations.

Every call starts from a fresh copy of the template prompt, so outcomes depend
only on ``(backend, class names, image, config, seed)`` and never on which
samples were processed before.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from dataclasses import dataclass, field
from typing import Any, Sequence

import torch

from .augment import AugmentConfig, ViewBatch, augment_views
from .errors import ConfigurationError, InputError
from .model import (
    DEFAULT_TEMPERATURE,
    DEFAULT_TEMPLATE,
    ClassHead,
    EncoderBackend,
    PromptContext,
    build_class_head,
    classify,
    encode_image,
)
from .objectives import marginal_entropy, pointwise_entropy, select_low_entropy
from .reliability import ensemble_weights, reliability_scores, similarity_matrix, weighted_ensemble

METHODS = ("zeroshot", "ensemble", "tpt", "rtpt", "ablation")
OBJECTIVES = ("pointwise", "marginal")
OPTIMIZERS = ("adam", "adamw")

# (use_ensemble, use_weighted, use_entmin) in the order of the ablation table
ABLATION_ROWS = (
    (False, False, False),
    (False, False, True),
    (True, False, False),
    (True, False, True),
    (True, True, False),
    (True, True, True),
)


def ablation_label(flags) -> str:
    return "".join("✓" if f else "✗" for f in flags)


@dataclass(frozen=True)
class MethodConfig:
    method: str = "rtpt"
    use_ensemble: bool = True
    use_weighted: bool = True
    use_entmin: bool = True
    objective: str = "pointwise"
    optimizer: str = "adam"
    lr: float = 0.005
    weight_decay: float = 0.0
    steps: int = 1
    rho: float = 0.1
    k: int = 20
    weight_temperature: float = 0.01
    template: str = DEFAULT_TEMPLATE
    temperature: float = DEFAULT_TEMPERATURE
    augment: AugmentConfig = AugmentConfig()

    @property
    def flags(self) -> tuple[bool, bool, bool]:
        return (self.use_ensemble, self.use_weighted, self.use_entmin)

    @property
    def n_views(self) -> int:
        return self.augment.n_views

    @property
    def name(self) -> str:
        if self.method == "ablation":
            return f"ablation-{ablation_label(self.flags)}"
        return self.method

    def validate(self) -> MethodConfig:
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.use_weighted and not self.use_ensemble:
            raise ConfigurationError("weighted ensembling requires use_ensemble")
        if self.objective not in OBJECTIVES:
            raise ConfigurationError(f"unknown objective {self.objective!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")
        if self.lr < 0 or self.weight_decay < 0 or self.steps < 0:
            raise ConfigurationError("lr, weight_decay and steps must be nonnegative")
        if self.k < 1:
            raise ConfigurationError(f"neighbour count must be >= 1, got {self.k}")
        if not 0 < self.rho <= 1:
            raise ConfigurationError(f"rho must be in (0, 1], got {self.rho}")
        if not self.weight_temperature > 0:
            raise ConfigurationError("weight temperature must be positive")
        self.augment.validate()
        return self

    def replace(self, **changes) -> MethodConfig:
        return dataclasses.replace(self, **changes)

    def with_views(self, n_views: int) -> MethodConfig:
        return self.replace(augment=dataclasses.replace(self.augment, n_views=n_views))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> MethodConfig:
        d = dict(d)
        if "n_views" in d:
            aug = dict(d.get("augment") or {})
            aug["n_views"] = d.pop("n_views")
            d["augment"] = aug
        if isinstance(d.get("augment"), dict):
            d["augment"] = AugmentConfig.from_dict(d["augment"])
        flags = d.pop("flags", None)
        if flags is not None:
            d["use_ensemble"], d["use_weighted"], d["use_entmin"] = (bool(f) for f in flags)
        return cls(**d).validate()

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def method_preset(name: str, **overrides) -> MethodConfig:
    """Named configurations; ``ablation-✓✗✓`` style names pick ablation rows."""
    if name == "zeroshot":
        cfg = MethodConfig("zeroshot", False, False, False)
    elif name == "ensemble":
        cfg = MethodConfig("ensemble", True, False, False)
    elif name == "tpt":
        cfg = MethodConfig("tpt", False, False, True, objective="marginal")
    elif name == "rtpt":
        cfg = MethodConfig("rtpt", True, True, True)
    elif name.startswith("ablation-"):
        code = name[len("ablation-"):]
        table = {"✓": True, "✗": False, "1": True, "0": False, "y": True, "n": False}
        if len(code) != 3 or any(c not in table for c in code):
            raise ConfigurationError(f"bad ablation code {code!r}; use three of ✓/✗ or 1/0")
        e, w, t = (table[c] for c in code)
        cfg = MethodConfig("ablation", e, w, t)
    else:
        raise ConfigurationError(f"unknown method preset {name!r}")
    return cfg.replace(**overrides).validate()


def ablation_presets(**overrides) -> list[MethodConfig]:
    return [method_preset("ablation-" + ablation_label(f), **overrides) for f in ABLATION_ROWS]


@dataclass
class InferenceOutcome:
    sample_id: Any
    method: str
    predicted_class: int
    prediction: torch.Tensor
    weights: torch.Tensor | None = None
    objective_trace: list[float] = field(default_factory=list)
    selected: list[int] | None = None
    wall_time: float = 0.0


@dataclass
class InitialState:
    """Template prompt and its zero-shot head, shared read-only across samples."""

    prompt: PromptContext
    head: ClassHead


def initial_state(backend: EncoderBackend, class_names: Sequence[str], cfg: MethodConfig) -> InitialState:
    prompt = backend.prompt_from_template(cfg.template, trainable=True)
    with torch.no_grad():
        head = build_class_head(backend, prompt, class_names, cfg.temperature)
    return InitialState(prompt, head)


def make_views(image: torch.Tensor, cfg: MethodConfig, seed: int, sample_id=None) -> ViewBatch:
    return augment_views(image, cfg.augment, seed=seed, source_id=sample_id)


def _tuning_loss(preds: torch.Tensor, objective: str) -> torch.Tensor:
    if objective == "pointwise":
        return pointwise_entropy(preds)
    return marginal_entropy(preds).total


def tune_prompt(
    backend: EncoderBackend,
    class_names: Sequence[str],
    features: torch.Tensor,
    initial_predictions: torch.Tensor,
    init: InitialState,
    cfg: MethodConfig,
) -> tuple[PromptContext, list[float], list[int]]:
    """Entropy minimization over the confident views.

    Returns the tuned prompt, the objective on the selected views before and
    after each step, and the selected view indices.
    """
    batch = select_low_entropy(initial_predictions, cfg.rho)
    chosen = features[batch.indices]
    prompt = init.prompt.fresh_copy()
    opt_cls = torch.optim.Adam if cfg.optimizer == "adam" else torch.optim.AdamW
    opt = opt_cls([prompt.tokens], lr=cfg.lr, weight_decay=cfg.weight_decay)
    trace = []
    for _ in range(cfg.steps):
        head = build_class_head(backend, prompt, class_names, cfg.temperature)
        loss = _tuning_loss(classify(chosen, head), cfg.objective)
        trace.append(float(loss.detach()))
        opt.zero_grad()
        loss.backward()
        opt.step()
    with torch.no_grad():
        head = build_class_head(backend, prompt, class_names, cfg.temperature)
        trace.append(float(_tuning_loss(classify(chosen, head), cfg.objective)))
    return prompt, trace, batch.indices.tolist()


def infer(
    backend: EncoderBackend,
    class_names: Sequence[str],
    image: torch.Tensor | None,
    cfg: MethodConfig,
    seed: int = 0,
    sample_id=None,
    views: ViewBatch | torch.Tensor | None = None,
    init: InitialState | None = None,
) -> InferenceOutcome:
    """Run the method selected by ``cfg``'s flags on one sample.

    ``views`` may carry precomputed augmentations (index 0 must be the input)
    so several methods can share them; otherwise they are generated from
    ``image`` and ``seed``.
    """
    cfg.validate()
    start = time.perf_counter()
    init = init if init is not None else initial_state(backend, class_names, cfg)
    if views is None:
        if image is None:
            raise InputError("need an image or precomputed views")
        needs_views = cfg.use_ensemble or cfg.use_entmin
        views = make_views(image, cfg if needs_views else cfg.with_views(0), seed, sample_id)
    stack = views.views if isinstance(views, ViewBatch) else torch.as_tensor(views)
    if not (cfg.use_ensemble or cfg.use_entmin):
        stack = stack[:1]

    with torch.no_grad():
        features = encode_image(backend, stack)
        predictions = classify(features, init.head)

    trace, selected = [], None
    if cfg.use_entmin:
        prompt, trace, selected = tune_prompt(backend, class_names, features, predictions, init, cfg)
        with torch.no_grad():
            head = build_class_head(backend, prompt, class_names, cfg.temperature)
            predictions = classify(features, head)

    weights = None
    if cfg.use_ensemble:
        n = predictions.shape[0]
        if cfg.use_weighted and n > 1:
            sim = similarity_matrix(features)
            weights = ensemble_weights(reliability_scores(sim, min(cfg.k, n - 1)), cfg.weight_temperature)
        else:
            weights = torch.full((n,), 1.0 / n, dtype=predictions.dtype)
        prediction = weighted_ensemble(predictions, weights)
    else:
        prediction = predictions[0]

    return InferenceOutcome(
        sample_id=sample_id,
        method=cfg.name,
        predicted_class=int(prediction.argmax()),
        prediction=prediction,
        weights=weights,
        objective_trace=trace,
        selected=selected,
        wall_time=time.perf_counter() - start,
    )


def _require(cfg: MethodConfig, method: str, flags: tuple[bool, bool, bool]):
    if cfg.method != method:
        raise ConfigurationError(f"{method}_infer called with method {cfg.method!r}")
    if cfg.flags != flags:
        raise ConfigurationError(f"{method} requires flags {flags}, got {cfg.flags}")


def rtpt_infer(backend, class_names, image, cfg: MethodConfig, seed=0, **kw) -> InferenceOutcome:
    """Pointwise-entropy tuning, then reliability-weighted ensembling of all views."""
    _require(cfg, "rtpt", (True, True, True))
    if cfg.objective != "pointwise":
        raise ConfigurationError("rtpt tunes the pointwise objective")
    return infer(backend, class_names, image, cfg, seed, **kw)


def tpt_infer(backend, class_names, image, cfg: MethodConfig, seed=0, **kw) -> InferenceOutcome:
    """Marginal-entropy tuning, then the tuned head on the original view only."""
    _require(cfg, "tpt", (False, False, True))
    return infer(backend, class_names, image, cfg, seed, **kw)


def ensemble_infer(backend, class_names, image, cfg: MethodConfig, seed=0, **kw) -> InferenceOutcome:
    _require(cfg, "ensemble", (True, False, False))
    return infer(backend, class_names, image, cfg, seed, **kw)


def zeroshot_infer(backend, class_names, image, cfg: MethodConfig | None = None, seed=0, **kw) -> InferenceOutcome:
    cfg = cfg if cfg is not None else method_preset("zeroshot")
    _require(cfg, "zeroshot", (False, False, False))
    return infer(backend, class_names, image, cfg, seed, **kw)


def ablation_infer(backend, class_names, image, cfg: MethodConfig, seed=0, flags=None, **kw) -> InferenceOutcome:
    if flags is not None:
        e, w, t = flags
        cfg = cfg.replace(method="ablation", use_ensemble=e, use_weighted=w, use_entmin=t)
    return infer(backend, class_names, image, cfg.validate(), seed, **kw)


INFER = {
    "zeroshot": zeroshot_infer,
    "ensemble": ensemble_infer,
    "tpt": tpt_infer,
    "rtpt": rtpt_infer,
    "ablation": ablation_infer,
}


def run_method(backend, class_names, image, cfg: MethodConfig, seed=0, **kw) -> InferenceOutcome:
    return INFER[cfg.method](backend, class_names, image, cfg, seed, **kw)
