"""L-infinity attacks on the pre-adaptation zero-shot classifier, plus a cache.

Budgets and step sizes are given in 1/255 pixel units; attacks operate on
un-normalized [0, 1] pixels and the backend applies its own normalization.
The core routines take a ``logits_fn`` mapping a ``(B, C, H, W)`` batch to
``(B, n_classes)`` scores, so they work for any differentiable classifier.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch
import torch.nn.functional as F

from .augment import sample_seed
from .errors import ConfigurationError, InputError, IntegrityError
from .model import ClassHead, EncoderBackend, build_class_head, encode_image, logits

log = logging.getLogger(__name__)

FAMILIES = ("fgsm", "pgd", "cw", "deepfool")
DEFAULT_ATTACK_TEMPLATE = "a photo of a []"
LINF_SLACK = 1e-7

LogitsFn = Callable[[torch.Tensor], torch.Tensor]


@dataclass(frozen=True)
class AttackSpec:
    family: str = "pgd"
    epsilon: float = 1.0
    steps: int = 7
    step_size: float | None = None
    prompt_template: str = DEFAULT_ATTACK_TEMPLATE
    seed: int = 0
    random_start: bool | None = None
    kappa: float = 0.0
    overshoot: float = 0.02

    def validate(self) -> AttackSpec:
        if self.family not in FAMILIES:
            raise ConfigurationError(f"unknown attack family {self.family!r}; choose from {FAMILIES}")
        if not self.epsilon >= 0:
            raise ConfigurationError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.steps < 1:
            raise ConfigurationError(f"steps must be >= 1, got {self.steps}")
        if self.step_size is not None and not self.step_size > 0:
            raise ConfigurationError(f"step_size must be positive, got {self.step_size}")
        return self

    @property
    def alpha(self) -> float:
        """Step size in 1/255 units; defaults to twice the budget spread over the steps."""
        if self.step_size is not None:
            return self.step_size
        return 2 * self.epsilon / self.steps

    @property
    def uses_random_start(self) -> bool:
        if self.random_start is not None:
            return self.random_start
        return self.family == "pgd"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def spec_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> AttackSpec:
        return cls(**d).validate()


PRESETS = {
    "pgd-rn50": AttackSpec("pgd", epsilon=1.0, steps=7),
    "pgd-vit": AttackSpec("pgd", epsilon=4.0, steps=100),
}


@dataclass
class AdversarialRecord:
    sample_id: object
    clean_label: int
    image: torch.Tensor
    spec: AttackSpec
    achieved_linf: float
    attacker_prediction: int
    checksum: str


def tensor_checksum(x: torch.Tensor | np.ndarray) -> str:
    arr = np.ascontiguousarray(x.detach().cpu().numpy() if isinstance(x, torch.Tensor) else x)
    return hashlib.sha256(arr.tobytes()).hexdigest()


# -- core routines on an arbitrary differentiable classifier ------------------


def _input_grad(loss_fn, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    x = x.detach().clone().requires_grad_(True)
    loss = loss_fn(x)
    (grad,) = torch.autograd.grad(loss, x)
    return grad, loss.detach()


def _ce_loss(logits_fn: LogitsFn, label: int):
    target = torch.tensor([label])
    return lambda x: F.cross_entropy(logits_fn(x.unsqueeze(0)), target)


def cw_margin_loss(z: torch.Tensor, label: int, kappa: float = 0.0) -> torch.Tensor:
    """``max(z_label - max_{c != label} z_c, -kappa)``; the attacker drives it down."""
    other = z.clone()
    other[..., label] = -torch.inf
    return torch.clamp(z[..., label] - other.max(-1).values, min=-kappa)


def _project(x_adv: torch.Tensor, x: torch.Tensor, eps: float) -> torch.Tensor:
    return torch.minimum(torch.maximum(x_adv, x - eps), x + eps).clamp(0.0, 1.0)


def fgsm_perturb(logits_fn: LogitsFn, x: torch.Tensor, label: int, epsilon: float) -> torch.Tensor:
    """One signed-gradient step of size ``epsilon`` (already in pixel units)."""
    if epsilon == 0:
        return x.detach().clone()
    grad, _ = _input_grad(_ce_loss(logits_fn, label), x)
    return (x.detach() + epsilon * grad.sign()).clamp(0.0, 1.0)


def pgd_perturb(
    logits_fn: LogitsFn,
    x: torch.Tensor,
    label: int,
    epsilon: float,
    steps: int,
    step_size: float,
    random_start: bool = True,
    seed: int = 0,
    loss: str = "ce",
    kappa: float = 0.0,
    trace: list | None = None,
) -> torch.Tensor:
    """Projected signed-gradient ascent inside the ``epsilon`` ball and [0, 1].

    With ``loss="cw"`` the margin loss is descended instead of the
    cross-entropy being ascended.  ``trace`` collects the loss at every iterate.
    """
    x = x.detach()
    if epsilon == 0:
        return x.clone()
    if loss == "ce":
        objective = _ce_loss(logits_fn, label)
        sign = 1.0
    elif loss == "cw":
        objective = lambda v: cw_margin_loss(logits_fn(v.unsqueeze(0))[0], label, kappa)  # noqa: E731
        sign = -1.0
    else:
        raise ConfigurationError(f"unknown attack loss {loss!r}")
    x_adv = x.clone()
    if random_start:
        gen = torch.Generator().manual_seed(int(seed))
        noise = torch.rand(x.shape, generator=gen, dtype=x.dtype) * 2 - 1
        x_adv = _project(x + epsilon * noise, x, epsilon)
    for _ in range(steps):
        grad, value = _input_grad(objective, x_adv)
        if trace is not None:
            trace.append(float(value))
        x_adv = _project(x_adv + sign * step_size * grad.sign(), x, epsilon)
    if trace is not None:
        trace.append(float(objective(x_adv).detach()))
    return x_adv


def deepfool_step(logits_fn: LogitsFn, x: torch.Tensor, label: int, candidates: int = 10) -> torch.Tensor:
    """Minimal step onto the nearest linearized decision boundary.

    Returns the raw perturbation ``|f_l| / ||w_l||^2 * w_l`` with no slack or
    overshoot, where ``l`` minimizes ``|f_k| / ||w_k||`` over the top scoring
    competing classes.
    """
    x = x.detach().clone().requires_grad_(True)
    z = logits_fn(x.unsqueeze(0))[0]
    order = torch.argsort(z.detach(), descending=True)
    rivals = [int(c) for c in order if int(c) != label][:candidates]
    grad_label = torch.autograd.grad(z[label], x, retain_graph=True)[0]
    best, best_dist = None, torch.inf
    for k in rivals:
        grad_k = torch.autograd.grad(z[k], x, retain_graph=True)[0]
        w = grad_k - grad_label
        f = (z[k] - z[label]).detach()
        wnorm = w.flatten().norm()
        if wnorm == 0:
            continue
        dist = f.abs() / wnorm
        if dist < best_dist:
            best, best_dist = (f, w, wnorm), dist
    if best is None:
        return torch.zeros_like(x.detach())
    f, w, wnorm = best
    return (f.abs() / wnorm**2) * w


def deepfool_perturb(
    logits_fn: LogitsFn,
    x: torch.Tensor,
    label: int,
    epsilon: float,
    max_iter: int = 50,
    overshoot: float = 0.02,
) -> tuple[torch.Tensor, int]:
    """DeepFool iterations, then projection onto the ``epsilon`` budget.

    Returns the adversarial image and the number of iterations taken.
    """
    x = x.detach()
    if epsilon == 0:
        return x.clone(), 0
    r_total = torch.zeros_like(x)
    x_adv = x.clone()
    it = 0
    for it in range(max_iter):
        with torch.no_grad():
            pred = int(logits_fn(x_adv.unsqueeze(0))[0].argmax())
        if pred != label:
            break
        r = deepfool_step(logits_fn, x_adv, label)
        norm = r.flatten().norm()
        r_total = r_total + r * (1 + 1e-4 / norm.clamp_min(1e-12))
        x_adv = (x + (1 + overshoot) * r_total).clamp(0.0, 1.0)
    else:
        it = max_iter
    return _project(x_adv, x, epsilon), it


# -- backend-level operations --------------------------------------------------


def attack_head(backend: EncoderBackend, class_names, spec: AttackSpec) -> ClassHead:
    """Zero-shot head the attacker builds from its own prompt template."""
    prompt = backend.prompt_from_template(spec.prompt_template, trainable=False)
    with torch.no_grad():
        return build_class_head(backend, prompt, class_names)


def head_logits_fn(backend: EncoderBackend, head: ClassHead) -> LogitsFn:
    return lambda x: logits(encode_image(backend, x), head)


def _check(spec: AttackSpec, family: str):
    spec.validate()
    if spec.family != family:
        raise ConfigurationError(f"spec family {spec.family!r} passed to {family}")


def _record(backend, head, image, adv, label, spec, sample_id) -> AdversarialRecord:
    with torch.no_grad():
        pred = int(logits(encode_image(backend, adv), head).argmax())
    return AdversarialRecord(
        sample_id=sample_id,
        clean_label=int(label),
        image=adv.detach(),
        spec=spec,
        achieved_linf=float((adv - image).abs().max()),
        attacker_prediction=pred,
        checksum=tensor_checksum(adv),
    )


def _prepare(backend, image):
    image = torch.as_tensor(image, dtype=backend.dtype)
    if tuple(image.shape) != tuple(backend.input_shape):
        raise InputError(f"expected image shape {tuple(backend.input_shape)}, got {tuple(image.shape)}")
    return image


def fgsm(backend, head, image, label, spec: AttackSpec, sample_id=None) -> AdversarialRecord:
    _check(spec, "fgsm")
    image = _prepare(backend, image)
    adv = fgsm_perturb(head_logits_fn(backend, head), image, label, spec.epsilon / 255)
    return _record(backend, head, image, adv, label, spec, sample_id)


def pgd(backend, head, image, label, spec: AttackSpec, sample_id=None, seed=None) -> AdversarialRecord:
    _check(spec, "pgd")
    image = _prepare(backend, image)
    adv = pgd_perturb(
        head_logits_fn(backend, head), image, label,
        spec.epsilon / 255, spec.steps, spec.alpha / 255,
        random_start=spec.uses_random_start, seed=spec.seed if seed is None else seed,
    )
    return _record(backend, head, image, adv, label, spec, sample_id)


def cw_margin(backend, head, image, label, spec: AttackSpec, sample_id=None, seed=None) -> AdversarialRecord:
    _check(spec, "cw")
    image = _prepare(backend, image)
    adv = pgd_perturb(
        head_logits_fn(backend, head), image, label,
        spec.epsilon / 255, spec.steps, spec.alpha / 255,
        random_start=spec.uses_random_start, seed=spec.seed if seed is None else seed,
        loss="cw", kappa=spec.kappa,
    )
    return _record(backend, head, image, adv, label, spec, sample_id)


def deepfool(backend, head, image, label, spec: AttackSpec, sample_id=None) -> AdversarialRecord:
    _check(spec, "deepfool")
    image = _prepare(backend, image)
    adv, _ = deepfool_perturb(
        head_logits_fn(backend, head), image, label, spec.epsilon / 255,
        max_iter=spec.steps, overshoot=spec.overshoot,
    )
    return _record(backend, head, image, adv, label, spec, sample_id)


def run_attack(backend, head, image, label, spec: AttackSpec, sample_id=None) -> AdversarialRecord:
    """Dispatch on ``spec.family``; iterative attacks get a per-sample seed."""
    seed = sample_seed(spec.seed, sample_id) if sample_id is not None else spec.seed
    if spec.family == "fgsm":
        return fgsm(backend, head, image, label, spec, sample_id)
    if spec.family == "pgd":
        return pgd(backend, head, image, label, spec, sample_id, seed=seed)
    if spec.family == "cw":
        return cw_margin(backend, head, image, label, spec, sample_id, seed=seed)
    if spec.family == "deepfool":
        return deepfool(backend, head, image, label, spec, sample_id)
    raise ConfigurationError(f"unknown attack family {spec.family!r}")


# -- cache ---------------------------------------------------------------------


@dataclass
class AttackCache:
    """Handle on one cached attack run: a stacked ``.npy`` plus a JSON sidecar."""

    path: Path
    meta: dict

    @property
    def images_path(self) -> Path:
        return self.path / "images.npy"

    @property
    def spec(self) -> AttackSpec:
        return AttackSpec.from_dict(self.meta["spec"])

    @property
    def spec_hash(self) -> str:
        return self.meta["spec_hash"]

    def __len__(self):
        return len(self.meta["samples"])

    def records(self, verify: bool = True) -> dict:
        """Load every record keyed by sample id, checking each checksum."""
        try:
            images = np.load(self.images_path, allow_pickle=False)
        except Exception as exc:  # truncated or mangled container
            raise IntegrityError(f"cannot read attack cache {self.images_path}: {exc}") from exc
        spec = self.spec
        out = {}
        for i, entry in enumerate(self.meta["samples"]):
            img = images[i]
            if verify and tensor_checksum(img) != entry["checksum"]:
                raise IntegrityError(
                    f"checksum mismatch for sample_id {entry['sample_id']!r} in {self.path}"
                )
            out[_key(entry["sample_id"])] = AdversarialRecord(
                sample_id=entry["sample_id"],
                clean_label=entry["label"],
                image=torch.from_numpy(np.array(img)),
                spec=spec,
                achieved_linf=entry["achieved_linf"],
                attacker_prediction=entry["attacker_prediction"],
                checksum=entry["checksum"],
            )
        return out


def _key(sample_id):
    return sample_id if isinstance(sample_id, (int, str)) else str(sample_id)


def cache_key(dataset_fingerprint: str, spec: AttackSpec, backend_id: str) -> str:
    blob = json.dumps([dataset_fingerprint, spec.spec_hash, backend_id]).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def cache_dir_for(root, dataset_name: str, spec: AttackSpec, backend_id: str, fingerprint: str) -> Path:
    return Path(root) / f"{dataset_name}-{spec.family}-{cache_key(fingerprint, spec, backend_id)}"


def open_cache(path) -> AttackCache:
    path = Path(path)
    meta_path = path / "meta.json"
    if not meta_path.exists():
        raise InputError(f"no attack cache at {path}")
    return AttackCache(path, json.loads(meta_path.read_text()))


def find_cache(root, spec_hash: str, dataset_name: str | None = None) -> AttackCache:
    """Locate a cache under ``root`` by spec hash; errors name the missing hash."""
    root = Path(root)
    hits = []
    if root.exists():
        for meta in sorted(root.glob("*/meta.json")):
            m = json.loads(meta.read_text())
            if m.get("spec_hash") == spec_hash and (dataset_name is None or m.get("dataset") == dataset_name):
                hits.append(AttackCache(meta.parent, m))
    if not hits:
        raise InputError(f"no attack cache for spec-hash {spec_hash} under {root}")
    return hits[0]


def generate_and_cache(
    dataset,
    spec: AttackSpec,
    backend: EncoderBackend,
    head: ClassHead | None = None,
    cache_root=".rtpt_cache",
    progress: Callable[[int, int], None] | None = None,
) -> AttackCache:
    """Attack every sample once and persist the results.

    Idempotent per (dataset, spec, backend): a matching cache is verified and
    reused without recomputation.  An existing cache whose metadata or
    checksums disagree raises :class:`IntegrityError`.
    """
    spec.validate()
    head = head if head is not None else attack_head(backend, dataset.class_names, spec)
    fingerprint = dataset.fingerprint()
    path = cache_dir_for(cache_root, dataset.name, spec, backend.identifier, fingerprint)
    expected = {
        "dataset": dataset.name,
        "dataset_fingerprint": fingerprint,
        "spec": spec.to_dict(),
        "spec_hash": spec.spec_hash,
        "backend": backend.identifier,
    }
    if (path / "meta.json").exists():
        cache = open_cache(path)
        for key, value in expected.items():
            if cache.meta.get(key) != value:
                raise IntegrityError(f"cache {path} has {key}={cache.meta.get(key)!r}, expected {value!r}")
        cache.records(verify=True)
        log.info("reusing attack cache %s", path)
        return cache

    samples, images = [], []
    total = len(dataset)
    for i, (sample_id, image, label) in enumerate(dataset):
        rec = run_attack(backend, head, image, label, spec, sample_id=sample_id)
        images.append(rec.image.cpu().numpy())
        samples.append({
            "sample_id": sample_id,
            "label": int(label),
            "checksum": rec.checksum,
            "achieved_linf": rec.achieved_linf,
            "attacker_prediction": rec.attacker_prediction,
            "seed": sample_seed(spec.seed, sample_id),
        })
        if progress is not None:
            progress(i + 1, total)
    path.mkdir(parents=True, exist_ok=True)
    tmp = path / "images.tmp.npy"
    np.save(tmp, np.stack(images))
    os.replace(tmp, path / "images.npy")
    meta = dict(expected, samples=samples)
    (path / "meta.json").write_text(json.dumps(meta, indent=1))
    return AttackCache(path, meta)
