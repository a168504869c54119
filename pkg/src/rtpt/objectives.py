"""Entropy objectives for test-time prompt tuning.

All logarithms are natural.  Inputs are probability tensors whose last axis
indexes classes; every function is differentiable in torch so the same code
computes both the reported values and the tuning losses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .errors import ConfigurationError, InputError

LOG_FLOOR = 1e-12
SUM_TOL = 1e-6


def _as_probs(p) -> torch.Tensor:
    p = torch.as_tensor(p)
    if not torch.is_floating_point(p):
        p = p.to(torch.float64)
    detached = p.detach()
    if torch.any(detached < -SUM_TOL):
        raise InputError("probabilities must be nonnegative")
    if torch.any((detached.sum(-1) - 1).abs() > SUM_TOL):
        raise InputError("probability vectors must sum to 1")
    return p


def shannon_entropy(p) -> torch.Tensor:
    """``-sum_c p_c ln p_c`` along the last axis, with ``0 ln 0 = 0``."""
    p = _as_probs(p)
    return -(p * p.clamp_min(LOG_FLOOR).log()).sum(-1)


def kl_divergence(p, q) -> torch.Tensor:
    """``sum_c p_c ln(p_c / q_c)``; ``+inf`` where ``q`` misses mass that ``p`` has."""
    p, q = _as_probs(p), _as_probs(q)
    p, q = torch.broadcast_tensors(p, q)
    support = p > 0
    ratio = torch.where(support, p, torch.ones_like(p)).log() - q.clamp_min(LOG_FLOOR).log()
    terms = torch.where(support, p * ratio, torch.zeros_like(p))
    kl = terms.sum(-1)
    violated = (support & (q <= 0)).any(-1)
    return torch.where(violated, torch.full_like(kl, math.inf), kl)


@dataclass
class SelectedBatch:
    indices: torch.Tensor  # view indices, lowest entropy first
    fraction: float
    predictions: torch.Tensor  # (|B|, C) predictions of the members

    def __len__(self):
        return int(self.indices.numel())


@dataclass
class ObjectiveValue:
    total: torch.Tensor
    per_view_entropy: torch.Tensor
    per_view_kl: torch.Tensor
    mean_prediction: torch.Tensor


def as_batch(predictions) -> SelectedBatch:
    """Wrap an ``(n, C)`` prediction tensor as a batch containing every row."""
    predictions = _as_probs(predictions)
    return SelectedBatch(torch.arange(predictions.shape[0]), 1.0, predictions)


def _members(batch: SelectedBatch | torch.Tensor) -> torch.Tensor:
    preds = batch.predictions if isinstance(batch, SelectedBatch) else batch
    preds = _as_probs(preds)
    if preds.ndim != 2 or preds.shape[0] == 0:
        raise InputError("the selected batch is empty")
    return preds


def marginal_entropy(batch: SelectedBatch | torch.Tensor) -> ObjectiveValue:
    """Entropy of the mean member prediction, with its entropy + KL split."""
    preds = _members(batch)
    mean = preds.mean(0)
    total = -(mean * mean.clamp_min(LOG_FLOOR).log()).sum()
    ent = shannon_entropy(preds)
    kl = kl_divergence(preds, mean.expand_as(preds))
    return ObjectiveValue(total, ent, kl, mean)


def pointwise_entropy(batch: SelectedBatch | torch.Tensor) -> torch.Tensor:
    """Mean of the member entropies; the robust tuning loss."""
    return shannon_entropy(_members(batch)).mean()


def selection_size(n: int, fraction: float) -> int:
    # small epsilon guards products such as 0.57 * 100 = 56.999...
    return max(1, math.floor(fraction * n + 1e-9))


def select_low_entropy(predictions, fraction: float = 0.1) -> SelectedBatch:
    """Keep the ``floor(fraction * n)`` lowest-entropy rows (at least one).

    Ties are broken toward the lower index.
    """
    if not 0 < fraction <= 1:
        raise ConfigurationError(f"selection fraction must be in (0, 1], got {fraction}")
    predictions = _as_probs(predictions)
    if predictions.ndim != 2 or predictions.shape[0] == 0:
        raise InputError("need a nonempty (n, C) prediction tensor")
    ent = shannon_entropy(predictions.detach())
    order = torch.sort(ent, stable=True).indices
    keep = order[: selection_size(predictions.shape[0], fraction)]
    return SelectedBatch(keep, fraction, predictions[keep])
