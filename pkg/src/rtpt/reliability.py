"""Neighbour-density reliability of augmented views and weighted ensembling."""

from __future__ import annotations

import torch

from .errors import ConfigurationError, InputError

DEFAULT_NEIGHBORS = 20
DEFAULT_WEIGHT_TEMPERATURE = 0.01
NORM_TOL = 1e-6


def similarity_matrix(features: torch.Tensor) -> torch.Tensor:
    """Pairwise cosine similarities of unit feature rows."""
    features = torch.as_tensor(features)
    if features.ndim != 2 or features.shape[0] < 2:
        raise InputError("need at least two feature vectors")
    if torch.any((features.norm(dim=-1) - 1).abs() > NORM_TOL):
        raise InputError("features must be unit-normalized")
    return (features @ features.T).clamp(-1.0, 1.0)


def reliability_scores(sim: torch.Tensor, k: int = DEFAULT_NEIGHBORS) -> torch.Tensor:
    """Mean similarity of each row to its ``k`` most similar other rows.

    A row never counts itself as a neighbour, even when another row is an
    exact duplicate.  Equal similarities are ranked by lower column index.
    """
    n = sim.shape[0]
    if sim.ndim != 2 or sim.shape[1] != n:
        raise InputError("similarity matrix must be square")
    if not 1 <= k <= n - 1:
        raise ConfigurationError(f"neighbour count must be in [1, {n - 1}], got {k}")
    masked = sim.clone()
    masked.fill_diagonal_(-torch.inf)
    top = torch.sort(masked, dim=1, descending=True, stable=True).values[:, :k]
    return top.mean(1)


def ensemble_weights(reliability: torch.Tensor, temperature: float = DEFAULT_WEIGHT_TEMPERATURE) -> torch.Tensor:
    if not temperature > 0:
        raise ConfigurationError(f"weight temperature must be positive, got {temperature}")
    return torch.softmax(reliability / temperature, dim=0)


def weighted_ensemble(predictions: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """``sum_i w_i p_i`` over views."""
    if predictions.ndim != 2 or weights.ndim != 1 or predictions.shape[0] != weights.shape[0]:
        raise InputError(
            f"{tuple(weights.shape)} weights do not match {tuple(predictions.shape)} predictions"
        )
    if abs(float(weights.sum()) - 1) > NORM_TOL or torch.any(weights < 0):
        raise InputError("weights must be nonnegative and sum to 1")
    return weights.to(predictions.dtype) @ predictions
