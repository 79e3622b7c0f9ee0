"""Simplex weights, risk vectors and the APStar weight update."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SIMPLEX_ATOL = 1e-12


class DimensionError(ValueError):
    """Raised when two vectors that must align have different lengths."""


@dataclass(frozen=True)
class APStarConfig:
    """Inputs to the APStar loop.

    ``alpha`` interpolates between the current weights and the active-group
    direction; ``k_min`` caps the step counter after an improvement.
    """

    alpha: float = 0.5
    k_min: int = 1
    max_iterations: int = 500
    improvement_tolerance: float = 0.0
    patience_iters: int = 25

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.k_min < 1:
            raise ValueError(f"k_min must be >= 1, got {self.k_min}")
        if self.max_iterations < 1:
            raise ValueError(f"max_iterations must be >= 1, got {self.max_iterations}")
        if self.improvement_tolerance < 0:
            raise ValueError("improvement_tolerance must be non-negative")
        if self.patience_iters < 1:
            raise ValueError("patience_iters must be >= 1")


def as_simplex(w, atol: float = SIMPLEX_ATOL) -> np.ndarray:
    """Validate ``w`` as a point on the probability simplex and return it as float array."""
    w = np.asarray(w, dtype=float)
    if w.ndim != 1 or w.size == 0:
        raise ValueError(f"simplex weights must be a non-empty 1-D vector, got shape {w.shape}")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise ValueError(f"simplex weights must be finite and non-negative: {w}")
    if abs(w.sum() - 1.0) > atol:
        raise ValueError(f"simplex weights must sum to 1 (got {w.sum():.17g})")
    return w


def as_risk_vector(r) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    if r.ndim != 1 or r.size == 0:
        raise ValueError(f"risk vector must be a non-empty 1-D vector, got shape {r.shape}")
    if not np.all(np.isfinite(r)) or np.any(r < 0):
        raise ValueError(f"risk entries must be finite and non-negative: {r}")
    return r


def uniform_weights(n_groups: int) -> np.ndarray:
    return np.full(n_groups, 1.0 / n_groups)


def dominates(r1, r2) -> bool:
    """True iff ``r1`` is no worse than ``r2`` everywhere and strictly better somewhere."""
    r1 = np.asarray(r1, dtype=float)
    r2 = np.asarray(r2, dtype=float)
    if r1.shape != r2.shape:
        raise DimensionError(f"cannot compare risk vectors of shapes {r1.shape} and {r2.shape}")
    return bool(np.all(r1 <= r2) and np.any(r1 < r2))


def active_mask(r, threshold: float) -> np.ndarray:
    """Groups whose risk is at or above ``threshold`` (ties count as active)."""
    return np.asarray(r, dtype=float) >= threshold


def apstar_update(mu, mask, k: int, alpha: float) -> np.ndarray:
    """One APStar step.

    Moves ``mu`` toward the uniform distribution over the active groups::

        mu <- (alpha * mu + (1 - alpha) / (k * |mask|) * mask) * k / ((k - 1) * alpha + 1)

    The rescaling keeps the result on the simplex, and the pull toward the
    mask shrinks like 1/k.
    """
    mu = np.asarray(mu, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != mu.shape:
        raise DimensionError(f"mask shape {mask.shape} does not match weights {mu.shape}")
    n_active = int(mask.sum())
    if n_active == 0:
        raise ValueError("apstar_update needs at least one active group")
    if k < 1:
        raise ValueError(f"step counter k must be >= 1, got {k}")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    pulled = alpha * mu + (1.0 - alpha) / (k * n_active) * mask
    return pulled * (k / ((k - 1) * alpha + 1.0))
