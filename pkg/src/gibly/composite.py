"""Composite biases: a learned linear mix of kernel scores with L1/L2 penalties."""

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch


@dataclass
class CompositeWeights:
    """Mixing matrix ``W`` of shape (n composites, m kernels)."""

    W: np.ndarray

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        if self.W.ndim != 2:
            raise DimensionMismatch(f"W must be 2-D, got shape {self.W.shape}")
        if not np.all(np.isfinite(self.W)):
            raise ValueError("W must be finite")

    @property
    def n(self):
        return self.W.shape[0]

    @property
    def m(self):
        return self.W.shape[1]


@dataclass(frozen=True)
class RegularizerConfig:
    lambda_l1: float = 1e-4
    lambda_l2: float = 1e-4

    def __post_init__(self):
        if self.lambda_l1 < 0 or self.lambda_l2 < 0:
            raise ValueError("regulariser weights must be non-negative")


def composite_scores(weights, gib_scores):
    """``W @ gib_scores``; ``gib_scores`` may carry leading batch axes (..., m)."""
    W = weights.W if isinstance(weights, CompositeWeights) else np.asarray(weights)
    s = np.asarray(gib_scores, dtype=np.float64)
    if s.shape[-1] != W.shape[1]:
        raise DimensionMismatch(f"expected {W.shape[1]} kernel scores, got {s.shape[-1]}")
    return s @ W.T


def regularizer(weights, cfg):
    """Penalty ``l1*sum|W| + l2*sum W^2`` and its (sub)gradient, with sign(0) = 0."""
    W = weights.W if isinstance(weights, CompositeWeights) else np.asarray(weights)
    value = cfg.lambda_l1 * np.abs(W).sum() + cfg.lambda_l2 * np.square(W).sum()
    grad = cfg.lambda_l1 * np.sign(W) + 2.0 * cfg.lambda_l2 * W
    return float(value), grad


def init_weights(n, m, seed):
    if n < 1 or m < 1:
        raise ValueError("n and m must be >= 1")
    bound = 1.0 / np.sqrt(m)
    rng = np.random.default_rng(seed)
    return CompositeWeights(rng.uniform(-bound, bound, size=(n, m)))
