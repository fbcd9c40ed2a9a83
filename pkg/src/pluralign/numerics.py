"""Probability-space primitives: softmax, entropy, Jensen-Shannon distance.

A *distribution* here is a 1-D float64 array with nonnegative entries summing
to one (within ``SUM_TOL``).  Logit vectors are 1-D arrays of finite reals.
Every function is pure.
"""
from __future__ import annotations

import math

import numpy as np

from .errors import InvalidArgumentError

SUM_TOL = 1e-9
PROB_FLOOR = 1e-12


def check_logits(logits) -> np.ndarray:
    x = np.asarray(logits, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise InvalidArgumentError(f"logits must be a non-empty vector, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise InvalidArgumentError("logits contain non-finite entries")
    return x


def check_distribution(p, tol: float = SUM_TOL) -> np.ndarray:
    """Validate ``p`` as a probability vector and return it as float64."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise InvalidArgumentError(f"distribution must be a non-empty vector, got shape {p.shape}")
    if not np.all(np.isfinite(p)):
        raise InvalidArgumentError("distribution contains non-finite entries")
    if np.any(p < 0):
        raise InvalidArgumentError("distribution has negative entries")
    total = math.fsum(p)
    if abs(total - 1.0) > tol:
        raise InvalidArgumentError(f"distribution sums to {total!r}, not 1")
    return p


def _check_temperature(temperature) -> float:
    t = float(temperature)
    if not (math.isfinite(t) and t > 0):
        raise InvalidArgumentError(f"temperature must be positive and finite, got {temperature!r}")
    return t


def softmax(logits, temperature: float = 1.0) -> np.ndarray:
    x = check_logits(logits) / _check_temperature(temperature)
    e = np.exp(x - x.max())
    return e / e.sum()


def log_softmax(logits, temperature: float = 1.0) -> np.ndarray:
    x = check_logits(logits) / _check_temperature(temperature)
    shifted = x - x.max()
    return shifted - np.log(np.exp(shifted).sum())


def entropy(p, log_base: float = math.e) -> float:
    """Shannon entropy in the given base, with 0 log 0 taken as 0."""
    p = check_distribution(p)
    if not log_base > 1:
        raise InvalidArgumentError(f"log_base must exceed 1, got {log_base!r}")
    terms = np.where(p > 0, p * np.log(np.maximum(p, PROB_FLOOR)), 0.0)
    h = -terms.sum() / math.log(log_base)
    return max(float(h), 0.0)


def _kl_bits(p: np.ndarray, m: np.ndarray) -> float:
    mask = p > 0
    return float(np.sum(p[mask] * np.log2(p[mask] / np.maximum(m[mask], PROB_FLOOR))))


def js_divergence(p, q) -> float:
    """Jensen-Shannon divergence in bits (in [0, 1])."""
    p = check_distribution(p)
    q = check_distribution(q)
    if p.shape != q.shape:
        raise InvalidArgumentError(f"length mismatch: {p.size} vs {q.size}")
    m = 0.5 * (p + q)
    d = 0.5 * (_kl_bits(p, m) + _kl_bits(q, m))
    return min(max(d, 0.0), 1.0)


def js_distance(p, q) -> float:
    """Square root of the base-2 JS divergence; 1.0 for disjoint supports."""
    return math.sqrt(js_divergence(p, q))


def argmax_index(p) -> int:
    # np.argmax already returns the first maximal index
    return int(np.argmax(check_distribution(p)))


def total_variation(p, q) -> float:
    p = check_distribution(p)
    q = check_distribution(q)
    if p.shape != q.shape:
        raise InvalidArgumentError(f"length mismatch: {p.size} vs {q.size}")
    return 0.5 * float(np.abs(p - q).sum())
