"""Combining annotator-conditioned distributions into one prediction.

Pluralistic decoding scores each label by

    sum_a H(p_a) * ((1 + alpha) log p_a - alpha log p_base)

and takes a temperature-1 softmax.  Uncertain (high-entropy) annotators get
more weight, and the ``- alpha log p_base`` term pushes the result away from
what the model says without any feedback.  The plain fallback averages the
conditional probability vectors.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InvalidArgumentError
from .numerics import PROB_FLOOR, check_distribution, entropy, softmax

DEFAULT_ALPHA = 0.2


@dataclass(frozen=True)
class ConditionalSet:
    base: np.ndarray
    conditionals: tuple[tuple[str, np.ndarray], ...]

    def __post_init__(self):
        try:
            base = check_distribution(self.base)
            conds = tuple((str(a), check_distribution(p)) for a, p in self.conditionals)
        except InvalidArgumentError as exc:
            raise InvalidArgumentError(f"invalid conditional set: {exc}") from exc
        if not conds:
            raise InvalidArgumentError("conditional set needs at least one annotator")
        if any(p.shape != base.shape for _, p in conds):
            raise InvalidArgumentError("domain sizes differ across base and conditionals")
        object.__setattr__(self, "base", base)
        object.__setattr__(self, "conditionals", conds)

    @classmethod
    def of(cls, base, conditionals: Sequence[tuple[str, object]]) -> "ConditionalSet":
        return cls(np.asarray(base, dtype=np.float64), tuple(conditionals))


def _log(p: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(p, PROB_FLOOR))


def entropy_weights(cs: ConditionalSet, log_base: float = math.e) -> list[tuple[str, float]]:
    return [(a, entropy(p, log_base)) for a, p in cs.conditionals]


def pluralistic_scores(cs: ConditionalSet, alpha: float = DEFAULT_ALPHA, log_base: float = math.e) -> np.ndarray:
    """The entropy-weighted contrastive log-scores before the softmax."""
    if not alpha >= 0:
        raise InvalidArgumentError(f"alpha must be nonnegative, got {alpha!r}")
    log_base_p = _log(cs.base)
    total = np.zeros_like(cs.base)
    for (_, p), (_, w) in zip(cs.conditionals, entropy_weights(cs, log_base)):
        total += w * ((1.0 + alpha) * _log(p) - alpha * log_base_p)
    return total


def pluralistic_combine(cs: ConditionalSet, alpha: float = DEFAULT_ALPHA, log_base: float = math.e) -> np.ndarray:
    return softmax(pluralistic_scores(cs, alpha, log_base), 1.0)


def mean_combine(cs: ConditionalSet) -> np.ndarray:
    """Arithmetic mean of the conditional distributions; ``base`` is unused."""
    stacked = np.stack([p for _, p in cs.conditionals])
    out = stacked.sum(axis=0) / len(cs.conditionals)
    return out / out.sum()
