"""Answer isolation, greedy labelling and the F1 / JS metric suites."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidArgumentError
from .numerics import argmax_index, check_distribution, check_logits, js_distance

DEFAULT_TOP_K = 10
CSV_COLUMNS = ("bin_f1", "ma_f1", "mi_f1", "mean_js", "invalid_rate", "n")


@dataclass(frozen=True)
class AnswerMapping:
    """Ordered answer choices, each a label with one or more surface token ids."""

    choices: tuple[tuple[int, frozenset[int]], ...]
    unsure_label: int

    def __post_init__(self):
        if not self.choices:
            raise InvalidArgumentError("answer mapping has no choices")
        labels = [lab for lab, _ in self.choices]
        if len(set(labels)) != len(labels):
            raise InvalidArgumentError("answer labels must be unique")
        seen: set[int] = set()
        for _, ids in self.choices:
            if not ids:
                raise InvalidArgumentError("every choice needs at least one token id")
            if seen & set(ids):
                raise InvalidArgumentError("token id sets must be pairwise disjoint")
            seen |= set(ids)

    @property
    def labels(self) -> list[int]:
        return [lab for lab, _ in self.choices]

    def label_of_token(self, token_id: int) -> int | None:
        for lab, ids in self.choices:
            if token_id in ids:
                return lab
        return None


def extract_answer_distribution(
    logits,
    mapping: AnswerMapping,
    top_k: int = DEFAULT_TOP_K,
    temperature: float = 1.0,
    return_valid: bool = False,
):
    """Softmax over the best in-top-k logit of each choice.

    Choices with no token among the ``top_k`` highest logits get probability
    zero.  When no choice appears at all the uniform distribution is returned
    and the extraction is flagged invalid.
    """
    x = check_logits(logits)
    if top_k < 1:
        raise InvalidArgumentError("top_k must be positive")
    order = np.argsort(-x, kind="stable")[:top_k]
    in_top = set(order.tolist())
    gathered = np.full(len(mapping.choices), -np.inf)
    for c, (_, ids) in enumerate(mapping.choices):
        present = [x[t] for t in ids if t in in_top]
        if present:
            gathered[c] = max(present)
    finite = np.isfinite(gathered)
    if not finite.any():
        dist = np.full(len(mapping.choices), 1.0 / len(mapping.choices))
        return (dist, False) if return_valid else dist
    if temperature <= 0:
        raise InvalidArgumentError("temperature must be positive")
    z = gathered[finite] / temperature
    e = np.exp(z - z.max())
    dist = np.zeros(len(mapping.choices))
    dist[finite] = e / e.sum()
    return (dist, True) if return_valid else dist


def greedy_label(logits, mapping: AnswerMapping) -> int:
    """Label of the top vocabulary token, or ``unsure_label`` if it is no answer."""
    x = check_logits(logits)
    top = int(np.argmax(x))
    label = mapping.label_of_token(top)
    return mapping.unsure_label if label is None else label


def is_valid_greedy(logits, mapping: AnswerMapping) -> bool:
    return mapping.label_of_token(int(np.argmax(check_logits(logits)))) is not None


def majority_label(dist) -> int:
    return argmax_index(dist)


@dataclass(frozen=True)
class PredictionRecord:
    record_id: str
    predicted_label: int
    predicted_distribution: np.ndarray
    gold_label: int | None = None
    gold_distribution: np.ndarray | None = None
    valid: bool = True

    def __post_init__(self):
        if (self.gold_label is None) == (self.gold_distribution is None):
            raise InvalidArgumentError(
                f"{self.record_id}: exactly one of gold_label / gold_distribution required"
            )


@dataclass(frozen=True)
class ClassScores:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class MetricsReport:
    macro_f1: float
    micro_f1: float
    sample_count: int
    binary_f1: float | None = None
    mean_js: float | None = None
    per_class: dict[int, ClassScores] = field(default_factory=dict)
    invalid_rate: float = 0.0
    label_counts: dict[int, int] = field(default_factory=dict)

    def as_row(self) -> dict[str, str]:
        return {
            "bin_f1": _fmt(self.binary_f1),
            "ma_f1": _fmt(self.macro_f1),
            "mi_f1": _fmt(self.micro_f1),
            "mean_js": _fmt(self.mean_js),
            "invalid_rate": _fmt(self.invalid_rate),
            "n": str(self.sample_count),
        }

    def to_csv_row(self) -> str:
        row = self.as_row()
        return ",".join(row[c] for c in CSV_COLUMNS)

    def to_kv(self) -> str:
        lines = [f"{k}={v}" for k, v in self.as_row().items()]
        for lab in sorted(self.per_class):
            s = self.per_class[lab]
            lines.append(f"class_{lab}_precision={_fmt(s.precision)}")
            lines.append(f"class_{lab}_recall={_fmt(s.recall)}")
            lines.append(f"class_{lab}_f1={_fmt(s.f1)}")
        return "\n".join(lines) + "\n"


def _fmt(x) -> str:
    return "" if x is None else f"{x:.10g}"


def _safe_div(a: float, b: float) -> float:
    return a / b if b else 0.0


def confusion_counts(golds: Sequence[int], preds: Sequence[int], label: int) -> tuple[int, int, int]:
    tp = sum(1 for g, p in zip(golds, preds) if g == label and p == label)
    fp = sum(1 for g, p in zip(golds, preds) if g != label and p == label)
    fn = sum(1 for g, p in zip(golds, preds) if g == label and p != label)
    return tp, fp, fn


def f1_suite(
    preds: Sequence[PredictionRecord],
    positive_classes: Iterable[int],
    binary_class: int | None = None,
) -> MetricsReport:
    """Per-class, macro, micro and binary F1 from the confusion matrix.

    Classes without predictions or gold instances score f1 = 0 and still
    count towards the macro average.
    """
    if not preds:
        raise InvalidArgumentError("no predictions")
    if any(p.gold_label is None for p in preds):
        raise InvalidArgumentError("f1_suite needs gold labels on every record")
    positive = sorted(set(positive_classes))
    if not positive:
        raise InvalidArgumentError("positive_classes is empty")
    golds = [p.gold_label for p in preds]
    guesses = [p.predicted_label for p in preds]
    labels = sorted(set(golds) | set(guesses) | set(positive) | ({binary_class} - {None}))
    per_class = {}
    for lab in labels:
        tp, fp, fn = confusion_counts(golds, guesses, lab)
        prec, rec = _safe_div(tp, tp + fp), _safe_div(tp, tp + fn)
        per_class[lab] = ClassScores(prec, rec, _safe_div(2 * prec * rec, prec + rec), tp + fn)
    macro = math.fsum(per_class[c].f1 for c in positive) / len(positive)
    tp = fp = fn = 0
    for c in positive:
        a, b, d = confusion_counts(golds, guesses, c)
        tp, fp, fn = tp + a, fp + b, fn + d
    micro = _safe_div(2 * tp, 2 * tp + fp + fn)
    return MetricsReport(
        macro_f1=macro,
        micro_f1=micro,
        sample_count=len(preds),
        binary_f1=None if binary_class is None else per_class[binary_class].f1,
        per_class=per_class,
        invalid_rate=sum(1 for p in preds if not p.valid) / len(preds),
        label_counts=dict(sorted(Counter(guesses).items())),
    )


def js_suite(preds: Sequence[PredictionRecord]) -> float:
    if not preds:
        raise InvalidArgumentError("no predictions")
    if any(p.gold_distribution is None for p in preds):
        raise InvalidArgumentError("js_suite needs gold distributions on every record")
    return math.fsum(
        js_distance(p.predicted_distribution, p.gold_distribution) for p in preds
    ) / len(preds)


def evaluate(
    preds: Sequence[PredictionRecord],
    positive_classes: Iterable[int],
    binary_class: int | None = None,
    labels: Sequence[int] | None = None,
) -> MetricsReport:
    """Full report; distributional records are scored on their majority label too.

    ``labels`` maps distribution positions to class labels (identity if omitted).
    """
    if not preds:
        raise InvalidArgumentError("no predictions")
    kinds = {p.gold_distribution is not None for p in preds}
    if len(kinds) > 1:
        raise InvalidArgumentError("mixed classification and distributional records")
    if kinds == {True}:
        as_labels = [
            PredictionRecord(
                p.record_id,
                p.predicted_label,
                p.predicted_distribution,
                gold_label=_label_at(labels, majority_label(check_distribution(p.gold_distribution))),
                valid=p.valid,
            )
            for p in preds
        ]
        report = f1_suite(as_labels, positive_classes, binary_class)
        report.mean_js = js_suite(preds)
        return report
    return f1_suite(preds, positive_classes, binary_class)


def _label_at(labels, index: int) -> int:
    return index if labels is None else labels[index]
