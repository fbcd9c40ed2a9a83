"""Dataset records and their line-delimited wire format.

One record per line, five ``|``-separated fields::

    record_id|input_text|options|feedback|gold

    options   label:surface;label:surface;...
    feedback  annotator:kind:text;...          (may be empty)
    gold      label=k  or  dist=p1,p2,...

Inside any field a backslash escapes the next character, so the delimiters
``| ; : = ,`` and the backslash itself are written as ``\\|`` etc.  A newline
is written as ``\\n`` and a carriage return as ``\\r``.  Files are UTF-8;
blank lines are ignored.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ..errors import DataError, ParseError

FEEDBACK_KINDS = ("coarse", "granular")
GOLD_SUM_TOL = 1e-6

_SPECIAL = "\\|;:=,"


@dataclass(frozen=True)
class Feedback:
    annotator_id: str
    kind: str
    text: str


@dataclass(frozen=True)
class DatasetRecord:
    record_id: str
    input_text: str
    answer_options: tuple[tuple[int, str], ...]
    feedback: tuple[Feedback, ...] = ()
    gold_label: int | None = None
    gold_distribution: tuple[float, ...] | None = None

    def __post_init__(self):
        if not self.answer_options:
            raise DataError(f"{self.record_id}: no answer options")
        labels = [lab for lab, _ in self.answer_options]
        if len(set(labels)) != len(labels):
            raise DataError(f"{self.record_id}: duplicate option labels")
        if (self.gold_label is None) == (self.gold_distribution is None):
            raise DataError(f"{self.record_id}: exactly one of gold label / distribution required")
        if self.gold_label is not None and self.gold_label not in labels:
            raise DataError(f"{self.record_id}: gold label {self.gold_label} not among options")
        if self.gold_distribution is not None:
            if len(self.gold_distribution) != len(labels):
                raise DataError(f"{self.record_id}: gold distribution length does not match options")
            if any(p < 0 or not math.isfinite(p) for p in self.gold_distribution):
                raise DataError(f"{self.record_id}: invalid gold probabilities")
        for fb in self.feedback:
            if fb.kind not in FEEDBACK_KINDS:
                raise DataError(f"{self.record_id}: unknown feedback kind {fb.kind!r}")

    @property
    def labels(self) -> list[int]:
        return [lab for lab, _ in self.answer_options]

    @property
    def annotators(self) -> list[str]:
        seen: list[str] = []
        for fb in self.feedback:
            if fb.annotator_id not in seen:
                seen.append(fb.annotator_id)
        return seen

    def feedback_text(self, annotator_id: str, kind: str) -> str | None:
        for fb in self.feedback:
            if fb.annotator_id == annotator_id and fb.kind == kind:
                return fb.text
        return None

    def surface(self, label: int) -> str:
        return dict(self.answer_options)[label]

    def gold_majority(self) -> int:
        """Gold label, or the first option with maximal gold probability."""
        if self.gold_label is not None:
            return self.gold_label
        return self.labels[int(np.argmax(self.gold_distribution))]


# --- escaping ---------------------------------------------------------------


def escape(text: str) -> str:
    out = []
    for ch in text:
        if ch in _SPECIAL:
            out.append("\\" + ch)
        elif ch == "\n":
            out.append("\\n")
        elif ch == "\r":
            out.append("\\r")
        else:
            out.append(ch)
    return "".join(out)


def unescape(text: str) -> str:
    out = []
    it = iter(text)
    for ch in it:
        if ch != "\\":
            out.append(ch)
            continue
        nxt = next(it, None)
        if nxt is None:
            raise ValueError("dangling escape at end of field")
        out.append({"n": "\n", "r": "\r"}.get(nxt, nxt))
    return "".join(out)


def split_escaped(text: str, sep: str, maxsplit: int = -1) -> list[str]:
    """Split on unescaped ``sep``; pieces keep their escapes."""
    parts, cur, i = [], [], 0
    while i < len(text):
        ch = text[i]
        if ch == "\\" and i + 1 < len(text):
            cur.append(text[i : i + 2])
            i += 2
            continue
        if ch == sep and (maxsplit < 0 or len(parts) < maxsplit):
            parts.append("".join(cur))
            cur = []
        else:
            cur.append(ch)
        i += 1
    parts.append("".join(cur))
    return parts


# --- (de)serialization ------------------------------------------------------


def format_record(rec: DatasetRecord) -> str:
    options = ";".join(f"{lab}:{escape(s)}" for lab, s in rec.answer_options)
    feedback = ";".join(
        f"{escape(fb.annotator_id)}:{fb.kind}:{escape(fb.text)}" for fb in rec.feedback
    )
    if rec.gold_label is not None:
        gold = f"label={rec.gold_label}"
    else:
        gold = "dist=" + ",".join(repr(float(p)) for p in rec.gold_distribution)
    return "|".join([escape(rec.record_id), escape(rec.input_text), options, feedback, gold])


def parse_record(line: str, line_number: int | None = None) -> DatasetRecord:
    try:
        fields = split_escaped(line, "|")
        if len(fields) != 5:
            raise ValueError(f"expected 5 '|'-separated fields, got {len(fields)}")
        rid, text, opts, fbs, gold = fields
        options = []
        for item in split_escaped(opts, ";"):
            lab, surface = split_escaped(item, ":", maxsplit=1)
            options.append((int(lab), unescape(surface)))
        feedback = []
        if fbs:
            for item in split_escaped(fbs, ";"):
                ann, kind, fb_text = split_escaped(item, ":", maxsplit=2)
                feedback.append(Feedback(unescape(ann), unescape(kind), unescape(fb_text)))
        key, value = split_escaped(gold, "=", maxsplit=1)
        gold_label = gold_dist = None
        if key == "label":
            gold_label = int(value)
        elif key == "dist":
            probs = [float(v) for v in split_escaped(value, ",")]
            total = math.fsum(probs)
            if abs(total - 1.0) > GOLD_SUM_TOL:
                raise ValueError(f"gold distribution sums to {total!r}")
            # values already normalised up to rounding are kept as written so files round-trip
            exact = abs(total - 1.0) <= 1e-12
            gold_dist = tuple(probs) if exact else tuple(p / total for p in probs)
        else:
            raise ValueError(f"unknown gold kind {key!r}")
        return DatasetRecord(
            record_id=unescape(rid),
            input_text=unescape(text),
            answer_options=tuple(options),
            feedback=tuple(feedback),
            gold_label=gold_label,
            gold_distribution=gold_dist,
        )
    except (ValueError, DataError) as exc:
        raise ParseError(str(exc), line_number) from exc


def load_dataset(path) -> list[DatasetRecord]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from exc
    records, seen = [], {}
    for n, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        rec = parse_record(line, n)
        if rec.record_id in seen:
            raise ParseError(
                f"duplicate record_id {rec.record_id!r} (first seen on line {seen[rec.record_id]})", n
            )
        seen[rec.record_id] = n
        records.append(rec)
    return records


def save_dataset(records: Iterable[DatasetRecord], path) -> None:
    lines = [format_record(r) + "\n" for r in records]
    Path(path).write_text("".join(lines), encoding="utf-8", newline="\n")


def split_calibration(
    records: Sequence[DatasetRecord], n: int, seed: int
) -> tuple[list[DatasetRecord], list[DatasetRecord]]:
    """Seeded choice of ``n`` calibration records; the rest form the evaluation split.

    Both splits keep file order.
    """
    if n > len(records):
        raise DataError(f"need {n} calibration records, dataset has {len(records)}")
    rng = np.random.default_rng(seed)
    chosen = set(rng.choice(len(records), size=n, replace=False).tolist()) if n else set()
    calib = [r for i, r in enumerate(records) if i in chosen]
    rest = [r for i, r in enumerate(records) if i not in chosen]
    return calib, rest
