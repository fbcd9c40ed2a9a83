"""Prompt templates.

A template body uses the placeholders ``{input}``, ``{feedback_coarse}``,
``{feedback_fine}`` and ``{output}``.  Text wrapped in ``[[ ... ]]`` is an
optional segment: it is dropped entirely when every placeholder inside it
renders empty, so a zero-shot prompt carries no feedback scaffolding.  The
body must end with ``:{output}``; the model's answer is read at the token
right after that colon.
"""
from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..errors import TemplateError
from .records import DatasetRecord

PLACEHOLDERS = ("input", "feedback_coarse", "feedback_fine", "output")
_FIELD_RE = re.compile(r"\{([^{}]*)\}")
_SEGMENT_RE = re.compile(r"\[\[(.*?)\]\]", re.S)

FEEDBACK_SLOT = {"coarse": "feedback_coarse", "granular": "feedback_fine"}


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    body: str

    def __post_init__(self):
        for fname in _FIELD_RE.findall(self.body):
            if fname not in PLACEHOLDERS:
                raise TemplateError(f"template {self.name!r}: unknown placeholder {{{fname}}}")
        if not self.body.endswith(":{output}"):
            raise TemplateError(
                f"template {self.name!r} must end with ':{{output}}' (no space after the colon)"
            )

    def fill(self, values: dict[str, str]) -> str:
        def segment(m):
            inner = m.group(1)
            names = _FIELD_RE.findall(inner)
            if names and all(not values.get(n) for n in names):
                return ""
            return inner

        text = _SEGMENT_RE.sub(segment, self.body)
        return _FIELD_RE.sub(lambda m: values.get(m.group(1), ""), text)


# Used by the synthetic task.
SYNTHETIC_TEMPLATE = PromptTemplate(
    name="synthetic",
    body="[[Policy: {feedback_coarse} ]][[Note: {feedback_fine} ]]Context: {input} Answer:{output}",
)

# Layouts for the real-data tasks: misinformation, hate speech, grounded QA.
MISLC_TEMPLATE = PromptTemplate(
    name="mislc",
    body=(
        "[[From a legal perspective, misinformation can be problematic due to: {feedback_coarse}\n]]"
        "Claim: {input}\nDoes this claim contain misinformation? Answer Yes, No, or Unsure.\n\n"
        "[[Thinking: {feedback_fine}\n]]Answer:{output}"
    ),
)
LHS_TEMPLATE = PromptTemplate(
    name="lhs",
    body=(
        "[[Hate speech policy: {feedback_coarse}\n]]"
        "Post: {input}\nDoes this post violate the above hate speech policy? Answer Yes, No, or Unsure.\n\n"
        "[[Thinking: {feedback_fine}\n]]Answer:{output}"
    ),
)
GQA_TEMPLATE = PromptTemplate(
    name="gqa",
    body=(
        "Respond to the following instruction[[ (with the help of a passage. Passage: {feedback_fine})]]"
        "\n\n{input}\n\nAnswer:{output}"
    ),
)

TEMPLATES = {t.name: t for t in (SYNTHETIC_TEMPLATE, MISLC_TEMPLATE, LHS_TEMPLATE, GQA_TEMPLATE)}


def render_prompt(
    template: PromptTemplate,
    record: DatasetRecord,
    feedback_selection: tuple[str, str] | None = None,
    few_shot_examples: Sequence[tuple[DatasetRecord, int]] = (),
) -> str:
    """Render ``record`` as a query ending in ``:`` with the answer slot empty.

    ``feedback_selection`` is ``(annotator_id, kind)``; ``few_shot_examples``
    are ``(record, label)`` pairs rendered, answered, ahead of the query.
    """
    values = {"input": record.input_text, "output": ""}
    if feedback_selection is not None:
        annotator_id, kind = feedback_selection
        if kind not in FEEDBACK_SLOT:
            raise TemplateError(f"unknown feedback kind {kind!r}")
        text = record.feedback_text(annotator_id, kind)
        if text is None:
            raise TemplateError(f"{record.record_id}: no {kind} feedback from {annotator_id!r}")
        values[FEEDBACK_SLOT[kind]] = text
    shots = [
        template.fill({"input": ex.input_text, "output": ex.surface(label)})
        for ex, label in few_shot_examples
    ]
    return "\n".join(shots + [template.fill(values)])


def stable_hash(text: str) -> int:
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")


def sample_few_shot(
    pool: Sequence[DatasetRecord], record: DatasetRecord, n: int, seed: int
) -> list[tuple[DatasetRecord, int]]:
    """Per-record reproducible draw of ``n`` labelled examples from ``pool``."""
    candidates = [r for r in pool if r.record_id != record.record_id]
    if n > len(candidates):
        raise TemplateError(f"few-shot pool has {len(candidates)} records, need {n}")
    rng = np.random.default_rng((int(seed) % 2**64) ^ stable_hash(record.record_id))
    idx = rng.choice(len(candidates), size=n, replace=False)
    return [(candidates[i], candidates[i].gold_majority()) for i in idx]
