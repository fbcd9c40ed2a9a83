"""Synthetic conditional-answer task with known generating distributions.

Each record's input is a pair of context words ``(left_i, right_j)``.  The
no-feedback answer distribution over {no, yes, unsure} is
``softmax(L[i] + R[j])``.  Annotator k's feedback adds a fixed bias of
``bias_strength`` to the logit of its favoured label (k mod 3), which flips
the majority wherever the base margin is smaller than the bias.  Granular
feedback carries the annotator's name plus an uninformative note word and
shifts the distribution exactly as the coarse feedback does.

The record's gold distribution is the population opinion: the mean of the
annotators' conditional distributions.  The exact per-annotator conditionals
are kept in ``oracle`` and are the reference for directional checks.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import DataError, InvalidArgumentError, ParseError
from ..evaluation import AnswerMapping
from ..tinylm.tokenizer import Tokenizer
from .prompts import SYNTHETIC_TEMPLATE, PromptTemplate, render_prompt
from .records import DatasetRecord, Feedback, escape, save_dataset, split_escaped, unescape

ANSWERS = ((0, "no"), (1, "yes"), (2, "unsure"))
UNSURE_LABEL = 2
ANNOTATOR_NAMES = ("hr", "tos", "cc", "edu", "med", "fin")
STANCES = ("lenient", "strict", "cautious", "open", "firm", "wary")
NOTE_WORDS = ("n0", "n1", "n2", "n3")
N_LEFT = 6
N_RIGHT = 6
BASE = "base"


@dataclass
class SyntheticTask:
    tokenizer: Tokenizer
    template: PromptTemplate
    corpus_texts: list[str]
    corpus: list[list[int]]
    train: list[DatasetRecord]
    test: list[DatasetRecord]
    annotators: list[str]
    # record_id -> {"base" | annotator_id: generating distribution}
    oracle: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    # (condition, answer label) for every corpus sequence, condition as in oracle
    corpus_answers: list[tuple[str, str, int]] = field(default_factory=list)

    @property
    def answer_mapping(self) -> AnswerMapping:
        return answer_mapping_for(self.tokenizer)


def answer_mapping_for(tokenizer: Tokenizer) -> AnswerMapping:
    return AnswerMapping(
        choices=tuple((lab, frozenset({tokenizer.token_id(s)})) for lab, s in ANSWERS),
        unsure_label=UNSURE_LABEL,
    )


def _softmax(x):
    e = np.exp(x - x.max())
    return e / e.sum()


def _vocab_texts(n_annotators: int) -> list[str]:
    words = ["Policy:", "Note:", "Context:", "Answer:"]
    words += [f"a{i}" for i in range(N_LEFT)] + [f"b{j}" for j in range(N_RIGHT)]
    words += [s for _, s in ANSWERS]
    words += list(ANNOTATOR_NAMES[:n_annotators]) + list(STANCES[:n_annotators])
    words += ["notes"] + list(NOTE_WORDS)
    return [" ".join(words)]


def generate_synthetic_task(
    seed: int,
    n_train: int,
    n_test: int,
    n_annotators: int = 3,
    bias_strength: float = 2.5,
    base_scale: float = 1.0,
    vocab_limit: int | None = 64,
) -> SyntheticTask:
    if n_annotators < 2:
        raise InvalidArgumentError("need at least two annotators")
    if n_annotators > len(ANNOTATOR_NAMES):
        raise InvalidArgumentError(f"at most {len(ANNOTATOR_NAMES)} annotators supported")
    if n_train < 1 or n_test < 1:
        raise InvalidArgumentError("n_train and n_test must be positive")

    rng = np.random.default_rng(seed)
    n_labels = len(ANSWERS)
    left = rng.normal(0.0, base_scale, size=(N_LEFT, n_labels))
    right = rng.normal(0.0, base_scale, size=(N_RIGHT, n_labels))
    annotators = list(ANNOTATOR_NAMES[:n_annotators])
    biases = {}
    for k, ann in enumerate(annotators):
        b = np.zeros(n_labels)
        b[k % n_labels] = bias_strength
        biases[ann] = b

    tokenizer = Tokenizer.build(_vocab_texts(n_annotators), max_size=vocab_limit)
    template = SYNTHETIC_TEMPLATE

    train, test, oracle = [], [], {}
    for n in range(n_train + n_test):
        i, j = int(rng.integers(N_LEFT)), int(rng.integers(N_RIGHT))
        base_logits = left[i] + right[j]
        dists = {BASE: _softmax(base_logits)}
        feedback = []
        for k, ann in enumerate(annotators):
            dists[ann] = _softmax(base_logits + biases[ann])
            note = NOTE_WORDS[int(rng.integers(len(NOTE_WORDS)))]
            feedback.append(Feedback(ann, "coarse", f"{ann} {STANCES[k]}"))
            feedback.append(Feedback(ann, "granular", f"{ann} notes {note}"))
        gold = np.mean([dists[a] for a in annotators], axis=0)
        gold = gold / gold.sum()
        rec = DatasetRecord(
            record_id=f"syn-{n:05d}",
            input_text=f"a{i} b{j}",
            answer_options=ANSWERS,
            feedback=tuple(feedback),
            gold_distribution=tuple(float(p) for p in gold),
        )
        oracle[rec.record_id] = dists
        (train if n < n_train else test).append(rec)

    corpus_texts, corpus, corpus_answers = [], [], []
    for rec in train:
        conditions = [(BASE, None)]
        for ann in annotators:
            conditions.append((ann, (ann, "coarse")))
            conditions.append((ann, (ann, "granular")))
        for cond, selection in conditions:
            p = oracle[rec.record_id][cond]
            label = int(rng.choice(n_labels, p=p))
            text = render_prompt(template, rec, selection) + ANSWERS[label][1]
            corpus_texts.append(text)
            corpus.append(tokenizer.encode(text))
            corpus_answers.append((rec.record_id, cond, label))

    return SyntheticTask(
        tokenizer=tokenizer,
        template=template,
        corpus_texts=corpus_texts,
        corpus=corpus,
        train=train,
        test=test,
        annotators=annotators,
        oracle=oracle,
        corpus_answers=corpus_answers,
    )


# --- files ------------------------------------------------------------------

TRAIN_FILE = "train.records"
TEST_FILE = "test.records"
CORPUS_FILE = "corpus.txt"
VOCAB_FILE = "vocab.txt"
ORACLE_FILE = "oracle.records"


def write_task(task: SyntheticTask, outdir) -> dict[str, Path]:
    """Write records, corpus, vocabulary and oracle distributions to ``outdir``.

    The oracle file has one ``record_id|condition|p1,p2,...`` line per
    (record, condition), condition being ``base`` or an annotator id.
    """
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {name: out / name for name in (TRAIN_FILE, TEST_FILE, CORPUS_FILE, VOCAB_FILE, ORACLE_FILE)}
    save_dataset(task.train, paths[TRAIN_FILE])
    save_dataset(task.test, paths[TEST_FILE])
    paths[CORPUS_FILE].write_text("".join(t + "\n" for t in task.corpus_texts), encoding="utf-8")
    paths[VOCAB_FILE].write_text("".join(w + "\n" for w in task.tokenizer.vocab), encoding="utf-8")
    lines = []
    for rid, dists in task.oracle.items():
        for cond, p in dists.items():
            probs = ",".join(repr(float(x)) for x in p)
            lines.append(f"{escape(rid)}|{escape(cond)}|{probs}\n")
    paths[ORACLE_FILE].write_text("".join(lines), encoding="utf-8")
    return paths


def _read_text(path, what: str) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot read {what} {path}: {exc}") from exc


def load_oracle(path) -> dict[str, dict[str, np.ndarray]]:
    oracle: dict[str, dict[str, np.ndarray]] = {}
    for n, line in enumerate(_read_text(path, "oracle").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rid, cond, probs = split_escaped(line, "|")
            dist = np.array([float(x) for x in probs.split(",")])
        except ValueError as exc:
            raise ParseError(str(exc), n) from exc
        oracle.setdefault(unescape(rid), {})[unescape(cond)] = dist
    return oracle


def load_vocab(path) -> Tokenizer:
    words = _read_text(path, "vocabulary").split("\n")
    if words and words[-1] == "":
        words.pop()
    try:
        return Tokenizer(words)
    except InvalidArgumentError as exc:
        raise DataError(f"{path}: {exc}") from exc
