"""Experiment orchestration: baselines, feedback + PD, SAE steering sweeps."""
from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .. import __version__
from ..checkpoint import file_sha256
from ..errors import CheckpointError, ConfigError, DataError
from ..evaluation import (
    CSV_COLUMNS,
    AnswerMapping,
    MetricsReport,
    PredictionRecord,
    evaluate,
    extract_answer_distribution,
    greedy_label,
    is_valid_greedy,
)
from ..plurdec import ConditionalSet, mean_combine, pluralistic_combine
from ..sae import SaeConfig, SaeParams, load_sae, params_checksum, save_sae, train_sae
from ..steering import ContrastivePair, SteeringVector, extract_steering_vector, steered_logits_batch
from ..tinylm import TinyLM, Tokenizer, final_logits_batch, final_residuals_batch, load_model
from ..tinylm.tokenizer import UNK_ID
from .prompts import TEMPLATES, PromptTemplate, render_prompt, sample_few_shot
from .records import DatasetRecord, load_dataset, split_calibration
from .synthetic import answer_mapping_for, load_oracle

MODES = ("zero_shot", "few_shot", "full_feedback_pd", "sae_vectors", "sae_vectors_pd")
SAE_MODES = ("sae_vectors", "sae_vectors_pd")
COMBINED = "combined"
NO_STEERING = "nst"
RESULT_COLUMNS = ("mode", "layer", "scale", "annotator") + CSV_COLUMNS


@dataclass
class ExperimentConfig:
    mode: str = "zero_shot"
    dataset: str = ""
    calibration_dataset: str = ""
    oracle: str = ""
    corpus: str = ""
    model: str = ""
    sae_dir: str = ""
    output: str = "results"
    template: str = "synthetic"
    feedback_kind: str = "coarse"
    few_shot_n: int = 3
    alpha: float = 0.2
    temperature: float = 0.4
    top_k: int = 10
    layers: list[int] = field(default_factory=list)
    scales: list[float] = field(default_factory=list)
    n_calibration: int = 50
    seed: int = 0
    positive_classes: list[int] = field(default_factory=list)
    binary_class: int | None = 1
    unsure_label: int = 2
    workers: int = 1
    train_missing_sae: bool = True
    sae_expansion: int = 8
    sae_sparsity: float = 1e-3
    sae_lr: float = 0.05
    sae_epochs: int = 500
    sae_activations: int = 2000

    def validate(self) -> "ExperimentConfig":
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {', '.join(MODES)}")
        if self.template not in TEMPLATES:
            raise ConfigError(f"unknown template {self.template!r}")
        if self.feedback_kind not in ("coarse", "granular"):
            raise ConfigError(f"unknown feedback kind {self.feedback_kind!r}")
        if self.mode in SAE_MODES and (not self.layers or not self.scales):
            raise ConfigError(f"mode {self.mode} requires layers and scales")
        if self.mode == "few_shot" and self.few_shot_n < 1:
            raise ConfigError("few_shot_n must be positive")
        if self.alpha < 0 or self.temperature <= 0 or self.top_k < 1:
            raise ConfigError("alpha must be >= 0, temperature > 0, top_k >= 1")
        if self.n_calibration < 1 and self.mode in SAE_MODES + ("few_shot",):
            raise ConfigError("n_calibration must be positive")
        if self.workers < 1:
            raise ConfigError("workers must be positive")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SweepRow:
    mode: str
    layer: int | None
    scale: float | None
    annotator: str
    report: MetricsReport
    predictions: list[PredictionRecord] = field(default_factory=list, repr=False)

    def cells(self) -> dict[str, str]:
        row = {
            "mode": self.mode,
            "layer": "" if self.layer is None else str(self.layer),
            "scale": "" if self.scale is None else repr(float(self.scale)),
            "annotator": self.annotator,
        }
        row.update(self.report.as_row())
        return row


@dataclass
class SweepResult:
    rows: list[SweepRow]
    labels: list[int]
    baseline: SweepRow | None = None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=RESULT_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in self.rows:
            w.writerow(row.cells())
        return buf.getvalue()


# --- the engine -------------------------------------------------------------


@dataclass
class Experiment:
    """Everything a run needs, already loaded into memory."""

    model: TinyLM
    tokenizer: Tokenizer
    template: PromptTemplate
    mapping: AnswerMapping
    eval_records: list[DatasetRecord]
    calib_records: list[DatasetRecord]
    saes: dict[int, SaeParams] = field(default_factory=dict)
    sae_checksums: dict[int, str] = field(default_factory=dict)
    oracle: dict[str, dict[str, np.ndarray]] | None = None

    def __post_init__(self):
        overlap = {r.record_id for r in self.eval_records} & {r.record_id for r in self.calib_records}
        if overlap:
            raise DataError(f"calibration and evaluation splits share records: {sorted(overlap)[:5]}")
        self._vectors: dict[tuple[int, str], SteeringVector] = {}

    @property
    def annotators(self) -> list[str]:
        seen: list[str] = []
        for rec in self.eval_records:
            for a in rec.annotators:
                if a not in seen:
                    seen.append(a)
        return seen

    def encode(self, record, selection=None, shots=()) -> list[int]:
        return self.tokenizer.encode(render_prompt(self.template, record, selection, shots))

    # predictions --------------------------------------------------------

    def _gold(self, rec: DatasetRecord, annotator: str | None):
        if annotator is not None and self.oracle and annotator in self.oracle.get(rec.record_id, {}):
            return {"gold_distribution": np.asarray(self.oracle[rec.record_id][annotator])}
        if rec.gold_distribution is not None:
            return {"gold_distribution": np.asarray(rec.gold_distribution)}
        return {"gold_label": rec.gold_label}

    def _predict(self, logits: np.ndarray, cfg: ExperimentConfig, annotator=None):
        out = []
        for rec, row in zip(self.eval_records, logits):
            dist = extract_answer_distribution(row, self.mapping, cfg.top_k, cfg.temperature)
            out.append(
                PredictionRecord(
                    rec.record_id,
                    greedy_label(row, self.mapping),
                    dist,
                    valid=is_valid_greedy(row, self.mapping),
                    **self._gold(rec, annotator),
                )
            )
        return out

    def _combine(self, base: list[PredictionRecord], per_ann: dict[str, list[PredictionRecord]], pd: bool, cfg):
        labels = self.mapping.labels
        out = []
        for i, rec in enumerate(self.eval_records):
            cs = ConditionalSet.of(
                base[i].predicted_distribution,
                [(a, preds[i].predicted_distribution) for a, preds in per_ann.items()],
            )
            dist = pluralistic_combine(cs, cfg.alpha) if pd else mean_combine(cs)
            out.append(
                PredictionRecord(
                    rec.record_id,
                    labels[int(np.argmax(dist))],
                    dist,
                    valid=any(preds[i].valid for preds in per_ann.values()),
                    **self._gold(rec, None),
                )
            )
        return out

    def _report(self, preds, cfg: ExperimentConfig) -> MetricsReport:
        positive = cfg.positive_classes or self.mapping.labels
        binary = cfg.binary_class if cfg.binary_class in self.mapping.labels else None
        return evaluate(preds, positive, binary, labels=self.mapping.labels)

    def _row(self, mode, layer, scale, annotator, preds, cfg) -> SweepRow:
        return SweepRow(mode, layer, scale, annotator, self._report(preds, cfg), preds)

    def zero_shot_predictions(self, cfg) -> list[PredictionRecord]:
        logits = final_logits_batch(self.model, [self.encode(r) for r in self.eval_records])
        return self._predict(logits, cfg)

    def feedback_predictions(self, annotator: str, cfg) -> list[PredictionRecord]:
        seqs = [self.encode(r, (annotator, cfg.feedback_kind)) for r in self.eval_records]
        return self._predict(final_logits_batch(self.model, seqs), cfg, annotator)

    # steering -----------------------------------------------------------

    def contrastive_pairs(self, annotator: str, kind: str) -> list[ContrastivePair]:
        return [
            ContrastivePair(tuple(self.encode(r, (annotator, kind))), tuple(self.encode(r)), annotator)
            for r in self.calib_records
            if r.feedback_text(annotator, kind) is not None
        ]

    def steering_vector(self, layer: int, annotator: str, kind: str) -> SteeringVector:
        key = (layer, annotator)
        if key not in self._vectors:
            if layer not in self.saes:
                raise ConfigError(f"no SAE available for layer {layer}")
            pairs = self.contrastive_pairs(annotator, kind)
            if not pairs:
                raise DataError(f"no calibration records carry {kind} feedback from {annotator!r}")
            self._vectors[key] = extract_steering_vector(
                self.model, self.saes[layer], pairs, layer, self.sae_checksums.get(layer, "")
            )
        return self._vectors[key]

    def steered_predictions(self, layer, scale, annotator, cfg) -> list[PredictionRecord]:
        sv = self.steering_vector(layer, annotator, cfg.feedback_kind)
        seqs = [self.encode(r) for r in self.eval_records]
        logits = steered_logits_batch(self.model, self.saes[layer], sv, scale, seqs)
        return self._predict(logits, cfg, annotator)

    # modes --------------------------------------------------------------

    def run(self, cfg: ExperimentConfig) -> SweepResult:
        cfg.validate()
        annotators = self.annotators
        labels = self.mapping.labels
        base = self.zero_shot_predictions(cfg)
        baseline = self._row("zero_shot", None, None, NO_STEERING, base, cfg)
        mode = cfg.mode
        rows: list[SweepRow] = []

        if mode == "zero_shot":
            rows.append(self._row(mode, None, None, COMBINED, base, cfg))
        elif mode == "few_shot":
            seqs = [
                self.encode(r, None, sample_few_shot(self.calib_records, r, cfg.few_shot_n, cfg.seed))
                for r in self.eval_records
            ]
            preds = self._predict(final_logits_batch(self.model, seqs), cfg)
            rows.append(self._row(mode, None, None, COMBINED, preds, cfg))
        elif mode == "full_feedback_pd":
            if not annotators:
                raise DataError("full_feedback_pd needs records with feedback")
            per_ann = dict(
                zip(annotators, self._map(cfg, [lambda a=a: self.feedback_predictions(a, cfg) for a in annotators]))
            )
            for a in annotators:
                rows.append(self._row(mode, None, None, a, per_ann[a], cfg))
            rows.append(self._row(mode, None, None, COMBINED, self._combine(base, per_ann, True, cfg), cfg))
        else:
            if not annotators:
                raise DataError(f"{mode} needs records with feedback")
            for layer in cfg.layers:
                for a in annotators:
                    self.steering_vector(layer, a, cfg.feedback_kind)
            cells = [(l, s, a) for l in cfg.layers for s in cfg.scales for a in annotators]
            results = self._map(
                cfg, [lambda c=c: self.steered_predictions(c[0], c[1], c[2], cfg) for c in cells]
            )
            by_cell = dict(zip(cells, results))
            for layer in cfg.layers:
                for scale in cfg.scales:
                    per_ann = {a: by_cell[(layer, scale, a)] for a in annotators}
                    for a in annotators:
                        rows.append(self._row(mode, layer, scale, a, per_ann[a], cfg))
                    combined = self._combine(base, per_ann, mode == "sae_vectors_pd", cfg)
                    rows.append(self._row(mode, layer, scale, COMBINED, combined, cfg))
        return SweepResult(rows, labels, baseline)

    @staticmethod
    def _map(cfg: ExperimentConfig, jobs):
        if cfg.workers == 1:
            return [job() for job in jobs]
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            return list(pool.map(lambda job: job(), jobs))


# --- reports ----------------------------------------------------------------


def label_distribution_report(result: SweepResult) -> str:
    """Predicted-label histogram per row, no-steering baseline first."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["mode", "layer", "scale", "annotator"] + [f"label_{l}" for l in result.labels] + ["total"])
    rows = ([result.baseline] if result.baseline is not None else []) + list(result.rows)
    for row in rows:
        counts = row.report.label_counts
        cells = row.cells()
        w.writerow(
            [cells["mode"], cells["layer"], cells["scale"], cells["annotator"]]
            + [counts.get(l, 0) for l in result.labels]
            + [row.report.sample_count]
        )
    return buf.getvalue()


def predictions_csv(result: SweepResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(
        ["mode", "layer", "scale", "annotator", "record_id", "predicted_label", "valid"]
        + [f"p_{l}" for l in result.labels]
    )
    rows = ([result.baseline] if result.baseline is not None else []) + list(result.rows)
    for row in rows:
        c = row.cells()
        for p in row.predictions:
            probs = [f"{x:.10g}" for x in p.predicted_distribution]
            w.writerow([c["mode"], c["layer"], c["scale"], c["annotator"], p.record_id, p.predicted_label, int(p.valid)] + probs)
    return buf.getvalue()


def histograms_from_predictions(text: str) -> str:
    """Rebuild labels.csv from a predictions.csv."""
    reader = csv.DictReader(io.StringIO(text))
    labels = {int(name[2:]) for name in reader.fieldnames or () if name.startswith("p_")}
    order: list[tuple] = []
    counts: dict[tuple, dict[int, int]] = {}
    for r in reader:
        key = (r["mode"], r["layer"], r["scale"], r["annotator"])
        if key not in counts:
            order.append(key)
            counts[key] = {}
        lab = int(r["predicted_label"])
        labels.add(lab)
        counts[key][lab] = counts[key].get(lab, 0) + 1
    labs = sorted(labels)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["mode", "layer", "scale", "annotator"] + [f"label_{l}" for l in labs] + ["total"])
    for key in order:
        c = counts[key]
        w.writerow(list(key) + [c.get(l, 0) for l in labs] + [sum(c.values())])
    return buf.getvalue()


# --- building an Experiment from files -----------------------------------------


def sae_path(sae_dir, layer: int) -> Path:
    return Path(sae_dir) / f"sae_layer{layer}.ckpt"


def load_corpus_prompts(path, tokenizer: Tokenizer) -> list[list[int]]:
    """Corpus lines with their final (answer) token dropped."""
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        ids = tokenizer.encode(line)
        if len(ids) >= 2:
            out.append(ids[:-1])
    return out


def train_layer_sae(model: TinyLM, prompts, layer: int, cfg: ExperimentConfig) -> tuple[SaeParams, SaeConfig]:
    rng = np.random.default_rng(cfg.seed)
    n = min(cfg.sae_activations, len(prompts))
    idx = np.sort(rng.choice(len(prompts), size=n, replace=False))
    acts = final_residuals_batch(model, [prompts[i] for i in idx], layer)
    sae_cfg = SaeConfig(
        input_dim=model.config.d_model,
        expansion=cfg.sae_expansion,
        sparsity_coeff=cfg.sae_sparsity,
        lr=cfg.sae_lr,
        epochs=cfg.sae_epochs,
        seed=cfg.seed + layer,
    )
    return train_sae(acts, sae_cfg), sae_cfg


def build_experiment(cfg: ExperimentConfig, layers: Sequence[int] = ()) -> Experiment:
    cfg.validate()
    if not cfg.model:
        raise ConfigError("a model checkpoint is required")
    model = load_model(cfg.model)
    if not model.vocab:
        raise CheckpointError("model checkpoint carries no vocabulary")
    tokenizer = Tokenizer(model.vocab)
    if not cfg.dataset:
        raise ConfigError("a dataset path is required")
    records = load_dataset(cfg.dataset)
    if not records:
        raise DataError(f"dataset {cfg.dataset} is empty")
    need_calib = cfg.mode in SAE_MODES + ("few_shot",)
    if cfg.calibration_dataset:
        pool = load_dataset(cfg.calibration_dataset)
        calib = split_calibration(pool, min(cfg.n_calibration, len(pool)), cfg.seed)[0] if need_calib else []
        eval_records = records
    elif need_calib:
        calib, eval_records = split_calibration(records, cfg.n_calibration, cfg.seed)
    else:
        calib, eval_records = [], records
    if cfg.template == "synthetic":
        mapping = answer_mapping_for(tokenizer)
    else:
        mapping = mapping_from_options(records[0], tokenizer, cfg.unsure_label)
    oracle = load_oracle(cfg.oracle) if cfg.oracle else None

    saes, sums = {}, {}
    if cfg.mode in SAE_MODES:
        prompts = None
        for layer in layers or cfg.layers:
            path = sae_path(cfg.sae_dir or ".", layer)
            if path.exists():
                saes[layer] = load_sae(path)[0]
            elif cfg.train_missing_sae:
                if not cfg.corpus:
                    raise ConfigError(f"no SAE for layer {layer} and no corpus to train one")
                if prompts is None:
                    prompts = load_corpus_prompts(cfg.corpus, tokenizer)
                params, sae_cfg = train_layer_sae(model, prompts, layer, cfg)
                if cfg.sae_dir:
                    Path(cfg.sae_dir).mkdir(parents=True, exist_ok=True)
                    save_sae(params, sae_cfg, path, layer)
                saes[layer] = params
            else:
                raise ConfigError(f"missing SAE checkpoint {path} and training is disabled")
            sums[layer] = params_checksum(saes[layer])
    return Experiment(
        model=model,
        tokenizer=tokenizer,
        template=TEMPLATES[cfg.template],
        mapping=mapping,
        eval_records=eval_records,
        calib_records=calib,
        saes=saes,
        sae_checksums=sums,
        oracle=oracle,
    )


def mapping_from_options(record: DatasetRecord, tokenizer: Tokenizer, unsure_label: int) -> AnswerMapping:
    choices = []
    for lab, surface in record.answer_options:
        ids = {tokenizer.token_id(v) for v in (surface, surface.lower(), surface.capitalize())} - {UNK_ID}
        if not ids:
            raise DataError(f"answer surface {surface!r} is not in the model vocabulary")
        choices.append((lab, frozenset(ids)))
    return AnswerMapping(tuple(choices), unsure_label)


def run_experiment(cfg: ExperimentConfig) -> SweepResult:
    return build_experiment(cfg).run(cfg)


def layer_sweep(cfg: ExperimentConfig) -> SweepResult:
    """Cross product of layers x scales x annotators, written to ``cfg.output``."""
    if cfg.mode not in SAE_MODES:
        raise ConfigError("layer_sweep needs an SAE mode")
    result = run_experiment(cfg)
    write_outputs(result, cfg)
    return result


def write_outputs(result: SweepResult, cfg: ExperimentConfig) -> dict[str, Path]:
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "results": out / "results.csv",
        "labels": out / "labels.csv",
        "predictions": out / "predictions.csv",
        "manifest": out / "run_manifest.json",
    }
    paths["results"].write_text(result.to_csv(), encoding="utf-8")
    paths["labels"].write_text(label_distribution_report(result), encoding="utf-8")
    paths["predictions"].write_text(predictions_csv(result), encoding="utf-8")
    paths["manifest"].write_text(json.dumps(manifest(cfg), sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return paths


def manifest(cfg: ExperimentConfig) -> dict:
    inputs = {}
    for name in ("dataset", "calibration_dataset", "oracle", "corpus", "model"):
        path = getattr(cfg, name)
        if path and Path(path).is_file():
            inputs[name] = {"path": path, "sha256": file_sha256(path)}
    if cfg.sae_dir:
        for layer in cfg.layers:
            p = sae_path(cfg.sae_dir, layer)
            if p.is_file():
                inputs[f"sae_layer{layer}"] = {"path": str(p), "sha256": file_sha256(p)}
    return {"version": __version__, "config": cfg.to_dict(), "inputs": inputs}


def coerce_config(values: dict) -> ExperimentConfig:
    """Build a config from string-ish values (config files, CLI flags)."""
    kwargs = {}
    known = {f.name: f for f in fields(ExperimentConfig)}
    for key, raw in values.items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        default = getattr(ExperimentConfig(), key)
        try:
            kwargs[key] = _coerce(key, raw, default)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return ExperimentConfig(**kwargs)


def _coerce(key, raw, default):
    if not isinstance(raw, str):
        return raw
    if key in ("layers", "positive_classes"):
        return [int(x) for x in raw.split(",") if x.strip()]
    if key == "scales":
        return [float(x) for x in raw.split(",") if x.strip()]
    if key == "binary_class":
        return None if raw.strip().lower() in ("", "none") else int(raw)
    if isinstance(default, bool):
        if raw.strip().lower() in ("1", "true", "yes", "on"):
            return True
        if raw.strip().lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(raw)
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw
