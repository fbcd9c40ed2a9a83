"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 checkpoint error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    InvalidArgumentError,
    TemplateError,
)

log = logging.getLogger("pluralign")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_CHECKPOINT = 0, 2, 3, 4


def _read_config_file(path) -> dict:
    """``key = value`` lines (``#`` comments) or a JSON object for ``.json`` files."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if str(path).endswith(".json"):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return {k: (",".join(map(str, v)) if isinstance(v, list) else v) for k, v in data.items()}
    out = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key=value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _experiment_args(parser: argparse.ArgumentParser) -> None:
    from .harness.experiment import ExperimentConfig

    parser.add_argument("--config", help="key=value or JSON config file; flags override it")
    for f in fields(ExperimentConfig):
        flags = [f"--{f.name}"]
        if "_" in f.name:
            flags.append(f"--{f.name.replace('_', '-')}")
        parser.add_argument(*flags, dest=f.name, default=argparse.SUPPRESS, metavar=f.name.upper())


def _resolve_config(args, mode_default=None):
    from .harness.experiment import coerce_config

    values = _read_config_file(args.config) if getattr(args, "config", None) else {}
    if mode_default and "mode" not in values:
        values["mode"] = mode_default
    from .harness.experiment import ExperimentConfig

    for f in fields(ExperimentConfig):
        if hasattr(args, f.name):
            values[f.name] = getattr(args, f.name)
    return coerce_config(values).validate()


# --- subcommands --------------------------------------------------------------


def cmd_gen_data(args) -> int:
    from .harness.synthetic import generate_synthetic_task, write_task

    task = generate_synthetic_task(args.seed, args.n_train, args.n_test, args.n_annotators)
    paths = write_task(task, args.out)
    for name, p in paths.items():
        print(f"{name}\t{p}")
    return EXIT_OK


def cmd_train_lm(args) -> int:
    from .harness.synthetic import load_vocab
    from .tinylm import ModelConfig, init_model, mean_cross_entropy, save_model, train_lm

    data = Path(args.data)
    tokenizer = load_vocab(args.vocab or data / "vocab.txt")
    corpus_path = Path(args.corpus or data / "corpus.txt")
    try:
        lines = corpus_path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read corpus {corpus_path}: {exc}") from exc
    corpus = [tokenizer.encode(l) for l in lines if l.strip()]
    cfg = ModelConfig(
        vocab_size=args.vocab_size,
        d_model=args.d_model,
        n_layers=args.n_layers,
        n_heads=args.n_heads,
        d_ff=args.d_ff,
        max_seq_len=args.max_seq_len,
        seed=args.seed,
    )
    if len(tokenizer) > cfg.vocab_size:
        raise ConfigError(f"vocabulary of {len(tokenizer)} exceeds vocab_size {cfg.vocab_size}")
    model = init_model(cfg)
    model.vocab = tokenizer.vocab
    ce0 = mean_cross_entropy(model, corpus)
    train_lm(model, corpus, args.epochs, args.lr, args.seed, batch_size=args.batch_size)
    ce1 = mean_cross_entropy(model, corpus)
    digest = save_model(model, args.out)
    print(f"cross_entropy_init={ce0:.6f}\ncross_entropy_final={ce1:.6f}\nsha256={digest}")
    return EXIT_OK


def cmd_train_sae(args) -> int:
    from .harness.experiment import ExperimentConfig, load_corpus_prompts, sae_path, train_layer_sae
    from .sae import sae_loss, save_sae, sparsity_fraction
    from .tinylm import Tokenizer, final_residuals_batch, load_model

    model = load_model(args.model)
    if not model.vocab:
        raise CheckpointError("model checkpoint carries no vocabulary")
    prompts = load_corpus_prompts(args.corpus, Tokenizer(model.vocab))
    cfg = ExperimentConfig(
        seed=args.seed,
        sae_expansion=args.expansion,
        sae_sparsity=args.sparsity,
        sae_lr=args.lr,
        sae_epochs=args.epochs,
        sae_activations=args.activations,
    )
    Path(args.out_dir).mkdir(parents=True, exist_ok=True)
    for layer in _int_list(args.layers):
        params, sae_cfg = train_layer_sae(model, prompts, layer, cfg)
        path = sae_path(args.out_dir, layer)
        digest = save_sae(params, sae_cfg, path, layer)
        acts = final_residuals_batch(model, prompts[: min(len(prompts), 512)], layer)
        mse, l1, _ = sae_loss(params, acts, sae_cfg.sparsity_coeff)
        print(
            f"layer={layer}\tpath={path}\tmse={mse:.6g}\tl1={l1:.6g}"
            f"\tzero_fraction={sparsity_fraction(params, acts):.4f}\tsha256={digest}"
        )
    return EXIT_OK


def cmd_extract_vectors(args) -> int:
    from .harness.experiment import ExperimentConfig, build_experiment
    from .steering import save_vector

    cfg = ExperimentConfig(
        mode="sae_vectors",
        dataset=args.dataset,
        model=args.model,
        sae_dir=args.sae_dir,
        corpus=args.corpus or "",
        layers=_int_list(args.layers),
        scales=[1.0],
        n_calibration=args.n_calibration,
        feedback_kind=args.feedback_kind,
        seed=args.seed,
        train_missing_sae=bool(args.corpus),
    )
    exp = build_experiment(cfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for layer in cfg.layers:
        for ann in exp.annotators:
            sv = exp.steering_vector(layer, ann, cfg.feedback_kind)
            path = out / f"vector_{ann}_layer{layer}.json"
            save_vector(sv, path)
            print(f"{ann}\tlayer={layer}\tn_pairs={sv.n_pairs}\tnonzero={int(np.count_nonzero(sv.vector))}\t{path}")
    return EXIT_OK


def cmd_run(args, sweep: bool = False) -> int:
    from .harness.experiment import SAE_MODES, run_experiment, write_outputs

    cfg = _resolve_config(args, "sae_vectors" if sweep else None)
    if sweep and cfg.mode not in SAE_MODES:
        raise ConfigError("sweep requires mode sae_vectors or sae_vectors_pd")
    result = run_experiment(cfg)
    paths = write_outputs(result, cfg)
    sys.stdout.write(result.to_csv())
    for name, p in paths.items():
        log.info("wrote %s: %s", name, p)
    return EXIT_OK


def cmd_report(args) -> int:
    from .harness.experiment import histograms_from_predictions

    d = Path(args.results_dir)
    try:
        preds = (d / "predictions.csv").read_text(encoding="utf-8")
        results = (d / "results.csv").read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(str(exc)) from exc
    labels = histograms_from_predictions(preds)
    (Path(args.out) if args.out else d / "labels.csv").write_text(labels, encoding="utf-8")
    sys.stdout.write(labels)
    metric = args.metric
    lower_better = metric == "mean_js"
    best: dict[str, tuple[float, dict]] = {}
    for row in csv.DictReader(io.StringIO(results)):
        if not row.get(metric):
            continue
        v = float(row[metric])
        key = row["annotator"]
        if key not in best or (v < best[key][0] if lower_better else v > best[key][0]):
            best[key] = (v, row)
    for ann, (v, row) in best.items():
        print(f"best[{ann}] {metric}={v:.6g} mode={row['mode']} layer={row['layer']} scale={row['scale']}")
    return EXIT_OK


def _int_list(text) -> list[int]:
    try:
        return [int(x) for x in str(text).split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pluralign", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the synthetic task")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n-train", type=int, default=2000)
    g.add_argument("--n-test", type=int, default=200)
    g.add_argument("--n-annotators", type=int, default=3)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train-lm", help="train the tiny causal LM on a corpus")
    t.add_argument("--data", default=".", help="directory holding corpus.txt and vocab.txt")
    t.add_argument("--corpus")
    t.add_argument("--vocab")
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int, default=5)
    t.add_argument("--lr", type=float, default=0.1)
    t.add_argument("--batch-size", type=int, default=32)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--vocab-size", type=int, default=64)
    t.add_argument("--d-model", type=int, default=64)
    t.add_argument("--n-layers", type=int, default=4)
    t.add_argument("--n-heads", type=int, default=4)
    t.add_argument("--d-ff", type=int, default=256)
    t.add_argument("--max-seq-len", type=int, default=64)
    t.set_defaults(func=cmd_train_lm)

    s = sub.add_parser("train-sae", help="train one SAE per layer on LM residuals")
    s.add_argument("--model", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--layers", required=True, help="comma-separated layer indices")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--expansion", type=int, default=8)
    s.add_argument("--sparsity", type=float, default=1e-3)
    s.add_argument("--lr", type=float, default=0.05)
    s.add_argument("--epochs", type=int, default=500)
    s.add_argument("--activations", type=int, default=2000)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_train_sae)

    e = sub.add_parser("extract-vectors", help="write per-annotator steering vectors")
    e.add_argument("--model", required=True)
    e.add_argument("--dataset", required=True, help="calibration records")
    e.add_argument("--sae-dir", required=True)
    e.add_argument("--corpus", help="train missing SAEs from this corpus")
    e.add_argument("--layers", required=True)
    e.add_argument("--n-calibration", type=int, default=50)
    e.add_argument("--feedback-kind", default="coarse", choices=["coarse", "granular"])
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out-dir", required=True)
    e.set_defaults(func=cmd_extract_vectors)

    r = sub.add_parser("run", help="run one experiment mode")
    _experiment_args(r)
    r.set_defaults(func=cmd_run)

    w = sub.add_parser("sweep", help="layer x scale x annotator sweep of an SAE mode")
    _experiment_args(w)
    w.set_defaults(func=lambda a: cmd_run(a, sweep=True))

    rp = sub.add_parser("report", help="rebuild label histograms and summarise results")
    rp.add_argument("--results-dir", required=True)
    rp.add_argument("--out")
    rp.add_argument("--metric", default="mean_js", choices=["mean_js", "ma_f1", "mi_f1", "bin_f1"])
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (ConfigError, TemplateError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except InvalidArgumentError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
