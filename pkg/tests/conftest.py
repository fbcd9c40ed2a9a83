import time
from types import SimpleNamespace

import pytest

from pluralign.harness.experiment import ExperimentConfig, train_layer_sae
from pluralign.harness.synthetic import generate_synthetic_task, write_task
from pluralign.tinylm import ModelConfig, init_model, mean_cross_entropy, save_model, train_lm

LM_EPOCHS = 5
LM_LR = 0.1

_criteria: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    if rep.when == "call" or (rep.when == "setup" and rep.failed):
        _criteria[n] = ("PASS" if rep.passed else "FAIL", title)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        status, title = _criteria[n]
        terminalreporter.write_line(f"[{status}] criterion {n:2d}: {title}")


@pytest.fixture(scope="session")
def task():
    return generate_synthetic_task(seed=0, n_train=2000, n_test=200)


@pytest.fixture(scope="session")
def lm(task):
    """The desk-scale model trained once on the synthetic corpus."""
    t0 = time.perf_counter()
    model = init_model(ModelConfig(seed=0))
    model.vocab = task.tokenizer.vocab
    ce_init = mean_cross_entropy(model, task.corpus)
    train_lm(model, task.corpus, epochs=LM_EPOCHS, lr=LM_LR, seed=0)
    ce_final = mean_cross_entropy(model, task.corpus)
    return SimpleNamespace(
        model=model, ce_init=ce_init, ce_final=ce_final, seconds=time.perf_counter() - t0
    )


@pytest.fixture(scope="session")
def corpus_prompts(task):
    return [ids[:-1] for ids in task.corpus]


@pytest.fixture(scope="session")
def saes(lm, corpus_prompts):
    """Lazily trained SAE per layer, with the wall time each one took."""
    cache = {}

    def get(layer):
        if layer not in cache:
            t0 = time.perf_counter()
            params, cfg = train_layer_sae(lm.model, corpus_prompts, layer, ExperimentConfig())
            cache[layer] = SimpleNamespace(params=params, config=cfg, seconds=time.perf_counter() - t0)
        return cache[layer]

    return get


@pytest.fixture(scope="session")
def task_dir(task, lm, tmp_path_factory):
    d = tmp_path_factory.mktemp("synthetic")
    write_task(task, d)
    save_model(lm.model, d / "lm.ckpt")
    return d


@pytest.fixture(scope="session")
def make_experiment(task, lm, saes):
    """In-memory Experiment over the synthetic test split (50 calibration records)."""
    from pluralign.harness.experiment import Experiment
    from pluralign.harness.records import split_calibration
    from pluralign.sae import params_checksum

    def build(layers=(), n_calibration=50, seed=0, oracle=True):
        calib, evals = split_calibration(task.test, n_calibration, seed)
        fitted = {l: saes(l).params for l in layers}
        return Experiment(
            model=lm.model,
            tokenizer=task.tokenizer,
            template=task.template,
            mapping=task.answer_mapping,
            eval_records=evals,
            calib_records=calib,
            saes=fitted,
            sae_checksums={l: params_checksum(p) for l, p in fitted.items()},
            oracle=task.oracle if oracle else None,
        )

    return build
