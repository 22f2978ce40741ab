import time
from dataclasses import dataclass

import pytest

from ctxmix.data import Dataset, GeneratorConfig, Split, default_vocab, generate_synthetic, split_equally
from ctxmix.model import EncoderConfig, init_weights, random_weights
from ctxmix.training import Recipe, pretrain_and_finetune

SUITE_BUDGET_S = 600.0
_results = {}
_start = time.monotonic()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion this test decides")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    number, title = mark.args
    detail = dict(item.user_properties).get("detail", "")
    if rep.when == "setup" and not rep.failed:
        return
    _results[number] = (title, rep.passed, detail)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _results:
        return
    elapsed = time.monotonic() - _start
    terminalreporter.section("acceptance criteria")
    for number in sorted(_results):
        title, ok, detail = _results[number]
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
    ok = elapsed < SUITE_BUDGET_S
    terminalreporter.write_line(
        f"criterion 12 {'PASS' if ok else 'FAIL'}  full-suite wall clock {elapsed:.0f}s (budget {SUITE_BUDGET_S:.0f}s)"
    )


def pytest_sessionfinish(session, exitstatus):
    if _results and time.monotonic() - _start >= SUITE_BUDGET_S and exitstatus == 0:
        session.exitstatus = 1


# ---------------------------------------------------------------------------


def small_config(L=2, H=2, d=8, ffn=16, V=12, P=10):
    return EncoderConfig(num_layers=L, num_heads=H, model_dim=d, ffn_dim=ffn, vocab_size=V, max_positions=P)


@pytest.fixture
def small_model():
    return random_weights(small_config(), seed=3)


@pytest.fixture(scope="session")
def vocab():
    return default_vocab()


@dataclass
class Trained:
    train: Dataset
    test: Dataset
    pretrained: object
    finetuned: object
    accuracy: float
    seconds: float


@pytest.fixture(scope="session")
def trained(vocab):
    """The default recipe, trained once per session on 2,000 / 2,000 examples."""
    examples = generate_synthetic(GeneratorConfig(n=4000, attractor_rate=0.25, seed=0), vocab)
    train_set, test_set = split_equally(examples)
    recipe = Recipe()
    t0 = time.monotonic()
    w0 = init_weights(recipe.encoder_config(len(vocab)), seed=recipe.seed)
    pre, ft, _, ft_report = pretrain_and_finetune(w0, train_set, test_set, recipe)
    seconds = time.monotonic() - t0
    assert train_set.split is Split.TRAIN
    return Trained(train_set, test_set, pre, ft, ft_report.accuracy, seconds)
