import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ctxmix.data import Dataset, GeneratorConfig, Split, default_vocab, generate_synthetic
from ctxmix.model import EncoderConfig, init_weights
from ctxmix.training import (
    Adam,
    DivergenceError,
    TrainConfig,
    TrainMode,
    evaluate_accuracy,
    full_ce,
    restricted_ce,
    target_foil_margins,
    train,
)
from ctxmix.weights_io import load_weights, save_weights

VOCAB = default_vocab()


def _cfg(**kw):
    base = dict(num_layers=1, num_heads=2, model_dim=16, ffn_dim=32, vocab_size=len(VOCAB), max_positions=16)
    base.update(kw)
    return EncoderConfig(**base)


def _data(n, seed=0, split=Split.TRAIN, **kw):
    return Dataset(generate_synthetic(GeneratorConfig(n=n, seed=seed, **kw), VOCAB), split)


def test_adam_closed_form_step():
    # f(a, b) = a^2 + 3b, gradient (2a, 3); one step from (1, -2)
    params = {"a": np.array(1.0), "b": np.array(-2.0)}
    grads = {"a": np.array(2.0), "b": np.array(3.0)}
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    out = Adam(lr, b1, b2, eps).step(params, grads)
    for k in ("a", "b"):
        g = float(grads[k])
        m_hat = (1 - b1) * g / (1 - b1)
        v_hat = (1 - b2) * g * g / (1 - b2)
        expected = float(params[k]) - lr * m_hat / (math.sqrt(v_hat) + eps)
        assert abs(float(out[k]) - expected) <= 1e-12


def test_adam_two_steps_bias_correction():
    opt = Adam(0.01)
    p = {"w": np.array(0.0)}
    p = opt.step(p, {"w": np.array(1.0)})
    p = opt.step(p, {"w": np.array(-1.0)})
    m = 0.9 * 0.1 * 1.0 + 0.1 * -1.0
    v = 0.999 * 0.001 + 0.001
    step2 = 0.01 * (m / (1 - 0.81)) / (math.sqrt(v / (1 - 0.999**2)) + 1e-8)
    step1 = 0.01 * 1.0 / (1.0 + 1e-8)
    assert abs(float(p["w"]) - (-step1 - step2)) <= 1e-12


@given(st.floats(-20, 20), st.floats(-20, 20), st.floats(-100, 100))
def test_restricted_ce_shift_invariant(a, b, c):
    logits = np.zeros((1, 5))
    logits[0, 1], logits[0, 3] = a, b
    shifted = logits.copy()
    shifted[0, [1, 3]] += c
    l1, g1 = restricted_ce(logits, [1], [3])
    l2, g2 = restricted_ce(shifted, [1], [3])
    assert l1 == pytest.approx(l2, rel=1e-9, abs=1e-12)
    np.testing.assert_allclose(g1, g2, atol=1e-12)


def test_ce_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(3, 6))
    tgt, foil = np.array([0, 2, 5]), np.array([1, 4, 3])
    for fn in (lambda z: restricted_ce(z, tgt, foil), lambda z: full_ce(z, tgt)):
        _, g = fn(logits)
        for idx in np.ndindex(*logits.shape):
            zp, zm = logits.copy(), logits.copy()
            zp[idx] += 1e-6
            zm[idx] -= 1e-6
            assert g[idx] == pytest.approx((fn(zp)[0] - fn(zm)[0]) / 2e-6, abs=1e-7)


def test_zero_learning_rate_keeps_weights():
    w = init_weights(_cfg(), seed=0)
    data = _data(40)
    out, report = train(w, data, TrainConfig(learning_rate=0.0, max_steps=5), Dataset(data.examples, Split.TEST))
    for k, v in w.named_tensors().items():
        assert np.array_equal(out.named_tensors()[k], v)
    assert report.accuracy == evaluate_accuracy(w, Dataset(data.examples, Split.TEST))
    assert len(report.losses) == 5 and report.steps == 5


def test_zero_steps_returns_input():
    w = init_weights(_cfg(), seed=0)
    out, report = train(w, _data(10), TrainConfig(max_steps=0))
    assert out is w and report.losses == []


def test_memorize_single_example():
    w = init_weights(_cfg(), seed=1)
    data = _data(1, seed=3)
    out, _ = train(w, data, TrainConfig(max_steps=60, learning_rate=1e-2, batch_size=1))
    assert evaluate_accuracy(out, data) == 1.0


def test_mlm_mode_lowers_full_vocab_loss():
    w = init_weights(_cfg(), seed=2)
    data = _data(64, seed=4)
    _, report = train(w, data, TrainConfig(mode=TrainMode.MLM, max_steps=40, learning_rate=3e-3, unk_rate=0.1))
    first, last = np.mean([l for _, l in report.losses[:5]]), np.mean([l for _, l in report.losses[-5:]])
    assert last < first


def test_training_deterministic():
    w = init_weights(_cfg(), seed=3)
    data = _data(32, seed=5)
    cfg = TrainConfig(max_steps=6, seed=9, mode=TrainMode.MLM, unk_rate=0.2)
    a, ra = train(w, data, cfg)
    b, rb = train(w, data, cfg)
    assert ra.losses == rb.losses
    assert all(np.array_equal(a.named_tensors()[k], b.named_tensors()[k]) for k in a.named_tensors())


def test_requires_train_split():
    with pytest.raises(ValueError):
        train(init_weights(_cfg()), _data(4, split=Split.TEST), TrainConfig(max_steps=1))


def test_divergence_reports_step():
    w = init_weights(_cfg(), seed=0)
    with pytest.raises(DivergenceError) as err:
        train(w, _data(8), TrainConfig(learning_rate=1e300, max_steps=5, batch_size=8))
    assert 1 <= err.value.step <= 5


def test_shapes_preserved_and_reload(tmp_path):
    w = init_weights(_cfg(), seed=4)
    out, _ = train(w, _data(16), TrainConfig(max_steps=3))
    assert {k: v.shape for k, v in out.named_tensors().items()} == {k: v.shape for k, v in w.named_tensors().items()}
    save_weights(out, tmp_path / "ft.bin")
    back = load_weights(tmp_path / "ft.bin")
    assert back.config == out.config


def test_untrained_accuracy_near_chance():
    test = _data(1200, seed=8, split=Split.TEST, attractor_rate=0.25)
    accs = [evaluate_accuracy(init_weights(_cfg(num_layers=2), seed=s), test) for s in range(5)]
    assert abs(np.mean(accs) - 0.5) <= 0.05


def test_ties_count_as_wrong():
    w = init_weights(_cfg(), seed=0)
    w = w.map_tensors(lambda k, t: np.zeros_like(t) if k in ("embeddings.token", "head.bias") else t)
    test = _data(50, split=Split.TEST)
    assert np.all(target_foil_margins(w, test) == 0)
    assert evaluate_accuracy(w, test) == 0.0


def test_hard_wired_target_is_perfect():
    is_id = VOCAB.id("is")
    test = Dataset([ex for ex in _data(200, seed=1) if ex.target_id == is_id], Split.TEST)
    assert len(test) > 5
    w = init_weights(_cfg(), seed=0)
    bias = np.zeros(len(VOCAB))
    bias[is_id] = 1.0
    w = w.map_tensors(lambda k, t: np.zeros_like(t) if k == "embeddings.token" else (bias if k == "head.bias" else t))
    assert evaluate_accuracy(w, test) == 1.0
