import io
import math

import numpy as np
import pytest

from polytrans.corpus import oversample, synth_fixture
from polytrans.model import ModelConfig, init_model
from polytrans.subword import BpeTokenizer
from polytrans.training import (
    AdamState,
    EarlyStopping,
    TrainConfig,
    adam_step,
    clip_gradients,
    global_norm,
    lr_schedule,
    train_loop,
)

from oracles import hand_adam


@pytest.mark.parametrize("step, lr", [(1, 3e-4), (16000, 3e-4), (64000, 1.5e-4)])
def test_lr_examples(step, lr):
    assert lr_schedule(step, TrainConfig()) == pytest.approx(lr, rel=1e-12)


def test_lr_non_increasing_and_continuous():
    cfg = TrainConfig()
    values = [lr_schedule(s, cfg) for s in range(1, 40000, 97)]
    assert all(a >= b for a, b in zip(values, values[1:]))
    assert lr_schedule(16001, cfg) == pytest.approx(lr_schedule(16000, cfg), rel=1e-4)
    with pytest.raises(ValueError):
        lr_schedule(0, cfg)


def test_warmup_schedule_alternative():
    cfg = TrainConfig(schedule="warmup", decay_steps=100)
    assert lr_schedule(50, cfg) == pytest.approx(1.5e-4)
    assert lr_schedule(100, cfg) == pytest.approx(3e-4)
    assert lr_schedule(400, cfg) == pytest.approx(1.5e-4)


def test_adam_matches_hand_step():
    cfg = TrainConfig()
    params = {"w": np.array([0.7])}
    state = AdamState.zeros_like(params)
    theta, m, v, t = 0.7, 0.0, 0.0, 0
    for g in (1.0, -0.5, 2.0):
        adam_step(params, {"w": np.array([g])}, state, 3e-4, cfg)
        theta, m, v, t = hand_adam(theta, g, m, v, t, 3e-4, 0.9, 0.98, 1e-9)
        assert params["w"][0] == pytest.approx(theta, abs=1e-15)
    assert state.t == 3


def test_adam_first_step_is_minus_lr():
    params = {"w": np.array([0.0])}
    adam_step(params, {"w": np.array([1.0])}, AdamState.zeros_like(params), 3e-4, TrainConfig())
    assert params["w"][0] == pytest.approx(-3e-4, rel=1e-6)


def test_adam_zero_grad_and_shape_error():
    params = {"w": np.ones(3)}
    state = AdamState.zeros_like(params)
    adam_step(params, {"w": np.zeros(3)}, state, 1e-3, TrainConfig())
    np.testing.assert_array_equal(params["w"], np.ones(3))
    assert state.t == 1
    with pytest.raises(ValueError):
        adam_step(params, {"w": np.zeros(2)}, state, 1e-3, TrainConfig())


def test_clip_examples():
    g3 = {"a": np.array([3.0, 0.0])}
    assert clip_gradients(g3, 5)["a"].tolist() == [3.0, 0.0]
    g10 = {"a": np.array([6.0]), "b": np.array([8.0])}
    out = clip_gradients(g10, 5)
    assert out["a"][0] == pytest.approx(3.0) and out["b"][0] == pytest.approx(4.0)
    assert abs(global_norm(out) - 5) < 1e-9
    zero = {"a": np.zeros(4)}
    assert clip_gradients(zero, 5)["a"].tolist() == [0.0] * 4


def test_clip_never_increases_norm():
    rng = np.random.default_rng(0)
    for _ in range(50):
        g = {"a": rng.normal(size=5) * rng.uniform(0.1, 20), "b": rng.normal(size=(2, 3))}
        out = clip_gradients(g, 5)
        assert global_norm(out) <= min(global_norm(g), 5 + 1e-9) + 1e-12


def test_early_stopping_contract():
    stop = EarlyStopping(patience=5, mode="min")
    seq = [3.0, 2.0, 2.0, 2.5, 2.1, 2.0, 2.2]
    for i, v in enumerate(seq):
        stop.update(v)
        assert stop.should_stop == (i == len(seq) - 1)
    assert stop.best_index == 1


def test_config_validation():
    for kw in (dict(beta1=1.0), dict(lr=0), dict(patience=0), dict(schedule="x"),
               dict(stop_metric="bleu")):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


@pytest.fixture(scope="module")
def tiny_setup():
    c = synth_fixture(1, 8, max_refs=1, n_words=8)
    tok = BpeTokenizer(vocab_size=60).fit(
        [r.source_text for r in c] + [t.target_text for r in c for t in r.translations])
    pairs = oversample(c, 4)
    cfg = ModelConfig(vocab_size=tok.n_tokens, d_model=16, heads=2, d_ff=32, dropout_rate=0.1,
                      max_positions=24)
    return tok, pairs, cfg


def test_resume_reproduces_uninterrupted_run(tiny_setup):
    tok, pairs, mcfg = tiny_setup
    tcfg = TrainConfig(batch_size=5, lr=1e-3, max_steps=12, eval_every=4, patience=50, seed=3)
    full = init_model(mcfg, 0)
    train_loop(full, pairs, tok, tcfg)

    half = init_model(mcfg, 0)
    first = TrainConfig(**{**tcfg.__dict__, "max_steps": 7})
    _, _, state = train_loop(half, pairs, tok, first)
    train_loop(half, pairs, tok, tcfg, state=state, start_step=7)
    for k in full.params:
        np.testing.assert_array_equal(half.params[k], full.params[k])


def test_training_deterministic_and_logged(tiny_setup):
    tok, pairs, mcfg = tiny_setup
    tcfg = TrainConfig(batch_size=5, lr=1e-3, max_steps=6, eval_every=3, patience=50)
    logs = []
    models = []
    for _ in range(2):
        buf = io.StringIO()
        m = init_model(mcfg, 0)
        best, rep, _ = train_loop(m, pairs, tok, tcfg, log_stream=buf)
        logs.append(buf.getvalue())
        models.append(m)
    assert logs[0] == logs[1]
    for k in models[0].params:
        np.testing.assert_array_equal(models[0].params[k], models[1].params[k])
    lines = [l.split("\t") for l in logs[0].splitlines()]
    assert [int(l[0]) for l in lines] == list(range(1, 7))
    assert [len(l) for l in lines] == [3, 3, 4, 3, 3, 4]
    assert rep.eval_steps == [3, 6] and len(rep.metric_history) == 2


def test_early_stopping_returns_best_not_last(tiny_setup):
    tok, pairs, mcfg = tiny_setup
    # a metric that improves twice then stalls
    values = iter([5.0, 4.0, 4.5, 4.6, 4.7])
    snapshots = []

    def evaluate_wf(model):
        snapshots.append(model.copy())
        return -next(values)

    tcfg = TrainConfig(batch_size=5, lr=1e-3, max_steps=100, eval_every=2, patience=3,
                       stop_metric="validation_wf")
    m = init_model(mcfg, 0)
    best, rep, _ = train_loop(m, pairs, tok, tcfg, evaluate_wf=evaluate_wf)
    assert rep.stopped_early and rep.best_eval == 1 and rep.best_step == 4
    assert rep.steps == 10
    for k in best.params:
        np.testing.assert_array_equal(best.params[k], snapshots[1].params[k])
    assert not np.array_equal(best.params["embed"], m.params["embed"])


def test_validation_wf_requires_callback(tiny_setup):
    tok, pairs, mcfg = tiny_setup
    with pytest.raises(ValueError):
        train_loop(init_model(mcfg, 0), pairs, tok, TrainConfig(stop_metric="validation_wf"))
    with pytest.raises(ValueError):
        train_loop(init_model(mcfg, 0), [], tok, TrainConfig())


def test_non_finite_loss_aborts(tiny_setup):
    tok, pairs, mcfg = tiny_setup
    m = init_model(mcfg, 0)
    m.params["dec.lnf.g"][:] = np.nan
    with pytest.raises(FloatingPointError):
        train_loop(m, pairs, tok, TrainConfig(batch_size=5, max_steps=2))


def test_loss_decreases(tiny_setup):
    tok, pairs, mcfg = tiny_setup
    tcfg = TrainConfig(batch_size=8, lr=3e-3, max_steps=40, eval_every=20, patience=50)
    _, rep, _ = train_loop(init_model(mcfg, 0), pairs, tok, tcfg)
    assert rep.metric_history[-1] < rep.metric_history[0]
    assert math.isfinite(rep.final_train_loss)
