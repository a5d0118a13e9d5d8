import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from subwordlm import neural as N
from subwordlm import sched as S
from subwordlm.neural import NeuralLMConfig


def test_adam_zero_gradient_identity():
    p = {"w": np.array([1.0, -2.0, 3.0])}
    st_ = S.adam_init(p, lr=0.1, weight_decay=0.0)
    for _ in range(25):
        S.adam_step(p, {"w": np.zeros(3)}, st_)
    np.testing.assert_array_equal(p["w"], [1.0, -2.0, 3.0])
    assert st_.step == 25


def test_adam_first_step_closed_form():
    theta = np.array([0.5, -1.0, 2.0])
    g = np.array([0.3, -4.0, 1e-3])
    p = {"w": theta.copy()}
    S.adam_step(p, {"w": g}, S.adam_init(p, lr=0.01))
    np.testing.assert_allclose(p["w"], theta - 0.01 * g / (np.abs(g) + 1e-8), rtol=1e-12)


def test_adam_decoupled_weight_decay():
    p = {"w": np.array([2.0])}
    S.adam_step(p, {"w": np.zeros(1)}, S.adam_init(p, lr=0.1, weight_decay=0.1))
    assert p["w"][0] == pytest.approx(2.0 * (1 - 0.01))
    assert NeuralLMConfig().weight_decay == 0.1


def test_adam_rejects_non_finite():
    p = {"w": np.array([1.0])}
    with pytest.raises(FloatingPointError):
        S.adam_step(p, {"w": np.array([np.nan])}, S.adam_init(p))


def test_clip_grad_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert S.clip_grad_norm(g, 1.0) == 5.0
    assert math.hypot(g["a"][0], g["b"][0]) == pytest.approx(1.0)


def test_sgdr_closed_form():
    s = S.LRSchedule("sgdr", 1e-3, None, 100)
    assert abs(S.sgdr_lr(s, 0) - 1e-3) < 1e-12
    assert abs(S.sgdr_lr(s, 50) - (1e-3 + 1e-5) / 2) < 1e-12
    assert S.sgdr_lr(s, 99) > 1e-5
    with pytest.raises(ValueError):
        S.sgdr_lr(s, 100)
    assert S.sgdr_lr(S.LRSchedule("constant", 0.3, None, 5), 3) == 0.3


@given(st.floats(1e-6, 10), st.integers(1, 500), st.data())
def test_sgdr_bounded(eta_max, L, data):
    b = data.draw(st.integers(0, L - 1))
    s = S.LRSchedule("sgdr", eta_max, None, L)
    lr = S.sgdr_lr(s, b)
    assert s.floor <= lr <= eta_max


def quadratic_step_fn(a=20.0, sigma=1.0, theta0=10.0, seed=0):
    """One SGD step on a/2 (theta - mu)^2 with mu ~ N(0, sigma) resampled per batch.

    Plain gradient descent contracts by |1 - lr * a|, so it diverges for lr > 2 / a.
    """
    rng = np.random.default_rng(seed)
    box = {"theta": theta0}

    def step(lr):
        mu = rng.normal(0.0, sigma)
        th = box["theta"]
        loss = 0.5 * a * (th - mu) ** 2
        box["theta"] = th - lr * a * (th - mu)
        return loss

    return step


def test_quadratic_divergence_threshold_analytic():
    a = 20.0
    assert 2.0 / a == 0.1
    for lr, diverges in [(0.099, False), (0.101, True)]:
        assert (abs(1 - lr * a) > 1) == diverges


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_lr_finder_on_quadratic_stays_below_threshold(seed):
    res = S.lr_range_test(quadratic_step_fn(seed=seed), 1e-4, 1.0, 400)
    assert res.suggestion < 0.1
    assert res.stopped_early
    k = res.lrs.index(res.suggestion)
    assert res.smoothed[k] < res.smoothed[k - 1]


def test_lr_finder_monotone_returns_last():
    box = {"k": 0}

    def step(lr):
        box["k"] += 1
        return 10.0 / box["k"]

    res = S.lr_range_test(step, 1e-3, 1e-1, 20)
    assert res.suggestion == res.lrs[-1]
    assert res.lrs[-1] == pytest.approx(1e-1)
    assert res.lrs[1] / res.lrs[0] == pytest.approx((1e-1 / 1e-3) ** (1 / 20))


def test_lr_finder_first_step_divergence():
    with pytest.raises(S.LRFinderError):
        S.lr_range_test(lambda lr: math.inf, 1.0, 2.0, 10)
    with pytest.raises(S.LRFinderError):
        S.lr_range_test(lambda lr: 1.0 + lr, 1e-3, 1.0, 10)
    with pytest.raises(ValueError):
        S.lr_range_test(lambda lr: 1.0, 1e-3, 1.0, 5)


def test_lr_finder_csv(tmp_path):
    res = S.lr_range_test(quadratic_step_fn(), 1e-4, 1.0, 50)
    res.to_csv(tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "step,lr,loss,smoothed_loss" and len(lines) == len(res.lrs) + 1


def test_ntasgd_hand_trace():
    ctl = S.NtAsgdController(5)
    modes = [ctl.update(v) for v in [5.0, 4.0, 4.1, 4.2, 4.3, 4.4, 4.5]]
    assert modes == ["warmup"] * 6 + ["averaging"]
    assert ctl.trigger_report == 7
    assert S.ntasgd_update(ctl, 1.0) == "averaging"


def test_ntasgd_never_triggers_when_improving():
    ctl = S.NtAsgdController(2)
    for v in np.linspace(10, 1, 30):
        assert ctl.update(v) == "warmup"


def test_ntasgd_average_of_constant_and_running_mean():
    ctl = S.NtAsgdController(1)
    p = {"w": np.array([1.5, -2.0])}
    ctl.accumulate(p)
    assert S.ntasgd_params(ctl, p) is p
    for v in (3.0, 2.0, 2.5):
        ctl.update(v)
    assert ctl.mode == "averaging"
    for _ in range(4):
        ctl.accumulate(p)
    np.testing.assert_allclose(ctl.effective_params(p)["w"], p["w"])
    ctl.accumulate({"w": np.array([6.5, 3.0])})
    np.testing.assert_allclose(ctl.effective_params(p)["w"], [2.5, -1.0])


def test_run_log(tmp_path):
    log = S.TrainRunLog()
    log.log_step(0, 0.1, 2.0)
    with pytest.raises(ValueError):
        log.log_step(0, 0.1, 2.0)
    log.log_epoch(1, 1.0, math.e, 0.5)
    log.write(tmp_path / "s.csv", tmp_path / "e.csv")
    assert (tmp_path / "s.csv").read_text().splitlines() == ["step,lr,train_loss", "0,0.1,2.0"]
    assert (tmp_path / "e.csv").read_text().splitlines()[0] == "epoch,val_loss,val_ppl,seconds"


def test_train_config_defaults_and_presets():
    t = S.TrainConfig()
    assert (t.epochs, t.lr, t.optimizer) == (20, 1e-3, "adam")
    sub = S.PRESETS["subword"]
    assert (sub["epochs"], sub["lr"], sub["bptt_len"], sub["batch_size"]) == (20, 1e-3, 70, 32)
    word = S.TrainConfig(phases=S.PRESETS["word-baseline"]["phases"])
    assert S.PRESETS["word-baseline"]["vocab_size"] == 60000
    assert word.epoch_lrs() == [1e-2] * 4 + [1e-3] * 3
    simple = S.PRESETS["simple-lstm"]
    assert (simple["hidden_dim"], simple["num_layers"], simple["epochs"], simple["lr"]) == (200, 2, 10, 1.0)


def _stream(n=3000, V=20, seed=0):
    rng = np.random.default_rng(seed)
    out = [0]
    for _ in range(n):
        out.append((out[-1] * 7 + 3) % (V - 3) + 3 if rng.random() < 0.8 else int(rng.integers(1, V)))
        if out[-1] == 1:
            out.append(0)
    return np.array(out)


TINY = dict(vocab_size=20, embed_dim=8, hidden_dim=12, num_layers=2, bptt_len=10, batch_size=4, tie_weights=False)


@pytest.mark.parametrize("optimizer", ["adam", "ntasgd"])
def test_train_deterministic_and_learns(tmp_path, optimizer):
    cfg = NeuralLMConfig(**TINY)
    data = _stream()
    tcfg = S.TrainConfig(epochs=3, lr=1e-2 if optimizer == "adam" else 1.0, optimizer=optimizer, ntasgd_patience=1)
    r1 = S.train(cfg, data[:2500], data[2500:], tcfg, seed=4, out_dir=tmp_path / "a")
    r2 = S.train(cfg, data[:2500], data[2500:], tcfg, seed=4, out_dir=tmp_path / "b")
    assert r1.log.losses == r2.log.losses
    for name in ("final.ckpt", "best.ckpt", "train_log.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert r1.log.epochs[-1][1] < math.log(20)
    steps = [s[0] for s in r1.log.steps]
    assert steps == list(range(len(steps)))
    per_epoch = len(steps) // 3
    assert r1.log.steps[0][1] == r1.log.steps[per_epoch][1] == tcfg.lr
    ck = N.load_checkpoint(tmp_path / "a" / "final.ckpt")
    assert ck.meta["seed"] == 4 and "config_hash" in ck.meta


def test_train_variable_bptt_runs():
    cfg = NeuralLMConfig(**{**TINY, "variable_bptt": True})
    data = _stream(800)
    r = S.train(cfg, data[:600], data[600:], S.TrainConfig(epochs=1, lr=1e-2), seed=0)
    assert len(r.log.steps) > 0


def test_train_aborts_on_non_finite_loss(monkeypatch):
    cfg = NeuralLMConfig(**TINY)
    data = _stream(800)
    real = N.loss_and_grads
    calls = {"n": 0}

    def flaky(*args, **kw):
        loss, grads, state = real(*args, **kw)
        calls["n"] += 1
        return (math.nan if calls["n"] == 4 else loss), grads, state

    monkeypatch.setattr(N, "loss_and_grads", flaky)
    with pytest.raises(S.TrainingError, match="batch 3"):
        S.train(cfg, data[:600], data[600:], S.TrainConfig(epochs=1, lr=1e-2), seed=0)


def test_neural_step_fn_for_lr_finder():
    cfg = NeuralLMConfig(**TINY)
    step = S.neural_step_fn(cfg, _stream(2000), seed=0)
    res = S.lr_range_test(step, 1e-4, 1.0, 30)
    assert res.suggestion in res.lrs
