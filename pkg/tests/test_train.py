import logging

import numpy as np
import pytest

from uwmmse import autodiff as ad
from uwmmse import train as tr
from uwmmse import wmmse as wm
from uwmmse.channel import ChannelSource, NetworkConfig
from uwmmse.model import ModelParams, forward
from uwmmse.train import TrainConfig

NET = NetworkConfig(M=4)
SRC = ChannelSource(NET, seed=3)


def small_config(**kw):
    base = dict(max_steps=6, batch_size=4, eval_every=2, patience=10, val_size=8, F=8, G=4)
    base.update(kw)
    return TrainConfig(**base)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        TrainConfig(optimizer="sgd")
    with pytest.raises(ValueError):
        TrainConfig(max_steps=-1)


def test_loss_zero_theta_matches_pinned_wmmse():
    H = SRC.draw(3, "t")
    p = ModelParams.init(rng=0, mu=0.2).zero_theta()
    val = tr.loss(H, p, 2, sigma=NET.sigma)
    ref = wm.sum_rate(H, wm.run_truncated(H, 2, NET.sigma, mu=0.2).V, NET.sigma)
    assert float(val) == pytest.approx(-np.mean(ref), rel=1e-12)


def test_loss_single_and_duplicated():
    H = SRC.draw(1, "t")
    p = ModelParams.init(rng=1)
    single = float(tr.loss(H, p, 1, sigma=NET.sigma))
    V, _ = forward(H[0], p, 1, sigma=NET.sigma)
    assert single == pytest.approx(-float(wm.sum_rate(H[0], V, NET.sigma)), rel=1e-12)
    double = float(tr.loss(np.concatenate([H, H]), p, 1, sigma=NET.sigma))
    assert double == pytest.approx(single, rel=1e-14)
    with pytest.raises(ValueError):
        tr.loss(H[:0], p, 1, sigma=NET.sigma)


def test_batched_gradient_equals_mean_of_samples():
    H = SRC.draw(3, "t")
    p = ModelParams.init(rng=2)
    val, g, kept = tr.batch_loss_and_grad(H, p, 1, sigma=0.05)
    assert kept == 3
    total = None
    for k in range(3):
        _, gk, _ = tr.batch_loss_and_grad(H[k : k + 1], p, 1, sigma=0.05)
        total = gk if total is None else total + gk
    for name in g:
        assert np.allclose(g[name], total[name] * (1 / 3), rtol=1e-9, atol=1e-12)


def test_singular_sample_dropped(caplog):
    H = SRC.draw(3, "t")
    H[1] = 0.0  # every system of this sample is singular at sigma = 0
    p = ModelParams.init(rng=2)
    with caplog.at_level(logging.WARNING):
        val, g, kept = tr.batch_loss_and_grad(H, p, 1, sigma=0.0)
    assert kept == 2 and np.isfinite(val) and g.all_finite()
    assert any("dropping sample 1" in r.message for r in caplog.records)
    with pytest.raises(tr.StepError):
        tr.batch_loss_and_grad(np.zeros_like(H), p, 1, sigma=0.0)


def test_evaluate_marks_failures():
    H = SRC.draw(3, "t")
    H[2] = 0.0
    out = tr.evaluate(H, ModelParams.init(rng=0), 1, sigma=0.0)
    assert np.isnan(out[2]) and np.all(np.isfinite(out[:2]))


@pytest.mark.parametrize("cls", [tr.Adam, tr.NovoGrad])
def test_zero_learning_rate_keeps_params(cls):
    p = ModelParams.init(rng=0)
    H = SRC.draw(2, "t")
    _, g, _ = tr.batch_loss_and_grad(H, p, 1, sigma=NET.sigma)
    q = cls(lr=0.0).step(p, g)
    for name in p.as_dict():
        assert np.array_equal(getattr(q, name), getattr(p, name))


def test_adam_first_step_is_sign_like():
    p = ModelParams.init(rng=0)
    g = ad.GradientSet({k: np.full(np.shape(v), 2 - 3j) for k, v in p.as_dict().items()})
    q = tr.Adam(lr=0.01).step(p, g)
    assert np.allclose(q.mu - p.mu, -0.01 * (1 - 1j), atol=1e-9)


def test_max_steps_zero():
    init = ModelParams.init(3, 5, 1, 8, 4, np.random.default_rng(np.random.SeedSequence([5, 1])), mu=0.1)
    p, hist = tr.train(small_config(max_steps=0), SRC, rng=5)
    for name in p.as_dict():
        assert np.array_equal(getattr(p, name), getattr(init, name))
    assert hist.steps == 0


def test_deterministic():
    a, ha = tr.train(small_config(), SRC, rng=1)
    b, hb = tr.train(small_config(), SRC, rng=1)
    assert ha.train_loss == hb.train_loss and ha.val_sum_rate == hb.val_sum_rate
    for name in a.as_dict():
        assert np.array_equal(getattr(a, name), getattr(b, name))


def test_history_and_best(tmp_path):
    p, hist = tr.train(small_config(max_steps=5, eval_every=2), SRC, rng=1)
    assert hist.steps == 5
    assert hist.val_steps == [0, 2, 4, 5]
    assert hist.best_val == max(hist.val_sum_rate)
    assert hist.val_steps[int(np.argmax(hist.val_sum_rate))] == hist.best_step
    # returned parameters reproduce the best recorded score
    val_H = SRC.draw(8, "validation")
    score = np.nanmean(tr.evaluate(val_H, p, 1, sigma=NET.sigma))
    assert score == pytest.approx(hist.best_val, rel=1e-12)
    path = tmp_path / "h.csv"
    hist.write_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "step,train_loss,val_sum_rate"
    assert len(lines) == 1 + 6
    assert lines[2].endswith(",")  # step 1 not evaluated
    assert lines[-1].startswith("5,,")  # final validation after the last step


def test_patience_stops_early():
    _, hist = tr.train(small_config(max_steps=50, eval_every=1, patience=1, learning_rate=5.0), SRC, rng=1)
    assert hist.steps < 50


def test_divergence_flag(monkeypatch):
    def bad(*a, **k):
        return float("nan"), ad.GradientSet(), 1

    monkeypatch.setattr(tr, "batch_loss_and_grad", bad)
    p, hist = tr.train(small_config(), SRC, rng=1)
    assert hist.diverged and hist.steps == 1
    assert np.all(np.isfinite(p.theta11))


def test_training_improves_validation():
    cfg = small_config(max_steps=60, eval_every=20, batch_size=8, F=32, G=16)
    _, hist = tr.train(cfg, ChannelSource(NetworkConfig(M=6), seed=0), rng=0)
    assert hist.best_val > hist.val_sum_rate[0]


def test_checkpoint_k1_to_k3(tmp_path):
    p, _ = tr.train(small_config(max_steps=2), SRC, rng=0)
    path = tmp_path / "ck.txt"
    tr.save_checkpoint(path, p, NET, K_train=1)
    q, info = tr.load_checkpoint(path)
    H = SRC.draw(1, "x")[0]
    for K in (1, 3):
        assert np.array_equal(forward(H, p, K, sigma=NET.sigma)[0], forward(H, q, K, sigma=NET.sigma)[0])
