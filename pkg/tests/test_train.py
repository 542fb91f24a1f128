import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ldlmix import train as T
from ldlmix.augment import NoiseSource
from ldlmix.dataset import LdlDataset
from ldlmix.errors import ConfigurationError, ContractError, DimensionError
from ldlmix.metrics import METRIC_NAMES
from ldlmix.numerics import Tape, Tensor, grad_check
from ldlmix.tabmixer import AUGMENTED, TILED, predict_batch

SMALL = dict(blocks=2, hidden=16, learner_hidden=8)


def toy_data(m=64, n=6, c=4, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((m, n))
    logits = x[:, :c] * 1.5
    y = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    return LdlDataset("toy", x, y)


# ---------------------------------------------------------------- loss

def test_loss_zero_on_match():
    t = np.array([[0.2, 0.3, 0.5]])
    assert float(T.combined_loss(t, t).data) == pytest.approx(0.0, abs=1e-15)


def test_loss_hand_example():
    val = float(T.combined_loss([[0.5, 0.5]], [[1.0, 0.0]], T.LossConfig(1.0, 0.5)).data)
    assert val == pytest.approx(1.0 + 0.5 * math.log(2.0), abs=1e-12)
    assert val == pytest.approx(1.3466, abs=1e-4)


def test_loss_beta_zero_is_l1():
    p, t = np.array([[0.1, 0.6, 0.3]]), np.array([[0.3, 0.3, 0.4]])
    val = float(T.combined_loss(p, t, T.LossConfig(1.0, 0.0)).data)
    assert val == pytest.approx(np.abs(p - t).sum(), abs=1e-15)


def test_loss_rejects_non_positive_prediction():
    with pytest.raises(ContractError):
        T.combined_loss([[1.0, 0.0]], [[0.5, 0.5]])


def test_loss_rejects_bad_config():
    with pytest.raises(ConfigurationError):
        T.LossConfig(0.0, 0.0)
    with pytest.raises(ConfigurationError):
        T.LossConfig(-1.0, 0.5)


def test_loss_shape_mismatch():
    with pytest.raises(DimensionError):
        T.combined_loss([[0.5, 0.5]], [[1.0, 0.0, 0.0]])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 12))
def test_loss_non_negative_and_zero_class_invariant(seed, c):
    rng = np.random.default_rng(seed)
    p, t = rng.dirichlet(np.ones(c)), rng.dirichlet(np.ones(c))
    base = float(T.combined_loss([p], [t]).data)
    assert base >= 0.0
    # a zero-probability target class with pred mass carved out of nothing changes nothing
    p2 = np.append(p * (1 - 1e-9), 1e-9)
    t2 = np.append(t, 0.0)
    widened = float(T.combined_loss([p2], [t2]).data)
    assert widened == pytest.approx(base, abs=1e-7)


def test_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(20):
        pred = Tensor(rng.dirichlet(np.ones(5) * 2, size=3))
        target = rng.dirichlet(np.ones(5), size=3)
        # a small step keeps every coordinate away from the |p - t| kink
        rep = grad_check(lambda: T.combined_loss(pred, target), [pred], h=1e-6, tol=1e-6)
        worst = max(worst, rep.max_rel_error)
    assert worst < 1e-6


# ---------------------------------------------------------------- AdamW

def param(values):
    return Tensor(np.array(values, dtype=float), requires_grad=True)


def test_adamw_zero_grad_no_decay_is_identity():
    p = param([1.0, -2.0])
    T.adamw_step([p], [np.zeros(2)], T.OptimizerState.zeros([p]), lr=0.1, weight_decay=0.0)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adamw_decoupled_decay_factor():
    p = param([3.0])
    T.adamw_step([p], [np.zeros(1)], T.OptimizerState.zeros([p]), lr=0.001, weight_decay=0.01)
    assert p.data[0] == pytest.approx(3.0 * (1 - 1e-5), rel=1e-15)


def test_adamw_first_step():
    p = param([0.0])
    st_ = T.OptimizerState.zeros([p])
    T.adamw_step([p], [np.ones(1)], st_, lr=0.001, weight_decay=0.0)
    assert p.data[0] == pytest.approx(-0.001, rel=1e-6)
    assert st_.t == 1


def test_adamw_zero_lr_is_identity():
    p = param([0.5, 1.5])
    T.adamw_step([p], [np.array([3.0, -1.0])], T.OptimizerState.zeros([p]), lr=0.0)
    np.testing.assert_array_equal(p.data, [0.5, 1.5])


def test_adamw_shape_mismatch():
    p = param([0.5, 1.5])
    with pytest.raises(DimensionError):
        T.adamw_step([p], [np.ones(3)], T.OptimizerState.zeros([p]), lr=0.1)


def test_train_config_validation():
    for bad in (dict(batch_size=0), dict(learning_rate=0.0), dict(epochs=0), dict(weight_decay=-1.0)):
        with pytest.raises(ConfigurationError):
            T.TrainConfig(**bad)


def test_pretrain_length_defaults_to_tenth():
    assert T.TrainConfig(epochs=500).n_pretrain == 50
    assert T.TrainConfig(epochs=3).n_pretrain == 1
    assert T.TrainConfig(epochs=500, with_pt=False).n_pretrain == 0
    assert T.TrainConfig(epochs=500, pretrain_epochs=7).n_pretrain == 7


# ---------------------------------------------------------------- schedule

def test_pretrain_decreases_loss():
    data = toy_data(64)
    cfg = T.TrainConfig(batch_size=16, learning_rate=3e-3, epochs=200, pretrain_epochs=20, **SMALL)
    model = cfg.new_model(data.n, data.c, 1)
    trace = []
    T.pretrain(model, data, cfg, trace)
    assert len(trace) == 20
    assert trace[-1].loss <= trace[0].loss


def test_pretrain_leaves_learner_untouched():
    data = toy_data(32)
    cfg = T.TrainConfig(batch_size=16, learning_rate=3e-3, epochs=10, pretrain_epochs=3, **SMALL)
    model = cfg.new_model(data.n, data.c, 1)
    before = [t.data.copy() for t in model.learner.tensors()]
    T.pretrain(model, data, cfg)
    for a, t in zip(before, model.learner.tensors()):
        np.testing.assert_array_equal(a, t.data)


def test_pretrain_disabled_returns_unchanged_model():
    data = toy_data(16)
    cfg = T.TrainConfig(epochs=5, with_pt=False, **SMALL)
    model = cfg.new_model(data.n, data.c, 1)
    before = model.state_dict()
    assert T.pretrain(model, data, cfg) is model
    for k, v in model.state_dict().items():
        np.testing.assert_array_equal(v, before[k])


def test_pretrain_is_deterministic():
    data = toy_data(32)
    cfg = T.TrainConfig(batch_size=8, learning_rate=1e-3, epochs=30, **SMALL)
    a, b = cfg.new_model(data.n, data.c, 1), cfg.new_model(data.n, data.c, 1)
    T.pretrain(a, data, cfg)
    T.pretrain(b, data, cfg)
    for k, v in a.state_dict().items():
        np.testing.assert_array_equal(v, b.state_dict()[k])


def test_training_loss_decreases_on_toy_data():
    data = toy_data(200, n=24, c=18, seed=3)
    cfg = T.TrainConfig(batch_size=50, learning_rate=2e-3, epochs=50, **SMALL)
    res = T.train_model(cfg.new_model(data.n, data.c, 1), data, cfg)
    train_losses = [r.loss for r in res.trace if r.phase == "train"]
    assert train_losses[-1] < train_losses[0]
    assert len(res.trace) == cfg.n_pretrain + cfg.epochs
    assert res.noise_draws > 0


def test_without_fa_never_draws_noise():
    data = toy_data(32)
    cfg = T.TrainConfig(batch_size=16, epochs=4, with_fa=False, **SMALL)
    noise = NoiseSource(1)
    res = T.train_model(cfg.new_model(data.n, data.c, 1), data, cfg, noise)
    assert res.noise_draws == 0 and noise.draws == 0


def test_identical_seed_identical_trace():
    data = toy_data(32)
    cfg = T.TrainConfig(batch_size=16, epochs=4, **SMALL)
    runs = [T.train_model(cfg.new_model(data.n, data.c, 1), data, cfg).trace_csv() for _ in range(2)]
    assert runs[0] == runs[1]
    assert runs[0].startswith("phase,epoch,loss\n")


def test_divergence_is_reported():
    data = toy_data(16)
    cfg = T.TrainConfig(batch_size=16, epochs=1, with_pt=False, **SMALL)
    model = cfg.new_model(data.n, data.c, 1)
    model.squeeze_w.data[:] = np.nan
    with pytest.raises((T.TrainingDiverged, ContractError)):
        T.train_model(model, data, cfg)


# ---------------------------------------------------------------- evaluation

def test_evaluate_perfect_predictions(monkeypatch):
    data = toy_data(8)
    monkeypatch.setattr(T, "predict_batch", lambda model, x, noise, mode: data.labels)
    row = T.evaluate_model(None, data, None, TILED)
    for name in ("chebyshev", "clark", "canberra", "kl"):
        assert row[name] == pytest.approx(0.0, abs=1e-12)
    assert row["cosine"] == pytest.approx(1.0) and row["intersection"] == pytest.approx(1.0)


def test_evaluate_twice_is_identical():
    data = toy_data(16)
    cfg = T.TrainConfig(**SMALL)
    model = cfg.new_model(data.n, data.c, 1)
    noise = NoiseSource(5)
    assert T.evaluate_model(model, data, noise, AUGMENTED) == T.evaluate_model(model, data, noise, AUGMENTED)


def test_uniform_predictor_kl_worse_on_peaked_targets():
    from ldlmix.metrics import score_predictions
    uniform = np.full((2, 4), 0.25)
    peaked = np.array([[0.97, 0.01, 0.01, 0.01], [0.01, 0.97, 0.01, 0.01]])
    flat = np.array([[0.26, 0.24, 0.25, 0.25], [0.25, 0.25, 0.24, 0.26]])
    assert score_predictions(uniform, peaked)["kl"] > score_predictions(uniform, flat)["kl"]


def test_predict_batch_matches_single_pass():
    data = toy_data(10)
    model = T.TrainConfig(**SMALL).new_model(data.n, data.c, 1)
    a = predict_batch(model, data.features, None, TILED, chunk=3)
    b = predict_batch(model, data.features, None, TILED, chunk=100)
    np.testing.assert_allclose(a, b, atol=1e-14)


# ---------------------------------------------------------------- cross-validation

def test_run_cv_small():
    data = toy_data(20)
    cfg = T.TrainConfig(batch_size=8, epochs=2, **SMALL)
    rep = T.run_cv(data, cfg, k=2, repeats=1)
    assert list(rep.metrics) == list(METRIC_NAMES)
    assert all(np.isfinite(m.mean) and np.isfinite(m.std) for m in rep.metrics.values())
    assert rep.fold_keys == [(0, 0), (0, 1)]


def test_run_cv_std_zero_when_folds_agree(monkeypatch):
    row = {k: 0.5 for k in METRIC_NAMES}
    monkeypatch.setattr(T, "run_fold", lambda *a: (dict(row), 0))
    rep = T.run_cv(toy_data(20), T.TrainConfig(**SMALL), k=5, repeats=2)
    assert all(m.std == 0.0 and len(m.values) == 10 for m in rep.metrics.values())


def test_run_cv_is_deterministic_and_worker_independent():
    data = toy_data(20)
    cfg = T.TrainConfig(batch_size=8, epochs=2, **SMALL)
    a = T.run_cv(data, cfg, k=2, repeats=1)
    b = T.run_cv(data, cfg, k=2, repeats=1, workers=2)
    assert a.to_csv() == b.to_csv() and a.folds_csv() == b.folds_csv()
