import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kronsae import sae, training
from kronsae.errors import ContractError, MetricError, TrainingError
from kronsae.numerics import make_rng
from kronsae.sae import LossConfig, SaeDims
from kronsae.training import GroupSchedule, OptimizerState, TrainConfig

from gradcheck import random_instance
from oracles import lr_reference, naive_ev, naive_matryoshka


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 5000), st.floats(0.0, 0.5), st.data())
def test_lr_schedule_matches_reference(total, warm, data):
    cfg = TrainConfig(warmup_frac=warm)
    step = data.draw(st.integers(0, total))
    assert training.lr_at(cfg, step, total) == pytest.approx(
        lr_reference(step, total, cfg.lr_init, cfg.lr_min, warm), rel=1e-12, abs=1e-18
    )


def test_lr_schedule_endpoints():
    cfg = TrainConfig()
    assert training.lr_at(cfg, 0, 1000) == 0.0
    assert training.lr_at(cfg, 100, 1000) == pytest.approx(8e-4)
    assert training.lr_at(cfg, 1000, 1000) == pytest.approx(1e-6)
    lrs = [training.lr_at(cfg, s, 1000) for s in range(100, 1001)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(ContractError):
        training.lr_at(cfg, 1001, 1000)


def test_config_validation():
    with pytest.raises(ContractError):
        TrainConfig(lr_min=1e-2, lr_init=1e-3)
    with pytest.raises(ContractError):
        TrainConfig(warmup_frac=1.0)
    with pytest.raises(ContractError):
        TrainConfig(batch_size=0)
    assert TrainConfig(batch_size=256, token_budget=256 * 30 + 5).total_steps == 30


def test_adamw_hand_computed():
    p = sae.TopKSaeParams(W_enc=np.array([[1.0]]), b_enc=np.array([0.0]), W_dec=np.array([[2.0]]), b_dec=np.array([0.0]))
    g = sae.TopKSaeParams(W_enc=np.array([[0.5]]), b_enc=np.array([0.0]), W_dec=np.array([[-3.0]]), b_dec=np.array([1e-3]))
    cfg = TrainConfig(weight_decay=0.1, adam_eps=1e-8)
    lr = 0.01
    new, state = training.adamw_step(p, g, OptimizerState.zeros_like(p), lr, cfg)
    # after one step m_hat = g and v_hat = g^2, so the move is lr * g / (|g| + eps)
    assert new.W_enc[0, 0] == pytest.approx(1.0 * (1 - lr * 0.1) - lr * 0.5 / (0.5 + 1e-8), rel=1e-14)
    assert new.W_dec[0, 0] == pytest.approx(2.0 * (1 - lr * 0.1) + lr * 3.0 / (3.0 + 1e-8), rel=1e-14)
    assert state.t == 1
    # second step with the same gradient, bias corrections applied by hand
    new2, state2 = training.adamw_step(new, g, state, lr, cfg)
    m = 0.9 * 0.05 + 0.1 * 0.5
    v = 0.999 * 0.00025 + 0.001 * 0.25
    step = lr * (m / (1 - 0.9**2)) / (math.sqrt(v / (1 - 0.999**2)) + 1e-8)
    assert new2.W_enc[0, 0] == pytest.approx(new.W_enc[0, 0] * (1 - lr * 0.1) - step, rel=1e-14)
    assert p.W_enc[0, 0] == 1.0  # inputs untouched


def test_adamw_rejects_nonfinite():
    p = sae.init_topk(SaeDims(d=2, F=3, k=1), make_rng(0))
    g = p.zeros_like()
    g.W_dec[0, 0] = np.nan
    with pytest.raises(TrainingError, match="W_dec"):
        training.adamw_step(p, g, OptimizerState.zeros_like(p), 1e-3, TrainConfig())


def test_explained_variance_reference_values():
    rng = make_rng(1)
    x = rng.standard_normal((7, 5))
    assert training.explained_variance(x, x) == pytest.approx(1.0, abs=1e-12)
    mean_pred = np.broadcast_to(x.mean(axis=0), x.shape)
    assert training.explained_variance(x, mean_pred) == pytest.approx(0.0, abs=1e-12)
    noisy = x + 0.3 * rng.standard_normal(x.shape)
    assert training.explained_variance(x, noisy) == pytest.approx(naive_ev(x, noisy), rel=1e-12)


def test_explained_variance_errors():
    with pytest.raises(ContractError):
        training.explained_variance(np.ones((1, 3)), np.ones((1, 3)))
    with pytest.raises(ContractError):
        training.explained_variance(np.ones((2, 3)), np.ones((2, 4)))
    x = np.array([[1.0, 2.0], [3.0, 4.0], [2.0, 3.0]])  # last row is the mean
    with pytest.raises(MetricError):
        training.explained_variance(x, x)


def test_matryoshka_loss_function():
    rng = make_rng(2)
    dims = SaeDims(d=5, F=8, k=3)
    params, x, _ = random_instance("topk", dims, rng)
    f = sae.encode(params, dims, "mand", x).f
    sched = GroupSchedule.doubling(8, 2)
    assert sched.group_sizes == (2, 2, 4)
    for raw in (False, True):
        ref = naive_matryoshka(x, f, params.W_dec, params.b_dec, sched.prefixes(), raw_sum=raw)
        assert training.matryoshka_loss(x, f, params, sched, raw) == pytest.approx(ref, rel=1e-12)


def test_group_schedules():
    assert GroupSchedule.doubling(256, 16).group_sizes == (16, 16, 32, 64, 128)
    assert GroupSchedule.single(64).prefixes() == (64,)
    with pytest.raises(ContractError):
        GroupSchedule.doubling(96, 16)
    with pytest.raises(ContractError, match="split a head"):
        GroupSchedule((4, 12)).validate(16, head_size=8)
    with pytest.raises(ContractError):
        GroupSchedule((4, 4)).validate(16)


def test_aux_loss_agrees_with_objective():
    rng = make_rng(3)
    params, x, dead = random_instance("kron", SaeDims.kron(d=8, h=2, m=2, n=3, k=4), rng)
    dims = SaeDims.kron(d=8, h=2, m=2, n=3, k=4)
    cfg = LossConfig(aux_coeff=0.5, aux_k=2)
    res = sae.forward_backward(params, dims, "mand", x, cfg, dead_mask=dead)
    direct = training.aux_loss(x - res.x_hat, np.flatnonzero(dead), params, 2, res.trace.scores)
    assert direct == pytest.approx(res.metrics["aux"], rel=1e-12)
    assert res.loss == pytest.approx(res.metrics["mse"] + 0.5 * direct, rel=1e-12)


def test_iterate_batches_epochs():
    data = np.arange(12, dtype=float).reshape(6, 2)
    it = training.iterate_batches(data, 2, make_rng(0))
    rows = np.vstack([next(it) for _ in range(3)])
    assert sorted(rows[:, 0]) == [0, 2, 4, 6, 8, 10]
    with pytest.raises(ContractError):
        next(training.iterate_batches(data, 7, make_rng(0)))


def _blobs(n=2048, d=16, seed=0):
    rng = make_rng(seed)
    basis = rng.standard_normal((48, d))
    codes = rng.random((n, 48)) * (rng.random((n, 48)) < 0.06)
    return codes @ basis


@pytest.mark.parametrize("kind", ["topk", "kron"])
def test_training_improves_and_is_deterministic(kind):
    dims = SaeDims.kron(d=16, h=4, m=2, n=8, k=6) if kind == "kron" else SaeDims(d=16, F=64, k=6)
    data = _blobs()
    cfg = TrainConfig(batch_size=64, token_budget=64 * 300, eval_interval=50, seed=5)
    runs = []
    for _ in range(2):
        p0 = sae.init_params(kind, dims, make_rng(1))
        runs.append(training.train(p0, dims, "mand", data, cfg))
    assert [r.csv_row() for r in runs[0].log] == [r.csv_row() for r in runs[1].log]
    assert len(runs[0].log) == 6 and runs[0].log[-1].step == 300
    before = training.evaluate(sae.init_params(kind, dims, make_rng(1)), dims, "mand", data)["ev"]
    after = training.evaluate(runs[0].params, dims, "mand", data)["ev"]
    assert after > before + 0.2


def test_training_rejects_bad_inputs():
    dims = SaeDims(d=4, F=8, k=2)
    p = sae.init_topk(dims, make_rng(0))
    with pytest.raises(ContractError):
        training.train(p, dims, "mand", np.zeros((100, 5)), TrainConfig(batch_size=10, token_budget=100))
    bad = make_rng(0).standard_normal((100, 4))
    bad[:, 0] = np.inf
    with pytest.raises(TrainingError, match="step 0"):
        training.train(p, dims, "mand", bad, TrainConfig(batch_size=10, token_budget=100))


def test_zero_budget_returns_init():
    dims = SaeDims(d=4, F=8, k=2)
    p = sae.init_topk(dims, make_rng(0))
    res = training.train(p, dims, "mand", np.zeros((4, 4)), TrainConfig(token_budget=0))
    assert res.params is p and res.log == []


def test_dead_latents_tracked():
    dims = SaeDims(d=4, F=32, k=1)
    p = sae.init_topk(dims, make_rng(0))
    data = make_rng(1).standard_normal((64, 4))
    res = training.train(p, dims, "mand", data, TrainConfig(batch_size=16, token_budget=16 * 40, dead_threshold=64, eval_interval=10))
    assert res.dead_mask.shape == (32,)
    assert res.log[-1].dead_latent_count == int(res.dead_mask.sum())
    assert res.dead_mask.any()
