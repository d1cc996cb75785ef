from dataclasses import replace

import numpy as np
import pytest

from oracles import central_differences
from srvit.errors import ConfigurationError, NumericalError
from srvit.model import SMOKE, TINY, backward, forward, forward_cached, init_params
from srvit.train import (AdamState, LossConfig, TrainConfig, fit, loss_gradient, optimizer_step,
                         weighted_loss, weighted_loss_grad)


@pytest.mark.parametrize("y, t, expected", [
    ([0.2, 0.9], [0.2, 0.9], 0.0),
    ([0.0], [1.0], 148.4131591025766),
    ([0.5, 0.0], [0.0, 0.0], 0.125),
])
def test_weighted_loss_values(y, t, expected):
    assert weighted_loss(np.array(y), np.array(t)) == pytest.approx(expected, rel=1e-12, abs=0)


def test_weighted_loss_grad_zero_residual():
    t = np.random.default_rng(0).uniform(size=(2, 1, 4, 4))
    loss, g = weighted_loss_grad(t.copy(), t)
    assert loss == 0.0 and not g.any()


def test_weighted_loss_grad_matches_fd():
    rng = np.random.default_rng(1)
    y, t = rng.uniform(size=6), rng.uniform(size=6)
    _, g = weighted_loss_grad(y, t)
    fd = central_differences(lambda p: weighted_loss(p["y"], t), {"y": y}, 1e-6)["y"]
    np.testing.assert_allclose(g, fd, rtol=1e-6)


def _problem(cfg, seed=0):
    params = init_params(cfg, seed)
    rng = np.random.default_rng(seed + 100)
    for name in params:
        if name.startswith("conv") and name.endswith(".b"):
            params[name] = rng.uniform(0.2, 0.5, size=params[name].shape)
    x = rng.uniform(size=(1, cfg.in_channels, 4, 4))
    t = rng.uniform(size=(1, 1, 4, 4))
    return params, x, t


@pytest.mark.parametrize("cfg", [
    TINY,
    replace(TINY, residual=True),
    replace(TINY, use_conv_head=False),
    replace(TINY, attn_scale="inner_dim", pos_encoding="1d"),
])
def test_gradients_match_finite_differences(cfg):
    params, x, t = _problem(cfg)
    loss, grads = loss_gradient(params, x, t, cfg)
    assert set(grads) == set(params)
    assert all(grads[k].shape == params[k].shape for k in params)
    fd = central_differences(lambda p: weighted_loss(forward(p, x, cfg), t), params, 1e-4)
    for name in params:
        np.testing.assert_allclose(grads[name], fd[name], rtol=1e-4, atol=1e-6, err_msg=name)


def test_finite_difference_error_is_second_order():
    # at a 1e-3 step the FD oracle carries O(h^2) truncation error; shrinking h
    # tenfold must shrink the discrepancy about a hundredfold
    params, x, t = _problem(TINY)
    _, grads = loss_gradient(params, x, t, TINY)

    def err(h):
        fd = central_differences(lambda p: weighted_loss(forward(p, x, TINY), t), params, h)
        return max(float(np.max(np.abs(fd[k] - grads[k]))) for k in params)

    e3, e4 = err(1e-3), err(1e-4)
    assert e3 < 1e-4
    assert 50 < e3 / e4 < 200


def test_input_embedding_gradient():
    cfg = TINY
    params, x, t = _problem(cfg)
    y, cache = forward_cached(params, x, cfg)
    _, dy = weighted_loss_grad(y, t)
    dX = backward(params, cache, dy, cfg)["input_embedding"]
    assert dX.shape == (1, 4, cfg.model_dim)
    # embed.b receives the column sums of the embedding gradient
    np.testing.assert_allclose(dX.sum(axis=(0, 1)),
                               backward(params, cache, dy, cfg)["embed.b"], rtol=1e-12)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_gradient_names_tensor():
    params, x, t = _problem(TINY)
    params["decode.b"] = params["decode.b"] + np.inf
    with pytest.raises(NumericalError) as info:
        loss_gradient(params, x, t, TINY)
    assert info.value.tensor


# ---------------------------------------------------------------- AdamW

def test_adamw_zero_gradient_zero_decay():
    cfg = TrainConfig(weight_decay=0.0, lr=0.1)
    params = {"w": np.array([1.0, -2.0])}
    new, state = optimizer_step(params, {"w": np.zeros(2)}, AdamState(), cfg)
    assert np.array_equal(new["w"], params["w"]) and state.step == 1


def test_adamw_first_step():
    cfg = TrainConfig(weight_decay=0.0, lr=1e-3, eps=1e-8)
    new, _ = optimizer_step({"w": np.array([0.5])}, {"w": np.array([1.0])}, AdamState(), cfg)
    assert new["w"][0] == pytest.approx(0.5 - 1e-3 / (1 + 1e-8), rel=1e-15)


def test_adamw_decoupled_decay():
    cfg = TrainConfig(weight_decay=0.1, lr=1e-2)
    new, _ = optimizer_step({"w": np.array([2.0])}, {"w": np.array([0.0])}, AdamState(), cfg)
    assert new["w"][0] == pytest.approx(2.0 * (1 - 1e-3))


def test_adamw_does_not_mutate_inputs():
    params = {"w": np.ones(3)}
    optimizer_step(params, {"w": np.ones(3)}, AdamState(), TrainConfig())
    assert np.array_equal(params["w"], np.ones(3))


# ---------------------------------------------------------------- fit

def _data(n, seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(size=(n, 4, 8, 8))
    t = np.clip(x[:, :1] * 0.5, 0, 1)
    return x, t


CFG = replace(SMOKE, patch_size=4, depth=1, conv_hiddens=(4,))


def test_fit_is_deterministic():
    tc = TrainConfig(batch_size=2, lr=1e-3, max_epochs=3, patience=3, seed=4)
    a = fit(CFG, _data(4, 0), _data(2, 1), tc)
    b = fit(CFG, _data(4, 0), _data(2, 1), tc)
    assert a.train_loss == b.train_loss and a.val_loss == b.val_loss
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


def test_fit_best_epoch_and_curves():
    tc = TrainConfig(batch_size=2, lr=1e-3, max_epochs=4, patience=4)
    r = fit(CFG, _data(4, 0), _data(2, 1), tc)
    assert len(r.train_loss) == len(r.val_loss) == 4
    assert r.val_loss[r.best_epoch] == min(r.val_loss)
    assert r.steps == 8
    assert [row[0] for row in r.curve_rows()] == [1, 2, 3, 4]


def test_fit_patience_zero_stops_at_first_non_improvement():
    tc = TrainConfig(batch_size=4, lr=0.5, max_epochs=20, patience=0)
    r = fit(CFG, _data(4, 0), _data(2, 1), tc)
    worse = [i for i in range(1, len(r.val_loss)) if r.val_loss[i] >= min(r.val_loss[:i])]
    assert worse and len(r.val_loss) == worse[0] + 1


def test_fit_max_steps():
    tc = TrainConfig(batch_size=1, lr=1e-3, max_epochs=10, patience=10, max_steps=3)
    assert fit(CFG, _data(4, 0), _data(2, 1), tc).steps == 3


def test_fit_rejects_empty_validation():
    x, t = _data(2, 0)
    with pytest.raises(ConfigurationError):
        fit(CFG, (x, t), (x[:0], t[:0]), TrainConfig())


def test_config_validation():
    with pytest.raises(ConfigurationError):
        LossConfig(w0=-1)
    with pytest.raises(ConfigurationError):
        TrainConfig(patience=400)
    with pytest.raises(ConfigurationError):
        TrainConfig(lr=0)
