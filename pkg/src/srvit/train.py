"""Weighted reflectivity loss, AdamW and the early-stopping training loop."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigurationError, DataError, NumericalError
from .model import ModelConfig, backward, check_params, forward_cached, init_params

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossConfig:
    w0: float = 5.0
    w1: float = 4.0

    def __post_init__(self):
        if self.w0 < 0 or self.w1 <= 0:
            raise ConfigurationError("loss weights must satisfy w0 >= 0, w1 > 0")


def _loss_terms(y, t, cfg: LossConfig):
    y = np.asarray(y, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if y.shape != t.shape:
        raise DataError(f"prediction shape {y.shape} != target shape {t.shape}")
    weight = np.exp(cfg.w0 * t ** cfg.w1)
    return weight, y - t


def weighted_loss(y, t, cfg: LossConfig = LossConfig()) -> float:
    """Mean of ``exp(w0 * t**w1) * (y - t)**2`` over all pixels.

    Targets are expected on the normalized [0, 1] scale; in dBZ the weight
    overflows.
    """
    weight, r = _loss_terms(y, t, cfg)
    return float(np.mean(weight * r * r))


def weighted_loss_grad(y, t, cfg: LossConfig = LossConfig()):
    weight, r = _loss_terms(y, t, cfg)
    return float(np.mean(weight * r * r)), 2.0 * weight * r / r.size


def loss_gradient(params, inputs, targets, model_cfg: ModelConfig,
                  loss_cfg: LossConfig = LossConfig(), rng=None):
    """Weighted loss of a batch and its exact gradient for every parameter.

    ``rng`` switches on dropout (training mode). Raises :class:`NumericalError`
    naming the first tensor whose gradient is not finite.
    """
    y, cache = forward_cached(params, np.asarray(inputs, dtype=np.float64), model_cfg, rng)
    loss, dy = weighted_loss_grad(y, targets, loss_cfg)
    grads = backward(params, cache, dy, model_cfg)
    del grads["input_embedding"]
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError("non-finite gradient", name)
    return loss, grads


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    lr: float = 1e-4
    max_epochs: int = 300
    patience: int = 50
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    max_steps: Optional[int] = None

    def __post_init__(self):
        if self.batch_size <= 0 or self.lr <= 0 or self.max_epochs <= 0:
            raise ConfigurationError("batch_size, lr and max_epochs must be positive")
        if not 0 <= self.patience <= self.max_epochs:
            raise ConfigurationError("patience must be in [0, max_epochs]")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.eps <= 0:
            raise ConfigurationError("invalid AdamW moments")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be non-negative")
        if self.max_steps is not None and self.max_steps <= 0:
            raise ConfigurationError("max_steps must be positive")


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def optimizer_step(params, grads, state: AdamState, cfg: TrainConfig):
    """One AdamW update with bias-corrected moments and decoupled weight decay.

    Returns new ``(params, state)``; the inputs are not modified.
    """
    t = state.step + 1
    b1, b2 = cfg.beta1, cfg.beta2
    new_params, m_new, v_new = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ConfigurationError(f"{name}: gradient shape {g.shape} != {p.shape}")
        m = b1 * state.m.get(name, 0.0) + (1 - b1) * g
        v = b2 * state.v.get(name, 0.0) + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p = p * (1 - cfg.lr * cfg.weight_decay)
        new_params[name] = p - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
        m_new[name], v_new[name] = m, v
    return new_params, AdamState(t, m_new, v_new)


@dataclass
class TrainReport:
    train_loss: list[float]
    val_loss: list[float]
    best_epoch: int
    steps: int
    wall_clock: float
    params: dict

    @property
    def best_val_loss(self) -> float:
        return self.val_loss[self.best_epoch]

    def curve_rows(self):
        return [(e + 1, tr, va) for e, (tr, va) in enumerate(zip(self.train_loss, self.val_loss))]


def dataset_loss(params, inputs, targets, model_cfg: ModelConfig,
                 loss_cfg: LossConfig = LossConfig(), batch_size: int = 16) -> float:
    """Evaluation-mode weighted loss averaged over every pixel of a dataset."""
    total, count = 0.0, 0
    for i in range(0, len(inputs), batch_size):
        x = np.asarray(inputs[i:i + batch_size], dtype=np.float64)
        y, _ = forward_cached(params, x, model_cfg)
        t = targets[i:i + batch_size]
        total += weighted_loss(y, t, loss_cfg) * y.size
        count += y.size
    return total / count


def fit(model_cfg: ModelConfig, train_data, val_data, train_cfg: TrainConfig,
        loss_cfg: LossConfig = LossConfig(), params=None) -> TrainReport:
    """Train with AdamW and early stopping on the validation weighted loss.

    ``train_data`` and ``val_data`` are ``(inputs, targets)`` array pairs of
    shapes ``(N, c, h, w)`` and ``(N, 1, h, w)``; they must be disjoint. The
    returned report carries the parameters of the best validation epoch.
    """
    x_train, t_train = (np.asarray(a, dtype=np.float64) for a in train_data)
    x_val, t_val = (np.asarray(a, dtype=np.float64) for a in val_data)
    if len(x_train) == 0 or len(x_val) == 0:
        raise ConfigurationError("training and validation sets must be non-empty")
    if len(x_train) != len(t_train) or len(x_val) != len(t_val):
        raise ConfigurationError("inputs and targets differ in length")
    model_cfg.check_image(x_train.shape)

    if params is None:
        params = init_params(model_cfg, train_cfg.seed)
    check_params(model_cfg, params)
    state = AdamState()
    start = time.perf_counter()
    train_curve, val_curve = [], []
    best_val, best_epoch, best_params, wait = np.inf, -1, params, 0
    step = 0
    n = len(x_train)

    for epoch in range(train_cfg.max_epochs):
        order = np.random.default_rng([train_cfg.seed, epoch]).permutation(n)
        batch_losses, batch_sizes = [], []
        for i in range(0, n, train_cfg.batch_size):
            idx = order[i:i + train_cfg.batch_size]
            dropout_rng = np.random.default_rng([train_cfg.seed, 1, step])
            loss, grads = loss_gradient(params, x_train[idx], t_train[idx], model_cfg,
                                        loss_cfg, dropout_rng)
            params, state = optimizer_step(params, grads, state, train_cfg)
            batch_losses.append(loss)
            batch_sizes.append(len(idx))
            step += 1
            if train_cfg.max_steps is not None and step >= train_cfg.max_steps:
                break
        train_curve.append(float(np.average(batch_losses, weights=batch_sizes)))
        val = dataset_loss(params, x_val, t_val, model_cfg, loss_cfg, train_cfg.batch_size)
        if not (np.isfinite(val) and np.isfinite(train_curve[-1])):
            raise NumericalError(f"loss diverged in epoch {epoch + 1}", "loss")
        val_curve.append(val)
        log.info("epoch %d step %d train %.6f val %.6f", epoch + 1, step, train_curve[-1], val)

        if val < best_val:
            best_val, best_epoch, best_params, wait = val, epoch, params, 0
        else:
            wait += 1
            if wait >= max(train_cfg.patience, 1):
                break
        if train_cfg.max_steps is not None and step >= train_cfg.max_steps:
            break

    return TrainReport(train_curve, val_curve, best_epoch, step,
                       time.perf_counter() - start, best_params)
