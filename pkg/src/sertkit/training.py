"""Masked-MSE objective, Adam, the fit loop, and a finite-difference gradcheck."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import SampleWindow
from .encoding import NormStats, VariableVocabulary
from .errors import ConfigError, NumericalError
from .model import ModelConfig, forward, init_params, make_batch
from .seeding import stream
from .tensor import ParameterStore, ShapeError, Tensor, mul, no_grad, record_relu_patterns

log = logging.getLogger(__name__)


def masked_mse(pred: Tensor, target, mask) -> Tensor:
    """(1/J) * sum_j sum_k m_jk (pred_jk - y_jk)^2.

    Target entries where the mask is false are never read, so any value
    (even non-finite) there has no effect on the loss or its gradient.
    """
    target = np.asarray(target, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != target.shape or pred.shape != mask.shape:
        raise ShapeError(f"pred {pred.shape}, target {target.shape}, mask {mask.shape} must agree")
    J = pred.shape[0]
    if J == 0:
        raise ValueError("masked_mse needs at least one sample")
    diff = mul(pred - np.where(mask, target, 0.0), mask.astype(np.float64))
    return (diff * diff).sum() * (1.0 / J)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 5
    seed: int = 0
    clip_norm: float = 5.0

    def validate(self) -> TrainConfig:
        if self.lr < 0 or self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1 or self.clip_norm <= 0:
            raise ConfigError("lr must be >= 0; batch_size, max_epochs, patience, clip_norm must be positive")
        if self.patience > self.max_epochs:
            raise ConfigError(f"patience ({self.patience}) must not exceed max_epochs ({self.max_epochs})")
        return self


@dataclass
class LossReport:
    epoch: int
    train_loss: float
    val_loss: float
    sec_per_epoch: float


class Adam:
    def __init__(self, params: ParameterStore, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_grad_norm(params: ParameterStore, max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for _, p in params.items()))
    if total > max_norm:
        scale = max_norm / total
        for _, p in params.items():
            p.grad = p.grad * scale
    return total


def evaluate_loss(kind, windows, params, config, stats, batch_size: int = 64) -> float:
    """Masked MSE over all windows, without dropout."""
    total = 0.0
    for s in range(0, len(windows), batch_size):
        batch = make_batch(windows[s:s + batch_size], stats, config)
        with no_grad():
            loss = masked_mse(forward(kind, batch, params, config), batch.targets, batch.target_mask)
        total += loss.item() * len(batch)
    return total / len(windows)


@dataclass
class FitResult:
    params: ParameterStore
    reports: list[LossReport] = field(default_factory=list)
    best_epoch: int = 0


def fit(
    kind: str,
    train_windows: Sequence[SampleWindow],
    val_windows: Sequence[SampleWindow],
    config: ModelConfig,
    train_config: TrainConfig,
    vocab: VariableVocabulary,
    stats: NormStats,
    on_improve: Callable[[int, ParameterStore], None] | None = None,
    params: ParameterStore | None = None,
) -> FitResult:
    """Train with Adam on shuffled mini-batches and early stopping.

    Returns the parameters of the best validation epoch. All randomness
    (init, shuffling, dropout) comes from ``train_config.seed``.
    """
    config.validate()
    train_config.validate()
    if not train_windows or not val_windows:
        raise ConfigError("fit needs at least one training and one validation window")
    if params is None:
        params = init_params(kind, config, vocab, stream(train_config.seed, "init"))
    shuffle_rng = stream(train_config.seed, "batching")
    dropout_rng = stream(train_config.seed, "dropout")
    opt = Adam(params, lr=train_config.lr)
    best = math.inf
    best_params = params.copy()
    best_epoch = 0
    reports: list[LossReport] = []
    stale = 0
    n = len(train_windows)
    for epoch in range(1, train_config.max_epochs + 1):
        started = time.perf_counter()
        order = shuffle_rng.permutation(n)
        running = 0.0
        for s in range(0, n, train_config.batch_size):
            chunk = [train_windows[i] for i in order[s:s + train_config.batch_size]]
            batch = make_batch(chunk, stats, config)
            params.zero_grads()
            loss = masked_mse(forward(kind, batch, params, config, dropout_rng), batch.targets, batch.target_mask)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericalError(f"non-finite training loss at epoch {epoch}, batch starting {s}")
            loss.backward()
            norm = clip_grad_norm(params, train_config.clip_norm)
            if not math.isfinite(norm):
                raise NumericalError(f"non-finite gradient norm at epoch {epoch}, batch starting {s}")
            opt.step()
            running += value * len(chunk)
        val = evaluate_loss(kind, val_windows, params, config, stats)
        if not math.isfinite(val):
            raise NumericalError(f"non-finite validation loss at epoch {epoch}")
        reports.append(LossReport(epoch, running / n, val, time.perf_counter() - started))
        log.info("epoch %d train %.6f val %.6f", epoch, running / n, val)
        if val < best:
            best, best_epoch, stale = val, epoch, 0
            best_params = params.copy()
            if on_improve is not None:
                on_improve(epoch, best_params)
        else:
            stale += 1
            if stale >= train_config.patience:
                break
    return FitResult(best_params, reports, best_epoch)


@dataclass
class GradcheckReport:
    max_rel_error: float
    checked: int
    skipped_kinks: int


def gradcheck_report(
    kind: str,
    windows: Sequence[SampleWindow],
    config: ModelConfig,
    vocab: VariableVocabulary,
    stats: NormStats,
    seed: int,
    step: float = 1e-3,
    max_coords: int | None = None,
    floor: float = 1e-7,
    params: ParameterStore | None = None,
) -> GradcheckReport:
    """Compare backprop gradients of the masked MSE to central differences.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``; ``floor`` keeps
    coordinates whose true gradient is zero from dividing noise by noise.
    A coordinate whose +-step perturbation flips any relu unit has a kink
    inside the stencil, where central differences do not estimate the
    derivative; such coordinates are skipped and counted. With
    ``max_coords`` a seeded subsample of coordinates is checked.
    """
    if params is None:
        params = init_params(kind, config, vocab, stream(seed, "init"))
    batch = make_batch(windows, stats, config)

    def evaluate():
        with no_grad(), record_relu_patterns() as pattern:
            value = masked_mse(forward(kind, batch, params, config), batch.targets, batch.target_mask)
        return value, pattern

    params.zero_grads()
    with record_relu_patterns() as base:
        loss = masked_mse(forward(kind, batch, params, config), batch.targets, batch.target_mask)
    loss.backward()
    coords = [(name, i) for name, p in params.items() for i in range(p.data.size)]
    if max_coords is not None and len(coords) > max_coords:
        pick = stream(seed, "gradcheck").choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in sorted(pick)]
    worst, checked, skipped = 0.0, 0, 0
    for name, i in coords:
        p = params[name]
        flat = p.data.reshape(-1)
        orig = flat[i]
        flat[i] = orig + step
        up, up_pattern = evaluate()
        flat[i] = orig - step
        down, down_pattern = evaluate()
        flat[i] = orig
        if not (_same_pattern(base, up_pattern) and _same_pattern(base, down_pattern)):
            skipped += 1
            continue
        numeric = (up.item() - down.item()) / (2 * step)
        analytic = p.grad.reshape(-1)[i]
        worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor))
        checked += 1
    return GradcheckReport(worst, checked, skipped)


def _same_pattern(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def gradcheck(kind, windows, config, vocab, stats, seed, **kwargs) -> float:
    """Worst relative error; see :func:`gradcheck_report`."""
    return gradcheck_report(kind, windows, config, vocab, stats, seed, **kwargs).max_rel_error
