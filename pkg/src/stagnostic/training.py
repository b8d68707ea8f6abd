"""MSE objective, RMSprop with momentum, and the early-stopping training loop.

The optimizer keeps, per parameter, a running mean of squared gradients ``v``
and a momentum buffer ``m`` over the normalized gradient::

    v <- alpha * v + (1 - alpha) * g**2
    m <- mu * m + g / (sqrt(v) + eps)
    theta <- theta - lr * m - lr * lam * theta

Weight decay is decoupled from the adaptive denominator by default; with
``coupled_l2=True`` the term ``lam * theta`` is added to ``g`` instead.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor as tn
from .models import Forecaster, ModelConfig, build_model, match_hidden_width
from .tensor import NonFiniteError, ShapeError, Tensor


class TrainingDivergedError(RuntimeError):
    """Raised when training produces a non-finite loss; ``history`` holds the epochs so far."""

    def __init__(self, message: str, history: History):
        super().__init__(message)
        self.history = history


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 256
    momentum: float = 0.9
    lr: float = 1e-3
    weight_decay: float = 1e-3
    rmsprop_alpha: float = 0.99
    epsilon: float = 1e-8
    max_epochs: int = 200
    early_stop_patience: int = 10
    lr_decay_factor: float = 0.5
    lr_decay_patience: int = 5
    seed: int = 0
    coupled_l2: bool = False

    def __post_init__(self) -> None:
        if not 0.0 < self.lr <= 1.0:
            raise ValueError(f"lr must lie in (0, 1], got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if not 0.0 <= self.weight_decay <= 1.0:
            raise ValueError(f"weight_decay must lie in [0, 1], got {self.weight_decay}")
        if not 0.0 < self.rmsprop_alpha < 1.0:
            raise ValueError(f"rmsprop_alpha must lie in (0, 1), got {self.rmsprop_alpha}")
        if not 0.0 < self.lr_decay_factor <= 1.0:
            raise ValueError(f"lr_decay_factor must lie in (0, 1], got {self.lr_decay_factor}")
        if not self.epsilon > 0.0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        for name in ("batch_size", "max_epochs", "early_stop_patience", "lr_decay_patience"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1, got {getattr(self, name)}")

    def replace(self, **changes) -> TrainConfig:
        return replace(self, **changes)


def mse(pred: Tensor, target: Tensor | np.ndarray) -> Tensor:
    """Mean of squared elementwise differences, as a scalar tensor."""
    if not isinstance(target, Tensor):
        target = Tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: prediction {pred.shape} and target {target.shape} differ")
    d = pred - target
    return tn.mean(d * d)


@dataclass
class RMSpropState:
    v: dict[int, np.ndarray] = field(default_factory=dict)
    m: dict[int, np.ndarray] = field(default_factory=dict)
    steps: int = 0


def rmsprop_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None],
                 state: RMSpropState, cfg: TrainConfig, lr: float | None = None) -> RMSpropState:
    """Update ``params`` in place from ``grads``; state buffers start at zero.

    A ``None`` gradient is treated as zero.  Raises ``NonFiniteError`` naming
    the first parameter whose gradient has a NaN or infinity.
    """
    lr = cfg.lr if lr is None else lr
    alpha, mu, eps, lam = cfg.rmsprop_alpha, cfg.momentum, cfg.epsilon, cfg.weight_decay
    for k, (p, g) in enumerate(zip(params, grads)):
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {p.name or k}")
    for k, (p, g) in enumerate(zip(params, grads)):
        g = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=np.float64)
        if cfg.coupled_l2 and lam:
            g = g + lam * p.data
        if k not in state.v:
            state.v[k] = np.zeros_like(p.data)
            state.m[k] = np.zeros_like(p.data)
        v, m = state.v[k], state.m[k]
        v *= alpha
        v += (1.0 - alpha) * g * g
        m *= mu
        m += g / (np.sqrt(v) + eps)
        step = lr * m
        if lam and not cfg.coupled_l2:
            step = step + lr * lam * p.data
        p.data = p.data - step
    state.steps += 1
    return state


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_mse: float
    val_mse: float
    lr: float
    wall_ms: float


class History(list):
    """Per-epoch records; ``best_epoch`` is the (first) epoch of minimum validation loss."""

    @property
    def best_epoch(self) -> int | None:
        finite = [r for r in self if math.isfinite(r.val_mse)]
        if not finite:
            return None
        return min(finite, key=lambda r: r.val_mse).epoch

    @property
    def best_val_mse(self) -> float:
        finite = [r.val_mse for r in self if math.isfinite(r.val_mse)]
        return min(finite) if finite else math.inf

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_mse", "val_mse", "lr", "wall_ms"])
            for r in self:
                w.writerow([r.epoch, repr(r.train_mse), repr(r.val_mse), repr(r.lr),
                            repr(r.wall_ms)])


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    if batch_size >= n:
        return [order]
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        # batch norm cannot normalize a single sample
        batches[-2] = np.concatenate(batches[-2:])
        batches.pop()
    return batches


def evaluate_mse(model: Forecaster, x: np.ndarray, y: np.ndarray) -> float:
    pred = model.predict(x)
    return float(np.mean((pred - y) ** 2))


def train(model: Forecaster, train_set: tuple[np.ndarray, np.ndarray],
          val_set: tuple[np.ndarray, np.ndarray], cfg: TrainConfig,
          timing: bool = True) -> tuple[Forecaster, History]:
    """Fit ``model`` on ``(X, Y)`` windows with early stopping on validation MSE.

    ``X`` is ``(n, T, S)`` and ``Y`` is ``(n, T', S)``.  The weights (and
    batch-norm statistics) of the best validation epoch are restored before
    returning.  With ``timing=False`` the ``wall_ms`` column is zero so the
    history is reproducible byte for byte.
    """
    x_tr, y_tr = (np.asarray(a, dtype=np.float64) for a in train_set)
    x_va, y_va = (np.asarray(a, dtype=np.float64) for a in val_set)
    if len(x_tr) == 0 or len(x_va) == 0:
        raise ValueError("training and validation sets must be non-empty")
    if len(x_tr) != len(y_tr) or len(x_va) != len(y_va):
        raise ShapeError("inputs and targets differ in length")
    if len(x_tr) < 2:
        raise ValueError("training needs at least two windows")
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    opt = RMSpropState()
    history = History()
    lr = cfg.lr
    best_val = math.inf
    best_state = model.state()
    stale = 0
    since_decay = 0
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        total = 0.0
        try:
            for idx in _batches(len(x_tr), cfg.batch_size, rng):
                for p in params:
                    p.grad = None
                loss = mse(model.forward(Tensor(x_tr[idx]), training=True), y_tr[idx])
                loss.backward()
                rmsprop_step(params, [p.grad for p in params], opt, cfg, lr)
                total += loss.item() * len(idx)
        except NonFiniteError as exc:
            raise TrainingDivergedError(f"training diverged in epoch {epoch}: {exc}",
                                        history) from exc
        val = evaluate_mse(model, x_va, y_va)
        wall = (time.perf_counter() - t0) * 1000.0 if timing else 0.0
        history.append(EpochRecord(epoch, total / len(x_tr), val, lr, wall))
        if not math.isfinite(val):
            raise TrainingDivergedError(f"validation loss became {val} in epoch {epoch}",
                                        history)
        if val < best_val:
            best_val = val
            best_state = model.state()
            stale = 0
            since_decay = 0
        else:
            stale += 1
            since_decay += 1
            if stale >= cfg.early_stop_patience:
                break
            if since_decay >= cfg.lr_decay_patience:
                lr *= cfg.lr_decay_factor
                since_decay = 0
    model.load_state(best_state)
    return model, history


def grid_search_tpast(candidates: Iterable[int], base: ModelConfig,
                      train_set: tuple[np.ndarray, np.ndarray],
                      val_set: tuple[np.ndarray, np.ndarray],
                      cfg: TrainConfig,
                      target_params: int | None = None) -> tuple[int, dict[int, float]]:
    """Pick the A-CNN ``t_past`` with the lowest validation RMSE; ties go to the smallest lag.

    Returns ``(best, scores)`` with ``scores`` mapping each distinct lag to
    its validation RMSE.  With ``target_params`` each candidate gets the
    widest ``H`` that fits the budget.
    """
    lags = sorted(set(int(c) for c in candidates))
    if not lags:
        raise ValueError("t_past grid is empty")
    for lag in lags:
        if not 1 <= lag <= base.T:
            raise ValueError(f"t_past candidate {lag} outside [1, T={base.T}]")
    scores: dict[int, float] = {}
    for lag in lags:
        mc = base.replace(kind="A-CNN", t_past=lag, k=None, adjacency=None, order=None)
        if target_params is not None:
            mc = match_hidden_width(target_params, mc)
        model = build_model(mc)
        _, history = train(model, train_set, val_set, cfg, timing=False)
        scores[lag] = math.sqrt(history.best_val_mse)
    best = min(lags, key=lambda lag: (scores[lag], lag))
    return best, scores


def default_tpast_grid(T: int) -> list[int]:
    return sorted({c for c in (2, 3, 5, 7) if c <= T} | {T})
