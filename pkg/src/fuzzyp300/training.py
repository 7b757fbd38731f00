"""AdamW optimisation with a warmup-cosine schedule and early stopping."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import metrics
from .epochs import EpochSet
from .errors import ConfigurationError, NumericalError, RangeError
from .model import ModelDims, ModelState, bce_loss, init_model, loss_and_grad, predict_proba

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 1.5e-3
    batch_size: int = 256
    max_epochs: int = 800
    warmup_epochs: int = 80
    weight_decay: float = 0.05
    patience: int = 50
    min_delta: float = 5e-4
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_floor: float = 0.0
    selection_metric: str = "accuracy"  # "f1" or "loss" (negated validation loss)
    grad_clip: float | None = None  # global L2 norm; None disables

    def validate(self):
        if not 0 <= self.warmup_epochs < self.max_epochs:
            raise ConfigurationError("need 0 <= warmup_epochs < max_epochs")
        if self.patience < 1 or self.batch_size < 1:
            raise ConfigurationError("patience and batch_size must be >= 1")
        if self.base_lr <= 0 or self.weight_decay < 0 or self.eps <= 0:
            raise ConfigurationError("learning rate and eps must be positive, weight decay non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigurationError("betas must lie in [0, 1)")
        if self.selection_metric not in ("accuracy", "f1", "loss"):
            raise ConfigurationError(f"unknown selection metric {self.selection_metric!r}")

    @property
    def peak_lr(self) -> float:
        # linear scaling rule
        return self.base_lr * self.batch_size / 256.0


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to the peak, then cosine decay to ``lr_floor`` at ``max_epochs``."""
    if not 0 <= epoch < cfg.max_epochs:
        raise RangeError(f"epoch {epoch} outside [0, {cfg.max_epochs})")
    peak = cfg.peak_lr
    if epoch < cfg.warmup_epochs:
        return peak * epoch / cfg.warmup_epochs
    progress = (epoch - cfg.warmup_epochs) / (cfg.max_epochs - cfg.warmup_epochs)
    return cfg.lr_floor + (peak - cfg.lr_floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Adam with decoupled weight decay over a ``{name: Param}`` mapping."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = dict(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.value) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in self.params.items()}

    def step(self, lr: float, clip: float | None = None):
        for name, p in self.params.items():
            if not np.all(np.isfinite(p.grad)):
                raise NumericalError(f"non-finite gradient in parameter group {name}")
        scale = 1.0
        if clip is not None:
            norm = math.sqrt(sum(float(np.sum(p.grad ** 2)) for p in self.params.values()))
            if norm > clip:
                scale = clip / norm
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            if not p.requires_grad:
                continue
            g = p.grad * scale
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.value *= 1.0 - lr * self.weight_decay
            p.value -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.grad[...] = 0.0


class EarlyStopping:
    """Tracks the best score; ``update`` returns True once ``patience``
    consecutive epochs fail to beat the best by more than ``min_delta``."""

    def __init__(self, patience: int, min_delta: float):
        self.patience = patience
        self.min_delta = min_delta
        self.best = -math.inf
        self.best_epoch = -1
        self.bad_epochs = 0

    def update(self, epoch: int, score: float) -> tuple[bool, bool]:
        """Returns ``(improved, should_stop)``."""
        if score > self.best + self.min_delta:
            self.best = score
            self.best_epoch = epoch
            self.bad_epochs = 0
            return True, False
        self.bad_epochs += 1
        return False, self.bad_epochs >= self.patience


@dataclass
class TrainRun:
    model: ModelState
    optimizer: AdamW
    config: TrainConfig
    epochs_run: int = 0
    best_score: float = -math.inf
    best_epoch: int = -1
    best_snapshot: dict = field(default_factory=dict)
    best_metrics: dict = field(default_factory=dict)
    history: list = field(default_factory=list)
    stopped_early: bool = False
    wall_time_s: float = 0.0

    def summary(self) -> dict:
        return {
            "best_epoch": self.best_epoch,
            "best_score": self.best_score,
            "selection_metric": self.config.selection_metric,
            "epochs_run": self.epochs_run,
            "stopped_early": self.stopped_early,
            "best_metrics": self.best_metrics,
        }


def iterate_batches(n: int, batch_size: int, rng: np.random.Generator):
    """Seeded shuffle; every index appears once, the last short batch is kept."""
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def evaluate(model: ModelState, data: EpochSet, batch_size: int = 256) -> dict:
    p = predict_proba(model, data.data, batch_size)
    counts = metrics.confusion(p, data.labels)
    out = {"loss": bce_loss(p, data.labels)}
    out.update(metrics.scores(counts))
    return out


def fit(train: EpochSet, valid: EpochSet, cfg: TrainConfig = TrainConfig(),
        model: ModelState | None = None, dims: ModelDims | None = None,
        epoch_log=None) -> TrainRun:
    """Train with early stopping; the returned run's model holds the best
    validation checkpoint.

    ``epoch_log`` may be a writable text stream receiving one JSON line per
    epoch.
    """
    cfg.validate()
    if train.n_trials == 0 or valid.n_trials == 0:
        raise ConfigurationError("training and validation splits must be nonempty")
    if train.data.shape[1:] != valid.data.shape[1:]:
        raise ConfigurationError(f"train {train.data.shape[1:]} and valid {valid.data.shape[1:]} shapes differ")
    if model is None:
        dims = dims or ModelDims(train.n_channels, train.n_samples)
        model = init_model(dims, seed=cfg.seed)

    opt = AdamW(model.params(), cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    run = TrainRun(model=model, optimizer=opt, config=cfg)
    stopper = EarlyStopping(cfg.patience, cfg.min_delta)
    shuffle_rng = np.random.default_rng([cfg.seed, 1])
    dropout_rng = np.random.default_rng([cfg.seed, 2])
    labels = train.labels.astype(np.float64)
    start = time.perf_counter()

    for epoch in range(cfg.max_epochs):
        lr = lr_at(epoch, cfg)
        model.train()
        total, seen = 0.0, 0
        for idx in iterate_batches(train.n_trials, cfg.batch_size, shuffle_rng):
            loss = loss_and_grad(model, train.data[idx], labels[idx], rng=dropout_rng)
            opt.step(lr, cfg.grad_clip)
            total += loss * idx.size
            seen += idx.size
        model.eval()
        val = evaluate(model, valid, cfg.batch_size)
        record = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": total / seen,
            "valid_loss": val["loss"],
            "valid_acc": val["accuracy"],
            "valid_f1": val["f1"],
        }
        run.history.append(record)
        run.epochs_run = epoch + 1
        if epoch_log is not None:
            epoch_log.write(json.dumps(record) + "\n")

        score = -val["loss"] if cfg.selection_metric == "loss" else val[cfg.selection_metric]
        improved, stop = stopper.update(epoch, score)
        if improved:
            run.best_score = stopper.best
            run.best_epoch = epoch
            run.best_snapshot = model.snapshot()
            run.best_metrics = val
        log.debug("epoch %d lr %.3g train %.4f valid acc %.4f", epoch, lr, record["train_loss"], val["accuracy"])
        if stop:
            run.stopped_early = True
            break

    model.load_snapshot(run.best_snapshot)
    run.wall_time_s = time.perf_counter() - start
    return run


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
