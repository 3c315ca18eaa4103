"""Mini-batch training, negative sampling and the two-phase early-stop protocol."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from . import nn, rng
from .models import TwoStreamScorer, build_reconstruction_net, build_two_stream
from .nn import AdamState, Network


class TrainingError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 100
    max_epochs: int = 60
    seed: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    negative_ratio: int = 10
    bn_momentum: float = nn.BN_MOMENTUM
    bn_epsilon: float = nn.BN_EPSILON
    ridge_lambda: float = 1.0
    ridge_grid: bool = False
    fit_intercept: bool = False

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.negative_ratio < 1:
            raise ValueError("negative_ratio must be >= 1")

    def adam(self) -> AdamState:
        return AdamState(lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.adam_eps)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float
    seconds: float

    def key(self):
        """Everything but wall time (for determinism comparisons)."""
        return (self.epoch, self.train_loss, self.val_loss)


def write_epoch_logs(path, logs: Sequence[EpochLog]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "seconds"])
        for log in logs:
            w.writerow([log.epoch, repr(log.train_loss), repr(log.val_loss), f"{log.seconds:.6f}"])


def read_epoch_logs(path) -> list[EpochLog]:
    with open(path, newline="") as fh:
        return [EpochLog(int(r["epoch"]), float(r["train_loss"]), float(r["val_loss"]), float(r["seconds"]))
                for r in csv.DictReader(fh)]


def minibatches(n: int, batch_size: int, gen: np.random.Generator):
    """Shuffled index batches; a ragged tail of one row is dropped (batch norm
    cannot normalise a single row)."""
    order = gen.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if len(idx) >= 2:
            yield idx


def _finite(value: float, epoch: int, where: str) -> float:
    if not math.isfinite(value):
        raise TrainingError(f"non-finite {where} loss at epoch {epoch}")
    return value


def train_reconstruction(net: Network, X, Y, config: TrainConfig, epochs: int, val=None):
    """Adam on batch MSE. Returns a trained copy of ``net`` and per-epoch logs."""
    net = net.copy()
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if len(X) == 0:
        raise ValueError("no training pairs")
    if X.shape[1] != net.in_dim or Y.shape[1] != net.out_dim:
        raise ValueError(f"pair dims {X.shape[1]}->{Y.shape[1]} do not match net {net.in_dim}->{net.out_dim}")
    obj = nn.NetworkObjective(net)
    state = config.adam()
    shuffle = rng.stream(config.seed, "train", "shuffle")
    logs = []
    for epoch in range(1, epochs + 1):
        t0 = time.perf_counter()
        total, count = 0.0, 0
        for idx in minibatches(len(X), config.batch_size, shuffle):
            value, grads = obj.loss_and_grads((X[idx], Y[idx]), nn.mse_loss)
            _finite(value, epoch, "train")
            nn.adam_step(net.params(), grads, state)
            total += value * len(idx)
            count += len(idx)
        train_loss = total / count if count else float("nan")
        val_loss = float("nan")
        if val is not None:
            val_loss = _finite(float(nn.mse_loss(net(val[0]), val[1])[0]), epoch, "validation")
        logs.append(EpochLog(epoch, train_loss, val_loss, time.perf_counter() - t0))
    return net, logs


def sample_negatives(n: int, ratio: int, gen: np.random.Generator):
    """``ratio * n`` index pairs (i, j), uniform over ordered pairs with i != j."""
    if n < 2:
        raise ValueError("negative sampling needs at least 2 pairs")
    m = ratio * n
    i = gen.integers(0, n, size=m)
    j = gen.integers(0, n - 1, size=m)
    j = j + (j >= i)
    return i, j


def balanced_examples(Xs, Xt, ratio: int, gen: np.random.Generator):
    """Positives (label 1, weight 1/n_pos) plus fresh negatives (label 0, weight 1/n_neg)."""
    n = len(Xs)
    i, j = sample_negatives(n, ratio, gen)
    m = len(i)
    xs = np.concatenate([Xs, Xs[i]])
    xt = np.concatenate([Xt, Xt[j]])
    y = np.concatenate([np.ones(n), np.zeros(m)])
    w = np.concatenate([np.full(n, 1.0 / n), np.full(m, 1.0 / m)])
    return xs, xt, y, w


def two_stream_validation_set(Xs, Xt, config: TrainConfig):
    """Validation examples with negatives frozen by the seed."""
    return balanced_examples(np.asarray(Xs, dtype=np.float64), np.asarray(Xt, dtype=np.float64),
                             config.negative_ratio, rng.stream(config.seed, "val", "negatives"))


def two_stream_loss(scorer: TwoStreamScorer, examples) -> float:
    xs, xt, y, w = examples
    return float(nn.weighted_bce_loss(scorer.score(xs, xt), y, w)[0])


def train_two_stream(scorer: TwoStreamScorer, Xs, Xt, config: TrainConfig, epochs: int, val=None):
    """Weighted-BCE training with negatives redrawn every epoch."""
    scorer = scorer.copy()
    Xs = np.asarray(Xs, dtype=np.float64)
    Xt = np.asarray(Xt, dtype=np.float64)
    if len(Xs) != len(Xt):
        raise ValueError("source and target sets differ in length")
    val_examples = None if val is None else two_stream_validation_set(val[0], val[1], config)
    state = config.adam()
    neg_gen = rng.stream(config.seed, "train", "negatives")
    shuffle = rng.stream(config.seed, "train", "shuffle")
    logs = []
    for epoch in range(1, epochs + 1):
        t0 = time.perf_counter()
        xs, xt, y, w = balanced_examples(Xs, Xt, config.negative_ratio, neg_gen)
        total, count = 0.0, 0
        for idx in minibatches(len(xs), config.batch_size, shuffle):
            value, grads = scorer.loss_and_grads((xs[idx], xt[idx], y[idx], w[idx]))
            _finite(value, epoch, "train")
            nn.adam_step(scorer.params(), grads, state)
            total += value * len(idx)
            count += len(idx)
        train_loss = total / count if count else float("nan")
        val_loss = float("nan")
        if val_examples is not None:
            val_loss = _finite(two_stream_loss(scorer, val_examples), epoch, "validation")
        logs.append(EpochLog(epoch, train_loss, val_loss, time.perf_counter() - t0))
    return scorer, logs


def select_epoch(val_losses: Sequence[float]) -> int:
    """1-based epoch of the minimum validation loss; earliest wins ties."""
    vals = np.asarray(val_losses, dtype=np.float64)
    if vals.size == 0 or not np.isfinite(vals).all():
        raise ValueError("validation losses must be a non-empty finite sequence")
    return int(np.argmin(vals)) + 1


@dataclass
class ProtocolResult:
    model: object
    best_epoch: int
    phase1_logs: list[EpochLog]
    phase2_logs: list[EpochLog]


def early_stop_protocol(build: Callable[[], object], fit: Callable, train_set: tuple, val_set: tuple,
                        max_epochs: int) -> ProtocolResult:
    """Train with validation to pick the epoch count, then retrain from scratch
    on train + validation for exactly that many epochs.

    ``fit(model, data, epochs, val)`` returns ``(model, logs)``; ``build()``
    must return the same initial model every call.
    """
    _, logs1 = fit(build(), train_set, max_epochs, val_set)
    best = select_epoch([log.val_loss for log in logs1])
    merged = tuple(np.concatenate([a, b]) for a, b in zip(train_set, val_set))
    model, logs2 = fit(build(), merged, best, None)
    return ProtocolResult(model, best, logs1, logs2)


def reconstruction_protocol(kind: str, train_set, val_set, config: TrainConfig) -> ProtocolResult:
    def build():
        return build_reconstruction_net(kind, rng.stream(config.seed, "init", "reconstruction"),
                                        momentum=config.bn_momentum, eps=config.bn_epsilon)

    def fit(net, data, epochs, val):
        return train_reconstruction(net, data[0], data[1], config, epochs, val)

    return early_stop_protocol(build, fit, train_set, val_set, config.max_epochs)


def two_stream_protocol(kind: str, train_set, val_set, config: TrainConfig) -> ProtocolResult:
    def build():
        return build_two_stream(kind, rng.stream(config.seed, "init", "two_stream"),
                                momentum=config.bn_momentum, eps=config.bn_epsilon)

    def fit(scorer, data, epochs, val):
        return train_two_stream(scorer, data[0], data[1], config, epochs, val)

    return early_stop_protocol(build, fit, train_set, val_set, config.max_epochs)
