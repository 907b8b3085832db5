"""Adam, the MSE training loop with early stopping, evaluation and the
forward-time scaling benchmark."""

from __future__ import annotations

import dataclasses
import logging
import os
import statistics
import time
import tracemalloc
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import DataError, WindowedDataset, naive_forecast
from .model import ASGMamba, ModelConfig
from .tensor import Tensor

log = logging.getLogger(__name__)


class NumericalError(FloatingPointError):
    """Non-finite loss or gradient during training."""


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-5
    decoupled: bool = True
    batch_size: int = 32
    max_epochs: int = 10
    patience: int = 5

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptimizerState,
              cfg: TrainConfig = TrainConfig()) -> OptimizerState:
    """One in-place Adam update.

    Decoupled decay subtracts ``lr * wd * theta`` after the adaptive step;
    the coupled form adds ``wd * theta`` to the gradient instead.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {name}")
    state.t += 1
    t = state.t
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        theta = p.data
        if not cfg.decoupled and cfg.weight_decay:
            g = g + cfg.weight_decay * theta
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        update = cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        if cfg.decoupled and cfg.weight_decay:
            update = update + cfg.lr * cfg.weight_decay * theta
        p.data = theta - update
    return state


class EarlyStopping:
    """Stop once validation loss has failed to improve ``patience`` epochs in a row."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = float("inf")
        self.best_epoch = -1
        self.bad_epochs = 0

    def step(self, val_loss: float, epoch: int) -> bool:
        if val_loss < self.best:
            self.best = val_loss
            self.best_epoch = epoch
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        return self.bad_epochs >= self.patience


@dataclass
class TrainRun:
    seed: int
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_state: dict[str, np.ndarray] = field(default_factory=dict)
    stopped_early: bool = False
    fusion_sum_max_dev: float = 0.0
    steps: int = 0

    @property
    def epochs_run(self) -> int:
        return len(self.train_loss)


def mse_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    d = pred - Tensor(np.asarray(target, dtype=pred.dtype))
    return T.mean(d * d)


def _predict(model: ASGMamba, inputs: np.ndarray, batch_size: int = 256) -> np.ndarray:
    outs = []
    with T.no_grad():
        for i in range(0, len(inputs), batch_size):
            outs.append(model(inputs[i:i + batch_size]).data)
    if not outs:
        return np.zeros((0, model.config.horizon, model.config.n_vars))
    return np.concatenate(outs, axis=0)


def predict(model: ASGMamba, inputs: np.ndarray, batch_size: int = 256, threads: int | None = None) -> np.ndarray:
    """Eval-mode forecasts; ``threads`` (or ASGM_THREADS) splits batches across workers."""
    threads = threads or int(os.environ.get("ASGM_THREADS", "1") or 1)
    if threads <= 1 or len(inputs) <= batch_size:
        return _predict(model, inputs, batch_size)
    chunks = [inputs[i:i + batch_size] for i in range(0, len(inputs), batch_size)]
    # last_gates/last_spectra diagnostics are not meaningful under threads
    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(pool.map(lambda c: _predict(model, c, batch_size), chunks))
    return np.concatenate(parts, axis=0)


def dataset_loss(model: ASGMamba, ds: WindowedDataset, batch_size: int = 256) -> float:
    if len(ds) == 0:
        return float("nan")
    pred = _predict(model, ds.inputs, batch_size)
    return float(np.mean((pred - ds.targets) ** 2))


def train(model_config: ModelConfig, datasets: dict[str, WindowedDataset], seed: int = 0,
          train_config: TrainConfig = TrainConfig(), model: ASGMamba | None = None,
          on_epoch=None) -> tuple[ASGMamba, TrainRun]:
    """Minimise MSE on the standardised scale; the returned model holds the
    best-validation parameters."""
    train_ds = datasets.get("train")
    if train_ds is None or len(train_ds) == 0:
        raise DataError("training set is empty")
    val_ds = datasets.get("val")
    rng = np.random.default_rng(seed)
    model = model or ASGMamba(model_config, seed=seed)
    run = TrainRun(seed=seed)
    opt = OptimizerState()
    stopper = EarlyStopping(train_config.patience)
    n = len(train_ds)
    bs = train_config.batch_size

    for epoch in range(train_config.max_epochs):
        order = rng.permutation(n)
        total, count = 0.0, 0
        for i in range(0, n, bs):
            idx = order[i:i + bs]
            model.zero_grad()
            loss = mse_loss(model(train_ds.inputs[idx], training=True, rng=rng), train_ds.targets[idx])
            value = loss.item()
            if not np.isfinite(value):
                raise NumericalError(f"non-finite training loss at epoch {epoch}, step {run.steps}")
            loss.backward()
            grads = {k: p.grad for k, p in model.params.items() if p.grad is not None}
            adam_step(model.params, grads, opt, train_config)
            run.steps += 1
            dev = abs(float(model.fusion_weights().sum()) - 1.0)
            run.fusion_sum_max_dev = max(run.fusion_sum_max_dev, dev)
            total += value * len(idx)
            count += len(idx)
        run.train_loss.append(total / count)
        val = dataset_loss(model, val_ds) if val_ds is not None and len(val_ds) else run.train_loss[-1]
        run.val_loss.append(val)
        log.info("epoch %d: train %.6f val %.6f", epoch + 1, run.train_loss[-1], val)
        stop = stopper.step(val, epoch)
        if stopper.best_epoch == epoch:
            run.best_epoch = epoch
            run.best_state = model.state_dict()
        if on_epoch is not None:
            on_epoch(epoch, run)
        if stop:
            run.stopped_early = True
            break
    if run.best_state:
        model.load_state_dict(run.best_state)
    return model, run


@dataclass
class EvalResult:
    mse: float
    mae: float
    mse_per_step: np.ndarray
    mae_per_step: np.ndarray
    raw_mse: float | None = None
    raw_mae: float | None = None


def metrics(pred: np.ndarray, truth: np.ndarray) -> tuple[float, float]:
    pred, truth = np.asarray(pred, dtype=np.float64), np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} differs from truth {truth.shape}")
    err = pred - truth
    return float(np.mean(err * err)), float(np.mean(np.abs(err)))


def evaluate_predictions(pred: np.ndarray, ds: WindowedDataset, raw: bool = False) -> EvalResult:
    if len(ds) == 0:
        raise DataError(f"{ds.split} split has no windows")
    mse, mae = metrics(pred, ds.targets)
    err = pred - ds.targets
    res = EvalResult(mse, mae, np.mean(err ** 2, axis=(0, 2)), np.mean(np.abs(err), axis=(0, 2)))
    if raw:
        res.raw_mse, res.raw_mae = metrics(ds.scaler.inverse(pred), ds.scaler.inverse(ds.targets))
    return res


def evaluate(model: ASGMamba, ds: WindowedDataset, raw: bool = False, threads: int | None = None) -> EvalResult:
    """MSE/MAE over windows, horizon steps and variates on the standardised scale."""
    if len(ds) == 0:
        raise DataError(f"{ds.split} split has no windows")
    return evaluate_predictions(predict(model, ds.inputs, threads=threads), ds, raw)


def evaluate_naive(ds: WindowedDataset, raw: bool = False) -> EvalResult:
    return evaluate_predictions(naive_forecast(ds.inputs, ds.targets.shape[1]), ds, raw)


# ---------------------------------------------------------------- benchmark

@dataclass
class BenchRow:
    look_back: int
    forward_ms: float
    peak_bytes: int
    timings_ms: list[float]
    time_ratio: float | None = None
    memory_ratio: float | None = None


def benchmark_scaling(config: ModelConfig, lengths, repetitions: int = 5, batch: int = 1,
                      seed: int = 0) -> list[BenchRow]:
    """Median eval-mode forward time and traced peak allocation per look-back.

    Timing and allocation tracking run in separate passes so tracing overhead
    never enters the timings. One untimed warm-up precedes each length.
    """
    lengths = [int(x) for x in lengths]
    if lengths != sorted(lengths):
        raise ValueError("benchmark lengths must be ascending")
    rows: list[BenchRow] = []
    for L in lengths:
        cfg = config.replace(look_back=L)
        model = ASGMamba(cfg, seed=seed)
        x = np.random.default_rng(seed).standard_normal((batch, L, cfg.n_vars)).astype(cfg.dtype)
        with T.no_grad():
            model(x)
            times = []
            for _ in range(repetitions):
                t0 = time.perf_counter()
                model(x)
                times.append(1e3 * (time.perf_counter() - t0))
            tracemalloc.start()
            tracemalloc.reset_peak()
            base = tracemalloc.get_traced_memory()[0]
            model(x)
            peak = tracemalloc.get_traced_memory()[1] - base
            tracemalloc.stop()
        row = BenchRow(L, statistics.median(times), int(peak), times)
        if rows:
            row.time_ratio = row.forward_ms / rows[-1].forward_ms
            row.memory_ratio = row.peak_bytes / max(rows[-1].peak_bytes, 1)
        rows.append(row)
    return rows
