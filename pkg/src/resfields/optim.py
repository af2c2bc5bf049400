"""Adam, cosine learning-rate annealing and the deterministic training loop."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import losses
from ._kernels import adam_update

log = logging.getLogger(__name__)

STREAMS = {"init": 0, "data": 1, "batch": 2, "split": 3}


def stream(seed, name):
    """Independent named RNG sub-stream derived from a single run seed."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(STREAMS[name],)))


class TrainingError(RuntimeError):
    pass


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(state: AdamState, params, grads, lr):
    """In-place bias-corrected Adam update of every key in ``grads``."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {k!r}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for k, g in grads.items():
        p = params[k]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {k!r}")
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        adam_update(p, g, m, state.v[k], lr, b1, b2, c1, c2, state.eps)
    return params, state


@dataclass
class Schedule:
    lr0: float = 5e-4
    lr_min: float = 5e-5
    total_steps: int = 1

    def __post_init__(self):
        if self.lr_min > self.lr0:
            raise ValueError("lr_min must not exceed lr0")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")


def cosine_lr(s: Schedule, step: int) -> float:
    step = min(max(step, 0), s.total_steps)
    if step == 0:
        return s.lr0
    if step == s.total_steps:
        return s.lr_min
    return s.lr_min + 0.5 * (s.lr0 - s.lr_min) * (1.0 + math.cos(math.pi * step / s.total_steps))


@dataclass
class TrainConfig:
    iterations: int = 1000
    batch_size: int = 1024
    frames_per_batch: int = 32
    lr: float = 5e-5
    lr_min: float = 5e-6
    loss: str = "mse"
    seed: int = 0
    eval_every: int = 0
    log_every: int = 100
    metrics_path: str | None = None

    def to_dict(self):
        return asdict(self)


class TimeStratifiedSampler:
    """Draws batches that cover ``frames_per_batch`` time values equally.

    Rows are grouped by the time column (column 0).  Each batch picks frames
    without replacement and the same number of rows per frame, so residual
    layers hit their batched fast path.
    """

    def __init__(self, X, frames_per_batch=32):
        times, inv = np.unique(X[:, 0], return_inverse=True)
        order = np.argsort(inv, kind="stable")
        counts = np.bincount(inv)
        self.groups = np.split(order, np.cumsum(counts)[:-1])
        self.n_frames = len(times)
        self.frames_per_batch = max(1, min(frames_per_batch, self.n_frames))

    def sample(self, rng, batch_size):
        per = max(1, batch_size // self.frames_per_batch)
        if self.frames_per_batch == self.n_frames:
            frames = np.arange(self.n_frames)
        else:
            frames = np.sort(rng.choice(self.n_frames, self.frames_per_batch, replace=False))
        idx = [self.groups[f][rng.integers(0, len(self.groups[f]), per)] for f in frames]
        return np.concatenate(idx)


class FieldObjective:
    """Plain regression: network output compared to targets with a named loss."""

    def __init__(self, loss="mse"):
        self.loss = loss

    def __call__(self, model, X, y):
        out, ctx = model.forward(X)
        value, dout = losses.loss_and_grad(self.loss, out, y)
        return value, model.backward(ctx, dout)


def train(model, data, config: TrainConfig, objective=None, evaluate=None, rng=None):
    """Optimise ``model`` in place; return ``(model, log_rows)``.

    ``data`` is ``(X, y)``.  ``evaluate(model) -> dict`` is called every
    ``config.eval_every`` steps and at the end when given.
    """
    X, y = data
    objective = objective or FieldObjective(config.loss)
    rng = rng if rng is not None else stream(config.seed, "batch")
    sampler = TimeStratifiedSampler(X, config.frames_per_batch)
    sched = Schedule(config.lr, config.lr_min, max(1, config.iterations))
    state = AdamState()
    rows = []
    t0 = time.perf_counter()
    for step in range(config.iterations):
        idx = sampler.sample(rng, config.batch_size)
        lr = cosine_lr(sched, step)
        value, grads = objective(model, X[idx], y[idx])
        if not math.isfinite(value):
            # parameters still hold the last finite step; keep the log written so far
            if config.metrics_path:
                write_metrics(config.metrics_path, rows)
            raise TrainingError(f"non-finite loss at step {step}")
        adam_step(state, model.params, grads, lr)
        last = step + 1 == config.iterations
        do_eval = evaluate is not None and (
            last or (config.eval_every and (step + 1) % config.eval_every == 0)
        )
        if do_eval or (config.log_every and (step + 1) % config.log_every == 0) or last:
            row = {"step": step + 1, "lr": lr, "train_loss": value}
            if do_eval:
                row.update(evaluate(model))
            rows.append(row)
            log.debug("step %d loss %.6g (%.1fs)", step + 1, value, time.perf_counter() - t0)
    if config.metrics_path:
        write_metrics(config.metrics_path, rows)
    model.optimizer = state
    return model, rows


def write_metrics(path, rows):
    keys = ["step", "lr", "train_loss"]
    for r in rows:
        keys += [k for k in r if k not in keys]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow(r)
