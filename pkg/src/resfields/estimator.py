"""scikit-learn style estimators wrapping field models and the training loop."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted, validate_data

from .models import (
    FlowHead,
    ResFieldSpec,
    build_relu_pe,
    build_siren,
    flow_backward,
    flow_forward,
    time_from_coords,
)
from .optim import TrainConfig, train
from .resfield import ChunkedSchedule


def resolve_factors(factors, n_frames):
    """Factor count from an int, a fraction in (0, 1], or a ``"95%"`` string."""
    if factors is None:
        return int(n_frames)
    if isinstance(factors, str):
        s = factors.strip()
        if s.endswith("%"):
            frac = float(s[:-1]) / 100.0
        else:
            return resolve_factors(int(s), n_frames)
    elif isinstance(factors, float) and factors <= 1.0:
        frac = factors
    else:
        n = int(factors)
        if n < 1:
            raise ValueError("factor count must be >= 1")
        return n
    if not 0 < frac <= 1:
        raise ValueError(f"factor fraction {factors!r} outside (0, 100%]")
    # at least two rows so interpolation has a segment
    return max(2, int(np.floor(frac * n_frames + 0.5)))


class _FieldEstimator(RegressorMixin, BaseEstimator):
    """Shared configuration; column 0 of ``X`` is time in [-1, 1]."""

    def _resfield_spec(self, n_frames):
        if not self.resfield_layers:
            return None
        return ResFieldSpec(
            layers=tuple(self.resfield_layers),
            factorization=self.factorization,
            rank=self.rank,
            n_factors=resolve_factors(self.n_factors, n_frames),
            mode=self.mode,
            tucker_ranks=self.tucker_ranks,
            loe_experts=self.loe_experts,
        )

    def _train_config(self):
        return TrainConfig(
            iterations=self.iterations, batch_size=self.batch_size,
            frames_per_batch=self.frames_per_batch, lr=self.lr, lr_min=self.lr_min,
            loss=self.loss, seed=self.seed, log_every=self.log_every,
            metrics_path=self.metrics_path,
        )

    def _validate_fit(self, X, y):
        X, y = validate_data(self, X, y, multi_output=True, y_numeric=True, dtype=np.float64)
        if X.shape[1] < 2:
            raise ValueError("X needs a time column followed by at least one spatial column")
        if np.any(np.abs(X[:, 0]) > 1.0):
            raise ValueError("time column (X[:, 0]) must lie in [-1, 1]")
        return X, y

    def _chunks(self):
        return ChunkedSchedule(self.n_chunks, self.chunk_policy)


class NeuralFieldRegressor(_FieldEstimator):
    """Siren (or ReLU+PE) field ``(t, x) -> y`` with optional residual layers.

    ``n_factors=None`` uses one factor per distinct time value in the
    training data.
    """

    def __init__(self, arch="siren", width=64, depth=5, omega0=30.0, resfield_layers=(1, 2, 3),
                 factorization="lowrank", rank=10, n_factors=None, mode=None,
                 tucker_ranks=(10, 64, 64), loe_experts=(2, 4, 8), n_chunks=1,
                 chunk_policy="shared", iterations=1000, batch_size=1020, frames_per_batch=30,
                 lr=5e-4, lr_min=5e-5, loss="mse", seed=0, log_every=100, metrics_path=None):
        self.arch = arch
        self.width = width
        self.depth = depth
        self.omega0 = omega0
        self.resfield_layers = resfield_layers
        self.factorization = factorization
        self.rank = rank
        self.n_factors = n_factors
        self.mode = mode
        self.tucker_ranks = tucker_ranks
        self.loe_experts = loe_experts
        self.n_chunks = n_chunks
        self.chunk_policy = chunk_policy
        self.iterations = iterations
        self.batch_size = batch_size
        self.frames_per_batch = frames_per_batch
        self.lr = lr
        self.lr_min = lr_min
        self.loss = loss
        self.seed = seed
        self.log_every = log_every
        self.metrics_path = metrics_path

    def build(self, n_features, n_outputs, n_frames):
        spec = self._resfield_spec(n_frames)
        if self.arch == "siren":
            return build_siren(self.width, self.depth, n_features, n_outputs, spec, self.omega0,
                               self.seed, self._chunks())
        if self.arch == "relu_pe":
            raise ValueError("use SceneFlowRegressor for ReLU+PE flow fields")
        raise ValueError(f"unknown arch {self.arch!r}")

    def fit(self, X, y, evaluate=None):
        X, y = self._validate_fit(X, y)
        self._y_1d = y.ndim == 1
        y2 = y[:, None] if self._y_1d else y
        self.n_frames_ = len(np.unique(X[:, 0]))
        self.model_ = self.build(X.shape[1], y2.shape[1], self.n_frames_)
        self.model_, self.history_ = train(self.model_, (X, y2), self._train_config(),
                                           evaluate=evaluate)
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        X = validate_data(self, X, reset=False, dtype=np.float64)
        out = self.model_(X)
        return out[:, 0] if self._y_1d else out


class FlowObjective:
    """L1 on forward and backward flow, skipping displacements that leave the sequence."""

    def __init__(self, head: FlowHead, n_frames):
        self.head = head
        self.n_frames = n_frames

    def frames(self, X):
        return np.rint(time_from_coords(X[:, 0]) * (self.n_frames - 1)).astype(np.intp)

    def predict(self, model, X):
        raw = model(X)
        fwd, bwd, *_ = flow_forward(self.head, raw, X[:, 1:], self.frames(X), self.n_frames)
        return np.concatenate([fwd, bwd], axis=1)

    def __call__(self, model, X, y):
        raw, ctx = model.forward(X)
        fwd, bwd, vf, vb, fctx = flow_forward(self.head, raw, X[:, 1:], self.frames(X),
                                              self.n_frames)
        n = 3 * (vf.sum() + vb.sum())
        ef = fwd - y[:, :3]
        eb = bwd - y[:, 3:]
        ef[~vf] = 0.0
        eb[~vb] = 0.0
        value = float((np.abs(ef).sum() + np.abs(eb).sum()) / n)
        draw = flow_backward(self.head, fctx, np.sign(ef) / n, np.sign(eb) / n)
        return value, model.backward(ctx, draw)


class SceneFlowRegressor(_FieldEstimator):
    """ReLU MLP on encoded ``(t, x, y, z)`` predicting ``(fwd, bwd)`` displacements.

    ``y`` has six columns: forward then backward flow.  Rows at the first
    (last) frame carry no valid backward (forward) target and are ignored
    there.
    """

    def __init__(self, head="offset", n_basis=10, width=128, depth=8, pe_levels=(6, 4),
                 resfield_layers=(1, 2, 3), factorization="lowrank", rank=10, n_factors=None,
                 mode=None, tucker_ranks=(10, 64, 64), loe_experts=(2, 4, 8), n_chunks=1,
                 chunk_policy="shared", iterations=1000, batch_size=1024, frames_per_batch=32,
                 lr=5e-4, lr_min=5e-5, seed=0, log_every=100, metrics_path=None):
        self.head = head
        self.n_basis = n_basis
        self.width = width
        self.depth = depth
        self.pe_levels = pe_levels
        self.resfield_layers = resfield_layers
        self.factorization = factorization
        self.rank = rank
        self.n_factors = n_factors
        self.mode = mode
        self.tucker_ranks = tucker_ranks
        self.loe_experts = loe_experts
        self.n_chunks = n_chunks
        self.chunk_policy = chunk_policy
        self.iterations = iterations
        self.batch_size = batch_size
        self.frames_per_batch = frames_per_batch
        self.lr = lr
        self.lr_min = lr_min
        self.seed = seed
        self.log_every = log_every
        self.metrics_path = metrics_path

    loss = "l1"

    def fit(self, X, y, evaluate=None):
        X, y = self._validate_fit(X, y)
        if X.shape[1] != 4 or y.ndim != 2 or y.shape[1] != 6:
            raise ValueError("expected X of shape (n, 4) and y of shape (n, 6)")
        self.n_frames_ = len(np.unique(X[:, 0]))
        if self.n_frames_ < 2:
            raise ValueError("scene flow needs at least two frames")
        self.head_ = FlowHead(self.head, self.n_basis)
        self.model_ = build_relu_pe(self.width, self.depth, tuple(self.pe_levels), self.head_,
                                    self._resfield_spec(self.n_frames_), 3, self.seed,
                                    self._chunks())
        self.objective_ = FlowObjective(self.head_, self.n_frames_)
        self.model_, self.history_ = train(self.model_, (X, y), self._train_config(),
                                           objective=self.objective_, evaluate=evaluate)
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        X = validate_data(self, X, reset=False, dtype=np.float64)
        return self.objective_.predict(self.model_, X)

    def flow_errors(self, X, y):
        """Mean L1 of valid forward and backward displacements."""
        pred = self.predict(X)
        f = self.objective_.frames(X)
        vf, vb = f < self.n_frames_ - 1, f > 0
        return (float(np.mean(np.abs(pred[vf, :3] - y[vf, :3]))),
                float(np.mean(np.abs(pred[vb, 3:] - y[vb, 3:]))))
