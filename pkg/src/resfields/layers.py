"""Differentiable layers with explicit forward/backward kernels.

Every layer reads its trainable tensors from a shared ``params`` registry
(``dict[str, ndarray]``) by key and accumulates gradients into a ``grads``
registry with the same keys.  Layers that share a key therefore share a
parameter, which is how chunked models reuse weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._kernels import dsin_scaled, sin_scaled
from .linalg import DimensionError


class StaleContextError(RuntimeError):
    """Backward called with a context that was not produced by the matching forward."""


@dataclass
class LayerContext:
    kind: str
    saved: tuple = field(default_factory=tuple)


def _check_ctx(ctx, kind):
    if ctx is None or not isinstance(ctx, LayerContext):
        raise StaleContextError(f"missing context for {kind} backward")
    if ctx.kind != kind:
        raise StaleContextError(f"context from {ctx.kind!r} passed to {kind!r} backward")


# -- kernels ---------------------------------------------------------------


def linear_forward(W, b, x):
    """Pre-activation ``x @ W.T + b`` for a batch ``x`` of shape (B, M)."""
    if W.ndim != 2 or x.ndim != 2 or x.shape[1] != W.shape[1] or b.shape != (W.shape[0],):
        raise DimensionError(
            f"linear shapes do not conform: W{W.shape}, b{b.shape}, x{x.shape}"
        )
    out = x @ W.T + b
    return out, LayerContext("linear", (W, x))


def linear_backward(ctx, dout, need_dx=True):
    """Return ``(dx, dW, db)``; ``dx`` is None when ``need_dx`` is false."""
    _check_ctx(ctx, "linear")
    W, x = ctx.saved
    if dout.shape != (x.shape[0], W.shape[0]):
        raise DimensionError(f"dout shape {dout.shape} does not match forward output")
    dW = dout.T @ x
    db = dout.sum(axis=0)
    dx = dout @ W if need_dx else None
    return dx, dW, db


def sine_forward(x, omega0=30.0):
    if omega0 <= 0:
        raise ValueError("omega0 must be positive")
    return sin_scaled(x, omega0), LayerContext("sine", (x, omega0))


def sine_backward(ctx, dout):
    _check_ctx(ctx, "sine")
    x, omega0 = ctx.saved
    return dsin_scaled(x, omega0, dout)


def relu_forward(x):
    return np.maximum(x, 0.0), LayerContext("relu", (x,))


def relu_backward(ctx, dout):
    # subgradient at 0 is 0
    _check_ctx(ctx, "relu")
    (x,) = ctx.saved
    return dout * (x > 0)


def positional_encoding(p, levels, include_input=True):
    """NeRF-style encoding: ``[p, sin(2^0 pi p), cos(2^0 pi p), ..., cos(2^(L-1) pi p)]``."""
    if levels < 0:
        raise ValueError("levels must be >= 0")
    p = np.atleast_2d(p)
    parts = [p] if include_input else []
    for k in range(levels):
        arg = (2.0**k * np.pi) * p
        parts.append(np.sin(arg))
        parts.append(np.cos(arg))
    if not parts:
        raise ValueError("positional encoding with levels=0 and include_input=False is empty")
    return np.concatenate(parts, axis=1)


def positional_encoding_backward(p, dout, levels, include_input=True):
    p = np.atleast_2d(p)
    D = p.shape[1]
    dp = np.zeros_like(p)
    col = 0
    if include_input:
        dp += dout[:, :D]
        col = D
    for k in range(levels):
        w = 2.0**k * np.pi
        arg = w * p
        dp += dout[:, col : col + D] * (w * np.cos(arg))
        dp -= dout[:, col + D : col + 2 * D] * (w * np.sin(arg))
        col += 2 * D
    return dp


def encoding_width(dim, levels, include_input=True):
    return dim * 2 * levels + (dim if include_input else 0)


# -- layer objects ---------------------------------------------------------


class Layer:
    """Base class; parameter-free layers only override forward/backward."""

    param_keys: tuple = ()
    in_dim: int | None = None
    out_dim: int | None = None

    def param_shapes(self):
        return {}

    def init_params(self, rng):
        return {}

    def forward(self, params, x, t=None, residual=True):
        raise NotImplementedError

    def backward(self, params, ctx, dout, grads, need_dx=True):
        raise NotImplementedError


class Linear(Layer):
    def __init__(self, name, in_dim, out_dim, init="glorot", omega0=30.0):
        self.name = name
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.init = init
        self.omega0 = omega0
        self.W_key = f"{name}.W"
        self.b_key = f"{name}.b"
        self.param_keys = (self.W_key, self.b_key)

    def param_shapes(self):
        return {self.W_key: (self.out_dim, self.in_dim), self.b_key: (self.out_dim,)}

    def init_params(self, rng):
        return {
            self.W_key: init_weight(rng, self.init, self.out_dim, self.in_dim, self.omega0),
            self.b_key: init_bias(rng, self.init, self.out_dim, self.in_dim),
        }

    def forward(self, params, x, t=None, residual=True):
        return linear_forward(params[self.W_key], params[self.b_key], x)

    def backward(self, params, ctx, dout, grads, need_dx=True):
        dx, dW, db = linear_backward(ctx, dout, need_dx)
        grads[self.W_key] += dW
        grads[self.b_key] += db
        return dx


class Sine(Layer):
    def __init__(self, omega0=30.0):
        self.omega0 = omega0

    def forward(self, params, x, t=None, residual=True):
        return sine_forward(x, self.omega0)

    def backward(self, params, ctx, dout, grads, need_dx=True):
        return sine_backward(ctx, dout)


class ReLU(Layer):
    def forward(self, params, x, t=None, residual=True):
        return relu_forward(x)

    def backward(self, params, ctx, dout, grads, need_dx=True):
        return relu_backward(ctx, dout)


class SpaceTimeEncoding(Layer):
    """Encode column 0 (time) and columns 1: (space) with separate band counts."""

    def __init__(self, space_dim, space_levels=6, time_levels=4, include_input=True):
        self.space_dim = space_dim
        self.space_levels = space_levels
        self.time_levels = time_levels
        self.include_input = include_input
        self.in_dim = space_dim + 1
        self.out_dim = encoding_width(space_dim, space_levels, include_input) + encoding_width(
            1, time_levels, include_input
        )

    def forward(self, params, x, t=None, residual=True):
        enc_x = positional_encoding(x[:, 1:], self.space_levels, self.include_input)
        enc_t = positional_encoding(x[:, :1], self.time_levels, self.include_input)
        return np.concatenate([enc_x, enc_t], axis=1), LayerContext("encoding", (x,))

    def backward(self, params, ctx, dout, grads, need_dx=True):
        _check_ctx(ctx, "encoding")
        if not need_dx:
            return None
        (x,) = ctx.saved
        wx = encoding_width(self.space_dim, self.space_levels, self.include_input)
        dx = np.empty_like(x)
        dx[:, 1:] = positional_encoding_backward(
            x[:, 1:], dout[:, :wx], self.space_levels, self.include_input
        )
        dx[:, :1] = positional_encoding_backward(
            x[:, :1], dout[:, wx:], self.time_levels, self.include_input
        )
        return dx


# -- initialisation --------------------------------------------------------


def init_weight(rng, scheme, fan_out, fan_in, omega0=30.0):
    if scheme == "siren_first":
        bound = 1.0 / fan_in
    elif scheme == "siren":
        bound = np.sqrt(6.0 / fan_in) / omega0
    elif scheme == "glorot":
        bound = np.sqrt(6.0 / (fan_in + fan_out))
    elif scheme == "zeros":
        return np.zeros((fan_out, fan_in))
    else:
        raise ValueError(f"unknown init scheme {scheme!r}")
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


def init_bias(rng, scheme, fan_out, fan_in):
    if scheme in ("glorot", "zeros"):
        return np.zeros(fan_out)
    # torch.nn.Linear default, which the Siren reference code keeps for biases
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=fan_out)
