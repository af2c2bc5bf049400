"""Central finite-difference checks of every layer's backward pass."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import Linear, ReLU, Sine, SpaceTimeEncoding
from .losses import loss_and_grad
from .models import FlowHead, flow_backward, flow_forward
from .resfield import FACTORIZATIONS, MODES, ResFieldLayer, check_mode, make_factorization


@dataclass
class CheckResult:
    name: str
    seed: int
    errors: dict  # tensor name -> relative error

    @property
    def max_error(self):
        return max(self.errors.values()) if self.errors else 0.0

    def passed(self, tol=1e-4):
        return self.max_error < tol


def rel_error(a, n):
    a, n = np.asarray(a), np.asarray(n)
    scale = max(np.max(np.abs(a)), np.max(np.abs(n)), 1e-8)
    return float(np.max(np.abs(a - n)) / scale)


def numeric_grad(f, x, h=1e-6, max_entries=None, rng=None):
    """Central differences of scalar ``f()`` w.r.t. entries of ``x`` (perturbed in place).

    Returns ``(indices, values)``; with ``max_entries`` a random subset is probed.
    """
    flat = x.reshape(-1)
    idx = np.arange(flat.size)
    if max_entries is not None and flat.size > max_entries:
        idx = np.sort(rng.choice(flat.size, max_entries, replace=False))
    out = np.empty(len(idx))
    for j, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out[j] = (fp - fm) / (2 * h)
    return idx, out


def layer_cases(n_out=4, n_in=3, n_factors=5):
    """``(name, factory)`` for every layer kind and every valid factorization/mode pair."""
    cases = [
        ("linear", lambda: Linear("lin", n_in, n_out, init="glorot")),
        ("linear-siren", lambda: Linear("lin", n_in, n_out, init="siren_first")),
        ("sine", lambda: Sine(30.0)),
        ("relu", lambda: ReLU()),
        ("encoding", lambda: SpaceTimeEncoding(2, 3, 2)),
    ]
    for tag in sorted(FACTORIZATIONS):
        for mode in MODES:
            try:
                check_mode(tag, mode)
            except ValueError:
                continue

            def factory(tag=tag, mode=mode):
                f = make_factorization(tag, n_out, n_in, n_factors, prefix="L.res", rank=3,
                                       tucker_ranks=(3, 2, 2), n_experts=3, hypernet_hidden=6)
                return ResFieldLayer("L", n_in, n_out, f, mode, init="siren", residual_std=0.3)

            cases.append((f"resfield-{tag}-{mode}", factory))
    return cases


def check_layer(layer, seed, batch=7, h=1e-6, max_entries=40):
    rng = np.random.default_rng(seed)
    in_dim = layer.in_dim if layer.in_dim is not None else 5
    params = {}
    if isinstance(layer, ResFieldLayer):
        params = layer.init_params(rng)
        # random residuals so no factor sits at a zero-gradient point
        for k in layer.fact.param_keys:
            params[k] = rng.normal(0, 0.5, params[k].shape)
    elif layer.param_shapes():
        params = layer.init_params(rng)
    x = rng.uniform(-1, 1, (batch, in_dim))
    # repeated times exercise the grouped path; knots and ends are included
    t = rng.choice(np.array([0.0, 0.25, 1.0, rng.uniform(), rng.uniform()]), batch)
    out, _ = layer.forward(params, x, t)
    G = rng.normal(size=out.shape)

    def loss():
        return float(np.sum(layer.forward(params, x, t)[0] * G))

    _, ctx = layer.forward(params, x, t)
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    dx = layer.backward(params, ctx, G, grads, need_dx=True)
    errors = {}
    for k, p in params.items():
        idx, num = numeric_grad(loss, p, h, max_entries, rng)
        errors[k] = rel_error(grads[k].reshape(-1)[idx], num)
    idx, num = numeric_grad(loss, x, h)
    errors["x"] = rel_error(dx.reshape(-1)[idx], num)
    return errors


def check_flow_head(kind, seed, batch=6, n_frames=8, h=1e-6):
    rng = np.random.default_rng(seed)
    head = FlowHead(kind, n_basis=4)
    raw = rng.normal(0, 0.5, (batch, head.out_width))
    x = rng.uniform(-1, 1, (batch, 3))
    frames = rng.integers(0, n_frames, batch)
    Gf, Gb = rng.normal(size=(batch, 3)), rng.normal(size=(batch, 3))

    def loss():
        f, b, *_ = flow_forward(head, raw, x, frames, n_frames)
        return float(np.sum(f * Gf) + np.sum(b * Gb))

    *_, ctx = flow_forward(head, raw, x, frames, n_frames)
    draw = flow_backward(head, ctx, Gf, Gb)
    idx, num = numeric_grad(loss, raw, h)
    return {"raw": rel_error(draw.reshape(-1)[idx], num)}


def run_suite(seeds=range(20), include_heads=True):
    results = []
    for name, factory in layer_cases():
        for s in seeds:
            results.append(CheckResult(name, s, check_layer(factory(), s)))
    if include_heads:
        for kind in ("offset", "se3", "dct"):
            for s in seeds:
                results.append(CheckResult(f"flow-{kind}", s, check_flow_head(kind, s)))
    return results


def summarize(results, tol=1e-4):
    """One line per case name with its worst error over seeds."""
    by = {}
    for r in results:
        by.setdefault(r.name, []).append(r.max_error)
    return [(name, max(errs), max(errs) < tol) for name, errs in by.items()]


def check_model(model, X, y, loss="mse", h=1e-6, max_entries=30, seed=0):
    """End-to-end check of ``model`` under a task loss; returns ``{param: rel_error}``.

    Raises ``FloatingPointError`` when the loss is not finite.
    """
    rng = np.random.default_rng(seed)

    def value():
        v, _ = loss_and_grad(loss, model.forward(X)[0], y)
        if not np.isfinite(v):
            raise FloatingPointError("non-finite loss in gradient check")
        return v

    value()
    out, ctx = model.forward(X)
    _, dout = loss_and_grad(loss, out, y)
    grads = model.backward(ctx, dout)
    errors = {}
    for k, p in model.params.items():
        idx, num = numeric_grad(value, p, h, max_entries, rng)
        errors[k] = rel_error(grads[k].reshape(-1)[idx], num)
    return errors
