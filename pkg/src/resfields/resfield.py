"""Residual field layers and the time-conditioned weight parameterizations.

A residual field layer computes ``(W + dW(t)) x + b`` where ``dW(t)`` is
produced by one of the factorizations below.  Every factorization is
evaluated on the *unique* query times of a batch, which keeps the cost of a
batch that spans ``U`` frames at ``U`` small matrices instead of one matrix
per sample.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .layers import Layer, LayerContext, StaleContextError, _check_ctx, init_bias, init_weight
from .linalg import DimensionError

# snap tolerance in units of (T - 1) * eps; covers the rounding of f / (F - 1) and of 2t - 1
_SNAP_ULPS = 16.0


def interp_weights(t_norm, T, debug=False):
    """Bracketing row indices and blend factor for ``t_norm`` over ``T`` rows.

    Returns ``(i0, i1, f)`` such that the interpolated row is
    ``(1 - f) * v[i0] + f * v[i1]``.
    """
    t = np.atleast_1d(np.asarray(t_norm, dtype=np.float64))
    if debug and (np.any(t < 0) or np.any(t > 1)):
        warnings.warn("t_norm outside [0, 1] clamped", RuntimeWarning, stacklevel=2)
    t = np.clip(t, 0.0, 1.0)
    if T == 1:
        zeros = np.zeros(t.shape, dtype=np.intp)
        return zeros, zeros, np.zeros_like(t)
    u = t * (T - 1)
    # frame-aligned queries and midpoints land exactly despite rounding in t_norm
    h = 0.5 * np.rint(2.0 * u)
    u = np.where(np.abs(u - h) <= _SNAP_ULPS * np.finfo(np.float64).eps * (T - 1), h, u)
    i0 = np.minimum(np.floor(u).astype(np.intp), T - 2)
    f = u - i0
    return i0, i0 + 1, f


def interp_coeffs(v, t_norm, debug=False):
    """Linearly interpolate the rows of ``v`` (T x R) at ``t_norm``.

    Scalar ``t_norm`` gives an ``R`` vector, an array gives ``(len(t), R)``.
    """
    v = np.asarray(v)
    i0, i1, f = interp_weights(t_norm, v.shape[0], debug)
    fb = f.reshape((-1,) + (1,) * (v.ndim - 1))
    out = (1.0 - fb) * v[i0] + fb * v[i1]
    return out[0] if np.ndim(t_norm) == 0 else out


def _interp_backward(dc, i0, i1, f, T):
    # scatter through a small (T, U) weight matrix; np.add.at on the full
    # tensor is an order of magnitude slower
    U = len(f)
    A = np.zeros((T, U))
    cols = np.arange(U)
    np.add.at(A, (i0, cols), 1.0 - f)
    np.add.at(A, (i1, cols), f)
    return (A @ dc.reshape(U, -1)).reshape((T,) + dc.shape[1:])


# -- factorizations --------------------------------------------------------


class Factorization:
    """Base class.  Subclasses declare parameter shapes and the residual map."""

    tag = ""
    produces = "matrix"  # or "vector" for the output-residual variant

    def __init__(self, n_out, n_in, n_factors, prefix="res"):
        if n_factors < 1:
            raise ValueError("number of factors must be >= 1")
        self.N = n_out
        self.M = n_in
        self.T = n_factors
        self.prefix = prefix

    def key(self, name):
        return f"{self.prefix}.{name}"

    @property
    def param_keys(self):
        return tuple(self.key(k) for k in self.shapes())

    def shapes(self):
        raise NotImplementedError

    def param_shapes(self):
        return {self.key(k): s for k, s in self.shapes().items()}

    def init_params(self, rng, std=0.01):
        return {self.key(k): rng.normal(0.0, std, size=s) for k, s in self.shapes().items()}

    def param_count(self):
        raise NotImplementedError

    def materialize(self, params, t):
        """Evaluate the residual at each time in ``t``; shape ``(U, N, M)``."""
        raise NotImplementedError

    def backward(self, params, ctx, dres, grads):
        raise NotImplementedError

    def __call__(self, params, t_norm):
        res, _ = self.materialize(params, np.atleast_1d(t_norm))
        return res[0] if np.ndim(t_norm) == 0 else res


class LowRank(Factorization):
    """Shared spanning set ``M[R, N, M]`` mixed by interpolated coefficients ``v[T, R]``."""

    tag = "lowrank"

    def __init__(self, n_out, n_in, n_factors, rank=10, prefix="res"):
        super().__init__(n_out, n_in, n_factors, prefix)
        self.R = rank

    def shapes(self):
        return {"v": (self.T, self.R), "M": (self.R, self.N, self.M)}

    def param_count(self):
        return self.T * self.R + self.R * self.N * self.M

    def materialize(self, params, t):
        v, M = params[self.key("v")], params[self.key("M")]
        i0, i1, f = interp_weights(t, self.T)
        c = (1.0 - f)[:, None] * v[i0] + f[:, None] * v[i1]
        res = (c @ M.reshape(self.R, -1)).reshape(len(t), self.N, self.M)
        return res, (c, i0, i1, f)

    def backward(self, params, ctx, dres, grads):
        c, i0, i1, f = ctx
        M = params[self.key("M")]
        flat = dres.reshape(len(c), -1)
        grads[self.key("M")] += (c.T @ flat).reshape(M.shape)
        dc = flat @ M.reshape(self.R, -1).T
        grads[self.key("v")] += _interp_backward(dc, i0, i1, f, self.T)


class Modulated(LowRank):
    """Low-rank residual used multiplicatively, ``W * (1 + dW(t))``."""

    tag = "modulated"


class Dictionary(Factorization):
    """One full matrix per factor, interpolated between neighbours."""

    tag = "dictionary"

    def shapes(self):
        return {"D": (self.T, self.N, self.M)}

    def init_params(self, rng, std=0.01):
        # directly additive, so zero keeps the base network untouched at init
        return {self.key("D"): np.zeros((self.T, self.N, self.M))}

    def param_count(self):
        return self.T * self.N * self.M

    def materialize(self, params, t):
        D = params[self.key(self._bank)]
        i0, i1, f = interp_weights(t, D.shape[0])
        fb = f[:, None, None]
        return (1.0 - fb) * D[i0] + fb * D[i1], (i0, i1, f)

    _bank = "D"

    def backward(self, params, ctx, dres, grads):
        i0, i1, f = ctx
        key = self.key(self._bank)
        grads[key] += _interp_backward(dres, i0, i1, f, params[key].shape[0])


class LevelsOfExperts(Dictionary):
    """A bank of ``n_experts`` matrices blended by time (per-layer bank size)."""

    tag = "loe"
    _bank = "E"

    def __init__(self, n_out, n_in, n_factors, n_experts=4, prefix="res"):
        super().__init__(n_out, n_in, n_factors, prefix)
        self.n_experts = n_experts

    def shapes(self):
        return {"E": (self.n_experts, self.N, self.M)}

    def init_params(self, rng, std=0.01):
        return {self.key("E"): np.zeros((self.n_experts, self.N, self.M))}

    def param_count(self):
        return self.n_experts * self.N * self.M


class MatrixMatrix(Factorization):
    """``V(t)[N, R] @ M[R, M]`` with ``V`` interpolated over ``T`` slices."""

    tag = "matrix"

    def __init__(self, n_out, n_in, n_factors, rank=10, prefix="res"):
        super().__init__(n_out, n_in, n_factors, prefix)
        self.R = rank

    def shapes(self):
        return {"V": (self.T, self.N, self.R), "M": (self.R, self.M)}

    def param_count(self):
        return self.T * self.N * self.R + self.R * self.M

    def materialize(self, params, t):
        V, M = params[self.key("V")], params[self.key("M")]
        i0, i1, f = interp_weights(t, self.T)
        fb = f[:, None, None]
        Vt = (1.0 - fb) * V[i0] + fb * V[i1]
        return Vt @ M, (Vt, i0, i1, f)

    def backward(self, params, ctx, dres, grads):
        Vt, i0, i1, f = ctx
        M = params[self.key("M")]
        grads[self.key("M")] += np.einsum("unr,unm->rm", Vt, dres)
        dVt = dres @ M.T
        grads[self.key("V")] += _interp_backward(dVt, i0, i1, f, self.T)


class CP(Factorization):
    """Sum of ``R`` rank-one matrices ``a_r b_r^T`` weighted by ``v(t)``."""

    tag = "cp"

    def __init__(self, n_out, n_in, n_factors, rank=10, prefix="res"):
        super().__init__(n_out, n_in, n_factors, prefix)
        self.R = rank

    def shapes(self):
        return {"v": (self.T, self.R), "A": (self.R, self.N), "B": (self.R, self.M)}

    def param_count(self):
        return self.T * self.R + self.R * (self.N + self.M)

    def materialize(self, params, t):
        v, A, B = (params[self.key(k)] for k in ("v", "A", "B"))
        i0, i1, f = interp_weights(t, self.T)
        c = (1.0 - f)[:, None] * v[i0] + f[:, None] * v[i1]
        res = np.einsum("ur,rn,rm->unm", c, A, B, optimize=True)
        return res, (c, i0, i1, f)

    def backward(self, params, ctx, dres, grads):
        c, i0, i1, f = ctx
        A, B = params[self.key("A")], params[self.key("B")]
        grads[self.key("A")] += np.einsum("ur,unm,rm->rn", c, dres, B, optimize=True)
        grads[self.key("B")] += np.einsum("ur,unm,rn->rm", c, dres, A, optimize=True)
        dc = np.einsum("unm,rn,rm->ur", dres, A, B, optimize=True)
        grads[self.key("v")] += _interp_backward(dc, i0, i1, f, self.T)


class Tucker(Factorization):
    """Core ``G[Rt, Rn, Rm]`` contracted with ``v(t)``, ``U[N, Rn]`` and ``V[M, Rm]``."""

    tag = "tucker"

    def __init__(self, n_out, n_in, n_factors, ranks=(10, 64, 64), prefix="res"):
        super().__init__(n_out, n_in, n_factors, prefix)
        self.Rt, self.Rn, self.Rm = ranks

    def shapes(self):
        return {
            "v": (self.T, self.Rt),
            "G": (self.Rt, self.Rn, self.Rm),
            "U": (self.N, self.Rn),
            "V": (self.M, self.Rm),
        }

    def param_count(self):
        return (
            self.T * self.Rt
            + self.Rt * self.Rn * self.Rm
            + self.N * self.Rn
            + self.M * self.Rm
        )

    def materialize(self, params, t):
        v, G, U, V = (params[self.key(k)] for k in ("v", "G", "U", "V"))
        i0, i1, f = interp_weights(t, self.T)
        c = (1.0 - f)[:, None] * v[i0] + f[:, None] * v[i1]
        core = (c @ G.reshape(self.Rt, -1)).reshape(len(t), self.Rn, self.Rm)
        res = U @ core @ V.T
        return res, (c, core, i0, i1, f)

    def backward(self, params, ctx, dres, grads):
        c, core, i0, i1, f = ctx
        G, U, V = (params[self.key(k)] for k in ("G", "U", "V"))
        dcore = U.T @ dres @ V
        grads[self.key("U")] += np.einsum("unm,mb,uab->na", dres, V, core, optimize=True)
        grads[self.key("V")] += np.einsum("unm,na,uab->mb", dres, U, core, optimize=True)
        flat = dcore.reshape(len(c), -1)
        grads[self.key("G")] += (c.T @ flat).reshape(G.shape)
        dc = flat @ G.reshape(self.Rt, -1).T
        grads[self.key("v")] += _interp_backward(dc, i0, i1, f, self.T)


class HyperNet(Factorization):
    """Small ReLU MLP mapping ``t_norm`` to a flattened ``N x M`` residual."""

    tag = "hypernet"

    def __init__(self, n_out, n_in, n_factors, hidden=32, prefix="res"):
        super().__init__(n_out, n_in, n_factors, prefix)
        self.hidden = hidden

    def _dims(self):
        h = self.hidden
        return [(h, 1), (h, h), (self.N * self.M, h)]

    def shapes(self):
        out = {}
        for i, (o, n) in enumerate(self._dims()):
            out[f"h{i}.W"] = (o, n)
            out[f"h{i}.b"] = (o,)
        return out

    def init_params(self, rng, std=0.01):
        out = {}
        dims = self._dims()
        for i, (o, n) in enumerate(dims):
            scheme = "zeros" if i == len(dims) - 1 else "glorot"
            out[self.key(f"h{i}.W")] = init_weight(rng, scheme, o, n)
            out[self.key(f"h{i}.b")] = np.zeros(o)
        return out

    def param_count(self):
        return sum(o * n + o for o, n in self._dims())

    def materialize(self, params, t):
        h = (2.0 * np.clip(t, 0.0, 1.0) - 1.0)[:, None]
        cache = []
        n_layers = len(self._dims())
        for i in range(n_layers):
            W, b = params[self.key(f"h{i}.W")], params[self.key(f"h{i}.b")]
            z = h @ W.T + b
            cache.append((h, z))
            h = np.maximum(z, 0.0) if i < n_layers - 1 else z
        return h.reshape(len(t), self.N, self.M), cache

    def backward(self, params, ctx, dres, grads):
        d = dres.reshape(dres.shape[0], -1)
        for i in reversed(range(len(ctx))):
            h, z = ctx[i]
            if i < len(ctx) - 1:
                d = d * (z > 0)
            W = params[self.key(f"h{i}.W")]
            grads[self.key(f"h{i}.W")] += d.T @ h
            grads[self.key(f"h{i}.b")] += d.sum(axis=0)
            d = d @ W


class OutputResidual(Factorization):
    """Time-dependent additive output vector ``sum_r v(t)[r] m_r``."""

    tag = "output"
    produces = "vector"

    def __init__(self, n_out, n_in, n_factors, rank=10, prefix="res"):
        super().__init__(n_out, n_in, n_factors, prefix)
        self.R = rank

    def shapes(self):
        return {"v": (self.T, self.R), "m": (self.R, self.N)}

    def param_count(self):
        return self.T * self.R + self.R * self.N

    def materialize(self, params, t):
        v, m = params[self.key("v")], params[self.key("m")]
        i0, i1, f = interp_weights(t, self.T)
        c = (1.0 - f)[:, None] * v[i0] + f[:, None] * v[i1]
        return c @ m, (c, i0, i1, f)

    def backward(self, params, ctx, dres, grads):
        c, i0, i1, f = ctx
        m = params[self.key("m")]
        grads[self.key("m")] += c.T @ dres
        grads[self.key("v")] += _interp_backward(dres @ m.T, i0, i1, f, self.T)


FACTORIZATIONS = {
    cls.tag: cls
    for cls in (
        LowRank,
        Dictionary,
        MatrixMatrix,
        CP,
        Tucker,
        LevelsOfExperts,
        HyperNet,
        Modulated,
        OutputResidual,
    )
}

MODES = ("residual", "direct", "modulated", "output")

# natural mode for each tag; matrix-valued tags may also run in residual mode
DEFAULT_MODE = {tag: "residual" for tag in FACTORIZATIONS}
DEFAULT_MODE.update(modulated="modulated", output="output")


def check_mode(tag, mode):
    if tag not in FACTORIZATIONS:
        raise ValueError(f"unknown factorization {tag!r}; expected one of {sorted(FACTORIZATIONS)}")
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    ok = {
        "modulated": {"modulated"},
        "output": {"output"},
        "direct": {"dictionary", "loe"},
        "residual": set(FACTORIZATIONS) - {"modulated", "output"},
    }[mode]
    if tag not in ok:
        raise ValueError(f"factorization {tag!r} cannot be used in {mode!r} mode")


def make_factorization(tag, n_out, n_in, n_factors, prefix="res", **kw):
    cls = FACTORIZATIONS[tag]
    if tag in ("lowrank", "modulated", "matrix", "cp", "output"):
        args = {"rank": kw.get("rank", 10)}
    elif tag == "tucker":
        args = {"ranks": tuple(kw.get("tucker_ranks", (10, 64, 64)))}
    elif tag == "loe":
        args = {"n_experts": kw.get("n_experts", 4)}
    elif tag == "hypernet":
        args = {"hidden": kw.get("hypernet_hidden", 32)}
    else:
        args = {}
    return cls(n_out, n_in, n_factors, prefix=prefix, **args)


def eval_residual(f: Factorization, params, t_norm):
    """Residual weight (or output vector) of ``f`` at a single ``t_norm``."""
    return f(params, float(t_norm))


def param_count(f: Factorization) -> int:
    return f.param_count()


# -- grouped batched matmul ------------------------------------------------


class TimeGroups:
    """Unique query times of a batch and the sort permutation grouping rows by time.

    Built once per forward pass and shared by every residual layer; batches
    with equal-sized groups use a single batched matmul.
    """

    def __init__(self, t):
        t = np.asarray(t, dtype=np.float64).reshape(-1)
        self.times, inv = np.unique(t, return_inverse=True)
        inv = inv.reshape(-1)
        n_groups = len(self.times)
        self.inv = inv
        self.U = n_groups
        self.order = np.argsort(inv, kind="stable")
        self.counts = np.bincount(inv, minlength=n_groups)
        self.equal = bool(np.all(self.counts == self.counts[0]))
        self.sorted = bool(np.all(self.order == np.arange(len(inv))))
        self.bounds = np.concatenate([[0], np.cumsum(self.counts)])

    def gather(self, a):
        return a if self.sorted else a[self.order]

    def scatter(self, a_sorted):
        if self.sorted:
            return a_sorted
        out = np.empty_like(a_sorted)
        out[self.order] = a_sorted
        return out

    def apply(self, x, Wu, transpose=False):
        """Row ``s`` of the result is ``Wu[inv[s]] @ x[s]`` (or ``Wu^T`` when transposed)."""
        xs = self.gather(x)
        Wt = Wu if transpose else Wu.transpose(0, 2, 1)
        if self.equal:
            k = self.counts[0]
            ys = np.matmul(xs.reshape(self.U, k, -1), Wt).reshape(len(xs), -1)
        else:
            ys = np.empty((len(xs), Wt.shape[2]))
            for u in range(self.U):
                lo, hi = self.bounds[u], self.bounds[u + 1]
                ys[lo:hi] = xs[lo:hi] @ Wt[u]
        return self.scatter(ys)

    def outer(self, dout, x):
        """Per-group ``sum_s dout_s x_s^T``, shape ``(U, N, M)``."""
        ds, xs = self.gather(dout), self.gather(x)
        if self.equal:
            k = self.counts[0]
            return np.matmul(
                ds.reshape(self.U, k, -1).transpose(0, 2, 1), xs.reshape(self.U, k, -1)
            )
        out = np.empty((self.U, ds.shape[1], xs.shape[1]))
        for u in range(self.U):
            lo, hi = self.bounds[u], self.bounds[u + 1]
            out[u] = ds[lo:hi].T @ xs[lo:hi]
        return out


class ResFieldLayer(Layer):
    """Linear layer with a time-conditioned residual on its weight matrix.

    Modes:
      residual   ``(W + dW(t)) x + b``
      direct     ``dW(t) x + b``
      modulated  ``(W * (1 + dW(t))) x + b``
      output     ``W x + b + r(t)``
    """

    def __init__(self, name, in_dim, out_dim, factorization: Factorization, mode="residual",
                 init="glorot", omega0=30.0, base_key=None, residual_std=0.01):
        check_mode(factorization.tag, mode)
        if (factorization.N, factorization.M) != (out_dim, in_dim):
            raise DimensionError(
                f"factorization shape {(factorization.N, factorization.M)} does not match "
                f"layer {(out_dim, in_dim)}"
            )
        self.name = name
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.fact = factorization
        self.mode = mode
        self.init = init
        self.omega0 = omega0
        self.residual_std = residual_std
        base = base_key or name
        self.W_key = f"{base}.W"
        self.b_key = f"{base}.b"
        # chunked models may pass a local time for the residual
        self.local_time = False

    @property
    def param_keys(self):
        base = (self.b_key,) if self.mode == "direct" else (self.W_key, self.b_key)
        return base + self.fact.param_keys

    def base_shapes(self):
        shapes = {self.b_key: (self.out_dim,)}
        if self.mode != "direct":
            shapes[self.W_key] = (self.out_dim, self.in_dim)
        return shapes

    def param_shapes(self):
        return {**self.base_shapes(), **self.fact.param_shapes()}

    def init_base(self, rng):
        W = init_weight(rng, self.init, self.out_dim, self.in_dim, self.omega0)
        b = init_bias(rng, self.init, self.out_dim, self.in_dim)
        out = {self.b_key: b}
        if self.mode != "direct":
            out[self.W_key] = W
        return out, W

    def init_residual(self, rng, W=None):
        p = self.fact.init_params(rng, self.residual_std)
        if self.mode == "direct":
            # every slot starts from the same base-initialised matrix
            (key,) = self.fact.param_keys
            p[key] = np.broadcast_to(W, p[key].shape).copy()
        return p

    def init_params(self, rng):
        base, W = self.init_base(rng)
        return {**base, **self.init_residual(rng, W)}

    def forward(self, params, x, t=None, residual=True):
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise DimensionError(f"{self.name}: expected input (B, {self.in_dim}), got {x.shape}")
        b = params[self.b_key]
        if not residual:
            if self.mode == "direct":
                out = np.broadcast_to(b, (len(x), self.out_dim)).copy()
            else:
                out = x @ params[self.W_key].T + b
            return out, LayerContext("resfield", (x, None, None, None, False))
        if t is None:
            raise ValueError(f"{self.name}: residual field layer needs query times")
        if isinstance(t, TimeGroups):
            groups = t
        else:
            groups = TimeGroups(np.broadcast_to(np.asarray(t, dtype=np.float64), (len(x),)))
        if len(groups.inv) != len(x):
            raise DimensionError(f"{self.name}: {len(groups.inv)} query times for {len(x)} rows")
        res, fctx = self.fact.materialize(params, groups.times)
        if self.mode == "direct":
            out = groups.apply(x, res) + b
            Weff = res
        else:
            W = params[self.W_key]
            out = x @ W.T + b
            if self.mode == "output":
                Weff = None
                out = out + res[groups.inv]
            else:
                Weff = W[None] * res if self.mode == "modulated" else res
                out = out + groups.apply(x, Weff)
        return out, LayerContext("resfield", (x, res, Weff, (fctx, groups), True))

    def backward(self, params, ctx, dout, grads, need_dx=True):
        _check_ctx(ctx, "resfield")
        x, res, Weff, extra, with_res = ctx.saved
        if dout.shape != (len(x), self.out_dim):
            raise DimensionError(f"{self.name}: dout shape {dout.shape} does not match forward")
        grads[self.b_key] += dout.sum(axis=0)
        dx = None
        if self.mode != "direct":
            W = params[self.W_key]
            grads[self.W_key] += dout.T @ x
            if need_dx:
                dx = dout @ W
        if not with_res:
            if self.mode == "direct" and need_dx:
                dx = np.zeros_like(x)
            return dx
        fctx, groups = extra
        if self.mode == "output":
            dres = np.zeros((groups.U, self.out_dim))
            np.add.at(dres, groups.inv, dout)
            self.fact.backward(params, fctx, dres, grads)
            return dx
        dWeff = groups.outer(dout, x)
        if self.mode == "modulated":
            W = params[self.W_key]
            grads[self.W_key] += np.einsum("unm,unm->nm", dWeff, res)
            dres = dWeff * W[None]
        else:
            dres = dWeff
        self.fact.backward(params, fctx, dres, grads)
        if need_dx:
            dxr = groups.apply(dout, Weff, transpose=True)
            dx = dxr if dx is None else dx + dxr
        return dx


def resfield_forward(layer: ResFieldLayer, params, t_norm, x):
    return layer.forward(params, x, t_norm)


def resfield_backward(layer: ResFieldLayer, params, ctx, dout, grads=None):
    """Return ``(dx, grads)``; ``grads`` is created if not supplied."""
    if grads is None:
        grads = {k: np.zeros_like(params[k]) for k in layer.param_keys}
    dx = layer.backward(params, ctx, dout, grads)
    return dx, grads


# -- chunking --------------------------------------------------------------

CHUNK_POLICIES = ("shared", "residual", "both")


@dataclass(frozen=True)
class ChunkedSchedule:
    """Split [0, 1] into ``n_chunks`` intervals with per-chunk parameter copies.

    ``policy`` selects what is replicated per chunk: the base weights
    (``shared``), the residual parameters (``residual``) or ``both``.
    """

    n_chunks: int = 1
    policy: str = "shared"

    def __post_init__(self):
        if self.n_chunks < 1:
            raise ValueError("n_chunks must be >= 1")
        if self.policy not in CHUNK_POLICIES:
            raise ValueError(f"unknown chunk policy {self.policy!r}")

    @property
    def boundaries(self):
        return np.linspace(0.0, 1.0, self.n_chunks + 1)

    @property
    def chunk_base(self):
        return self.n_chunks > 1 and self.policy in ("shared", "both")

    @property
    def chunk_residual(self):
        return self.n_chunks > 1 and self.policy in ("residual", "both")


def chunk_select(schedule: ChunkedSchedule, t_norm):
    """Chunk index and chunk-local time in [0, 1] for each ``t_norm``."""
    t = np.clip(np.asarray(t_norm, dtype=np.float64), 0.0, 1.0)
    C = schedule.n_chunks
    scaled = t * C
    idx = np.minimum(np.floor(scaled).astype(np.intp), C - 1)
    local = scaled - idx
    if np.ndim(t_norm) == 0:
        return int(idx), float(local)
    return idx, local


def chunked_param_count(base: int, residual: int, schedule: ChunkedSchedule) -> int:
    C = schedule.n_chunks
    return base * (C if schedule.chunk_base else 1) + residual * (
        C if schedule.chunk_residual else 1
    )


def factors_per_chunk(n_factors: int, schedule: ChunkedSchedule) -> int:
    if not schedule.chunk_residual:
        return n_factors
    return max(1, math.ceil(n_factors / schedule.n_chunks))


__all__ = [
    "CP",
    "ChunkedSchedule",
    "Dictionary",
    "FACTORIZATIONS",
    "Factorization",
    "HyperNet",
    "LevelsOfExperts",
    "LowRank",
    "MatrixMatrix",
    "Modulated",
    "OutputResidual",
    "ResFieldLayer",
    "StaleContextError",
    "Tucker",
    "chunk_select",
    "chunked_param_count",
    "eval_residual",
    "interp_coeffs",
    "make_factorization",
    "param_count",
    "resfield_backward",
    "resfield_forward",
]
