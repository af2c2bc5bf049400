"""Field networks: Siren and ReLU+positional-encoding stacks, flow heads."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .layers import Linear, ReLU, Sine, SpaceTimeEncoding
from .resfield import (
    DEFAULT_MODE,
    ChunkedSchedule,
    ResFieldLayer,
    TimeGroups,
    check_mode,
    chunk_select,
    chunked_param_count,
    factors_per_chunk,
    make_factorization,
)


def time_from_coords(c):
    """Map the time coordinate in [-1, 1] back to ``t_norm`` in [0, 1]."""
    return np.clip((np.asarray(c, dtype=np.float64) + 1.0) * 0.5, 0.0, 1.0)


def coords_from_time(t_norm):
    return 2.0 * np.asarray(t_norm, dtype=np.float64) - 1.0


@dataclass
class ResFieldSpec:
    """Which layers carry residual fields and how they are parameterized."""

    layers: tuple = (1, 2, 3)
    factorization: str = "lowrank"
    rank: int = 10
    n_factors: int = 30
    mode: str | None = None
    tucker_ranks: tuple = (10, 64, 64)
    loe_experts: tuple = (2, 4, 8)
    hypernet_hidden: int = 32
    init_std: float = 0.01

    def __post_init__(self):
        self.layers = tuple(int(i) for i in self.layers)
        self.tucker_ranks = tuple(self.tucker_ranks)
        if isinstance(self.loe_experts, int):
            self.loe_experts = (self.loe_experts,) * len(self.layers)
        self.loe_experts = tuple(self.loe_experts)
        if self.mode is None:
            self.mode = DEFAULT_MODE.get(self.factorization, "residual")
        check_mode(self.factorization, self.mode)
        if self.factorization == "loe" and len(self.loe_experts) != len(self.layers):
            raise ValueError(
                f"loe_experts {self.loe_experts} must give one bank size per resfield layer "
                f"{self.layers}"
            )

    def factorization_kwargs(self, position):
        kw = dict(
            rank=self.rank,
            tucker_ranks=self.tucker_ranks,
            hypernet_hidden=self.hypernet_hidden,
        )
        if self.factorization == "loe":
            kw["n_experts"] = self.loe_experts[position]
        return kw

    def to_dict(self):
        return asdict(self)


@dataclass
class FlowHead:
    """Output parameterization for bi-directional scene flow."""

    kind: str = "offset"
    n_basis: int = 10

    def __post_init__(self):
        if self.kind not in ("offset", "se3", "dct"):
            raise ValueError(f"unknown flow head {self.kind!r}")

    @property
    def out_width(self):
        return {"offset": 6, "se3": 12, "dct": 3 * self.n_basis}[self.kind]


@dataclass
class FieldModel:
    """Ordered layer stacks (one per time chunk) over a shared parameter registry."""

    stacks: list
    params: dict
    schedule: ChunkedSchedule = field(default_factory=ChunkedSchedule)
    meta: dict = field(default_factory=dict)
    optimizer: object = None
    _has_res: bool | None = field(default=None, repr=False)

    @property
    def layers(self):
        return self.stacks[0]

    @property
    def has_resfields(self):
        if self._has_res is None:
            self._has_res = any(isinstance(l, ResFieldLayer) for s in self.stacks for l in s)
        return self._has_res

    def num_parameters(self):
        return int(sum(p.size for p in self.params.values()))

    def zero_grads(self):
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def _run(self, stack, x, t, residual):
        if residual and self.has_resfields:
            t = TimeGroups(t)
        ctxs = []
        for layer in stack:
            x, ctx = layer.forward(self.params, x, t, residual)
            ctxs.append(ctx)
        return x, ctxs

    def forward(self, X, residual=True):
        X = np.asarray(X, dtype=np.float64)
        t = time_from_coords(X[:, 0])
        if len(self.stacks) == 1:
            out, ctxs = self._run(self.stacks[0], X, t, residual)
            return out, [(None, ctxs)]
        idx, local = chunk_select(self.schedule, t)
        t_res = local if self.schedule.chunk_residual else t
        out = None
        parts = []
        for c in np.unique(idx):
            sel = np.flatnonzero(idx == c)
            o, ctxs = self._run(self.stacks[c], X[sel], t_res[sel], residual)
            if out is None:
                out = np.empty((len(X), o.shape[1]))
            out[sel] = o
            parts.append((sel, ctxs, int(c)))
        return out, [(p[0], p[1], p[2]) for p in parts]

    def backward(self, ctx, dout, grads=None):
        if grads is None:
            grads = self.zero_grads()
        for part in ctx:
            sel, ctxs = part[0], part[1]
            stack = self.stacks[part[2]] if len(part) > 2 else self.stacks[0]
            d = dout if sel is None else dout[sel]
            for i in reversed(range(len(stack))):
                d = stack[i].backward(self.params, ctxs[i], d, grads, need_dx=i > 0)
        return grads

    def __call__(self, X, residual=True, batch_size=65536):
        X = np.asarray(X, dtype=np.float64)
        outs = [self.forward(X[i : i + batch_size], residual)[0] for i in range(0, len(X), batch_size)]
        return np.concatenate(outs, axis=0)

    predict = __call__


def _allocate(stacks, rng, initialize):
    params = {}
    for stack in stacks:
        for layer in stack:
            shapes = layer.param_shapes()
            if not shapes or all(k in params for k in shapes):
                continue
            if not initialize:
                for k, s in shapes.items():
                    params.setdefault(k, np.zeros(s))
                continue
            if isinstance(layer, ResFieldLayer):
                base, W = layer.init_base(rng)
                res = layer.init_residual(rng, W)
                new = {**base, **res}
            else:
                new = layer.init_params(rng)
            for k, v in new.items():
                params.setdefault(k, v)
    return params


def _build_stacks(dims, resfield, schedule, make_activation, inits, prefix_layers=(), omega0=30.0):
    n_lin = len(dims) - 1
    schedule = schedule or ChunkedSchedule()
    if resfield is not None:
        bad = [i for i in resfield.layers if not 0 <= i < n_lin]
        if bad:
            raise ValueError(f"resfield layer indices {bad} outside 0..{n_lin - 1}")
        n_factors = factors_per_chunk(resfield.n_factors, schedule)
    stacks = []
    for c in range(schedule.n_chunks):
        base_pre = f"chunk{c}." if schedule.chunk_base else ""
        res_pre = f"chunk{c}." if schedule.chunk_residual else ""
        stack = list(prefix_layers)
        for i in range(n_lin):
            fan_in, fan_out = dims[i], dims[i + 1]
            name = f"{base_pre}layers.{i}"
            if resfield is not None and i in resfield.layers:
                pos = resfield.layers.index(i)
                fact = make_factorization(
                    resfield.factorization,
                    fan_out,
                    fan_in,
                    n_factors,
                    prefix=f"{res_pre}layers.{i}.res",
                    **resfield.factorization_kwargs(pos),
                )
                layer = ResFieldLayer(
                    name, fan_in, fan_out, fact, resfield.mode, init=inits[i], omega0=omega0,
                    residual_std=resfield.init_std,
                )
            else:
                layer = Linear(name, fan_in, fan_out, init=inits[i], omega0=omega0)
            stack.append(layer)
            if i < n_lin - 1:
                stack.append(make_activation())
        stacks.append(stack)
    return stacks, schedule


def build_siren(width, depth, in_dim, out_dim, resfield: ResFieldSpec | None = None,
                omega0=30.0, seed=0, chunks: ChunkedSchedule | None = None, initialize=True):
    """Siren with ``depth`` linear layers; sine after every layer but the last."""
    if depth < 2:
        raise ValueError("depth must be >= 2")
    dims = [in_dim] + [width] * (depth - 1) + [out_dim]
    inits = ["siren_first"] + ["siren"] * (depth - 1)
    stacks, schedule = _build_stacks(
        dims, resfield, chunks, lambda: Sine(omega0), inits, omega0=omega0
    )
    rng = np.random.default_rng(seed)
    params = _allocate(stacks, rng, initialize)
    meta = dict(arch="siren", width=width, depth=depth, in_dim=in_dim, out_dim=out_dim,
                omega0=omega0, resfield=resfield.to_dict() if resfield else None,
                chunks=dict(n_chunks=schedule.n_chunks, policy=schedule.policy))
    return FieldModel(stacks, params, schedule, meta)


def build_relu_pe(width, depth, pe_levels=(6, 4), head: FlowHead | None = None,
                  resfield: ResFieldSpec | None = None, space_dim=3, seed=0,
                  chunks: ChunkedSchedule | None = None, initialize=True):
    """ReLU MLP on positionally encoded ``(t, x)`` with a linear flow head."""
    if depth < 2:
        raise ValueError("depth must be >= 2")
    head = head or FlowHead()
    enc = SpaceTimeEncoding(space_dim, pe_levels[0], pe_levels[1])
    dims = [enc.out_dim] + [width] * (depth - 1) + [head.out_width]
    inits = ["glorot"] * depth
    stacks, schedule = _build_stacks(dims, resfield, chunks, ReLU, inits, prefix_layers=(enc,))
    rng = np.random.default_rng(seed)
    params = _allocate(stacks, rng, initialize)
    meta = dict(arch="relu_pe", width=width, depth=depth, in_dim=space_dim + 1,
                out_dim=head.out_width, pe_levels=list(pe_levels),
                head=dict(kind=head.kind, n_basis=head.n_basis),
                resfield=resfield.to_dict() if resfield else None,
                chunks=dict(n_chunks=schedule.n_chunks, policy=schedule.policy))
    return FieldModel(stacks, params, schedule, meta)


def build_from_meta(meta, seed=0, initialize=True):
    """Rebuild an (uninitialised) model skeleton from ``FieldModel.meta``."""
    rf = meta.get("resfield")
    spec = ResFieldSpec(**rf) if rf else None
    chunks = ChunkedSchedule(**meta.get("chunks", {}))
    if meta["arch"] == "siren":
        return build_siren(meta["width"], meta["depth"], meta["in_dim"], meta["out_dim"], spec,
                           meta.get("omega0", 30.0), seed, chunks, initialize)
    if meta["arch"] == "relu_pe":
        return build_relu_pe(meta["width"], meta["depth"], tuple(meta["pe_levels"]),
                             FlowHead(**meta["head"]), spec, meta["in_dim"] - 1, seed, chunks,
                             initialize)
    raise ValueError(f"unknown arch {meta['arch']!r}")


def base_only_eval(model: FieldModel, X):
    """Evaluate with every residual contribution forced to zero."""
    return model(X, residual=False)


# -- scene-flow heads ------------------------------------------------------


def _cross(a, b):
    # complex-safe cross product along the last axis
    return np.stack(
        [
            a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1],
            a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2],
            a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0],
        ],
        axis=-1,
    )


def _se3_coeffs(theta2):
    small = np.real(theta2) < 1e-6
    th2 = np.where(small, 1.0, theta2)
    th = np.sqrt(th2)
    s, c = np.sin(th), np.cos(th)
    A = np.where(small, 1 - theta2 / 6 + theta2**2 / 120, s / th)
    B = np.where(small, 0.5 - theta2 / 24 + theta2**2 / 720, (1 - c) / th2)
    C = np.where(small, 1 / 6 - theta2 / 120 + theta2**2 / 5040, (th - s) / (th2 * th))
    return A, B, C


def se3_apply(screw, x):
    """Apply ``exp(screw)`` to points ``x``; ``screw = (omega, v)`` per row.

    Rodrigues rotation plus the V-matrix translation, about the origin.
    Written with complex-safe operations so complex-step derivatives work.
    """
    w, v = screw[..., :3], screw[..., 3:6]
    A, B, C = _se3_coeffs(np.sum(w * w, axis=-1))
    A, B, C = A[..., None], B[..., None], C[..., None]
    wx = _cross(w, x)
    wv = _cross(w, v)
    rot = x + A * wx + B * _cross(w, wx)
    trans = v + B * wv + C * _cross(w, wv)
    return rot + trans


def se3_displacement_jacobian(screw, x, h=1e-20):
    """``d(exp(screw) x) / d screw`` by complex step, shape ``(B, 3, 6)``."""
    screw = np.asarray(screw, dtype=np.float64)
    J = np.empty(screw.shape[:-1] + (3, 6))
    for k in range(6):
        s = screw.astype(np.complex128)
        s[..., k] += 1j * h
        J[..., :, k] = np.imag(se3_apply(s, x)) / h
    return J


def dct_basis(tau, n_basis, n_frames):
    """DCT-II basis ``cos(pi (2 tau + 1) k / (2 n))`` for ``k < n_basis``."""
    k = np.arange(n_basis)
    return np.cos(np.pi * (2.0 * np.asarray(tau, dtype=np.float64)[..., None] + 1.0) * k / (2.0 * n_frames))


def dct_trajectory(coeffs, tau, n_frames):
    """Positions ``sum_k c_k cos(...)`` per axis; ``coeffs`` shape ``(..., 3, K)``."""
    basis = dct_basis(tau, coeffs.shape[-1], n_frames)
    return np.einsum("...ak,...k->...a", coeffs, basis)


@dataclass
class FlowContext:
    kind: str
    saved: tuple


def flow_forward(head: FlowHead, raw, x, t_frame, n_frames):
    """Forward and backward displacements for a batch.

    Returns ``(fwd, bwd, valid_fwd, valid_bwd, ctx)``.  Displacements that
    would leave the sequence are zero and flagged invalid.
    """
    raw = np.asarray(raw, dtype=np.float64)
    t_frame = np.asarray(t_frame).astype(np.intp)
    valid_f = t_frame < n_frames - 1
    valid_b = t_frame > 0
    if head.kind == "offset":
        fwd, bwd = raw[:, :3].copy(), raw[:, 3:6].copy()
        saved = ()
    elif head.kind == "se3":
        sf, sb = raw[:, :6], raw[:, 6:12]
        fwd = se3_apply(sf, x) - x
        bwd = se3_apply(sb, x) - x
        saved = (sf, sb, x)
    else:
        K = head.n_basis
        coeffs = raw.reshape(len(raw), 3, K)
        here = dct_basis(t_frame, K, n_frames)
        df = dct_basis(t_frame + 1, K, n_frames) - here
        db = dct_basis(t_frame - 1, K, n_frames) - here
        fwd = np.einsum("bak,bk->ba", coeffs, df)
        bwd = np.einsum("bak,bk->ba", coeffs, db)
        saved = (df, db)
    fwd[~valid_f] = 0.0
    bwd[~valid_b] = 0.0
    return fwd, bwd, valid_f, valid_b, FlowContext(head.kind, saved + (valid_f, valid_b))


def flow_backward(head: FlowHead, ctx: FlowContext, dfwd, dbwd):
    *saved, valid_f, valid_b = ctx.saved
    dfwd = np.where(valid_f[:, None], dfwd, 0.0)
    dbwd = np.where(valid_b[:, None], dbwd, 0.0)
    if head.kind == "offset":
        return np.concatenate([dfwd, dbwd], axis=1)
    if head.kind == "se3":
        sf, sb, x = saved
        Jf, Jb = se3_displacement_jacobian(sf, x), se3_displacement_jacobian(sb, x)
        return np.concatenate(
            [np.einsum("bij,bi->bj", Jf, dfwd), np.einsum("bij,bi->bj", Jb, dbwd)], axis=1
        )
    df, db = saved
    g = np.einsum("ba,bk->bak", dfwd, df) + np.einsum("ba,bk->bak", dbwd, db)
    return g.reshape(len(g), -1)


def apply_flow(head: FlowHead, raw_out, x, t_frame, direction, n_frames):
    """Displacement of a single point ``x`` at frame ``t_frame``."""
    if direction not in ("fwd", "bwd"):
        raise ValueError("direction must be 'fwd' or 'bwd'")
    fwd, bwd, vf, vb, _ = flow_forward(
        head, np.atleast_2d(raw_out), np.atleast_2d(np.asarray(x, dtype=np.float64)),
        np.array([t_frame]), n_frames,
    )
    return (fwd if direction == "fwd" else bwd)[0]


def formula_param_count(meta):
    """Closed-form parameter count from a model description (``FieldModel.meta``).

    Independent of allocation; tests compare it with ``num_parameters()``.
    """
    if meta["arch"] == "siren":
        first = meta["in_dim"]
    else:
        pe = meta["pe_levels"]
        space = meta["in_dim"] - 1
        first = space * (2 * pe[0] + 1) + (2 * pe[1] + 1)
    dims = [first] + [meta["width"]] * (meta["depth"] - 1) + [meta["out_dim"]]
    rf = meta.get("resfield")
    spec = ResFieldSpec(**rf) if rf else None
    schedule = ChunkedSchedule(**meta.get("chunks", {}))
    base = residual = 0
    for i in range(len(dims) - 1):
        fan_in, fan_out = dims[i], dims[i + 1]
        base += fan_out
        if spec is not None and i in spec.layers:
            if spec.mode != "direct":
                base += fan_in * fan_out
            fact = make_factorization(spec.factorization, fan_out, fan_in,
                                      factors_per_chunk(spec.n_factors, schedule),
                                      **spec.factorization_kwargs(spec.layers.index(i)))
            residual += fact.param_count()
        else:
            base += fan_in * fan_out
    return chunked_param_count(base, residual, schedule)
