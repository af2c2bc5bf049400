"""Run configuration and the binary ``.rfck`` checkpoint format."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .models import FieldModel, build_from_meta
from .optim import AdamState
from .resfield import DEFAULT_MODE, check_mode

TASKS = ("video", "sdf", "flow")


# -- run configuration -----------------------------------------------------


@dataclass
class ModelConfig:
    arch: str = "siren"
    width: int = 64
    depth: int = 5
    omega0: float = 30.0
    resfield_layers: list = field(default_factory=lambda: [1, 2, 3])
    factorization: str = "lowrank"
    mode: str | None = None
    rank: int = 10
    factors: int | str | None = None  # count, "95%" or None for one per frame
    n_chunks: int = 1
    chunk_policy: str = "shared"
    head: str = "offset"
    n_basis: int = 10


@dataclass
class DataConfig:
    seed: int = 0
    frames: int = 30
    height: int = 64
    width: int = 64
    segments: int = 1
    holdout: float = 0.1
    points: int = 400
    n_per_frame: int = 2000
    grid: int = 64
    frame_dir: str | None = None


@dataclass
class OptimConfig:
    iterations: int = 1000
    batch_size: int = 1020
    frames_per_batch: int = 30
    lr: float = 5e-4
    lr_min: float = 5e-5


@dataclass
class RunConfig:
    task: str = "video"
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    out_dir: str = "runs/default"

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        m = self.model
        if m.resfield_layers:
            check_mode(m.factorization, m.mode or DEFAULT_MODE[m.factorization])

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        parts = {"model": ModelConfig, "data": DataConfig, "optim": OptimConfig}
        kw = {}
        for f in fields(cls):
            if f.name not in d:
                continue
            v = d.pop(f.name)
            kw[f.name] = _section(parts[f.name], v) if f.name in parts else v
        if d:
            raise ValueError(f"unknown config keys: {sorted(d)}")
        return cls(**kw)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def _section(kind, values):
    names = {f.name for f in fields(kind)}
    bad = sorted(set(values) - names)
    if bad:
        raise ValueError(f"unknown {kind.__name__} keys: {bad}")
    return kind(**values)


def load_config(path):
    with open(path) as fh:
        return RunConfig.from_json(fh.read())


# -- checkpoints -----------------------------------------------------------

MAGIC = b"RFCK"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
DTYPE_CODES = {"f32": 0, "f64": 1}


class CheckpointError(ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass
class Checkpoint:
    config: dict
    tensors: dict
    step: int = 0

    def model(self) -> FieldModel:
        m = build_from_meta(self.config["meta"], initialize=False)
        for k in m.params:
            key = "param/" + k
            if key not in self.tensors:
                raise KeyError(f"checkpoint lacks parameter {k!r}")
            m.params[k] = np.array(self.tensors[key], dtype=np.float64)
        adam = self.config.get("adam")
        if adam is not None:
            state = AdamState(step=adam["step"], beta1=adam["beta1"], beta2=adam["beta2"],
                              eps=adam["eps"])
            for name, t in self.tensors.items():
                kind, _, k = name.partition("/")
                if kind == "adam.m":
                    state.m[k] = np.array(t, dtype=np.float64)
                elif kind == "adam.v":
                    state.v[k] = np.array(t, dtype=np.float64)
            m.optimizer = state
        return m


def _tensor_record(name, arr, code):
    raw = name.encode("utf-8")
    arr = np.ascontiguousarray(arr, dtype=DTYPES[code])
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<BB", code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes()


def save_checkpoint(path, model: FieldModel, optimizer: AdamState | None = None, step=0,
                    run_config=None, dtype="f64"):
    """Write parameters (and Adam moments) in the ``RFCK`` v1 layout."""
    code = DTYPE_CODES[dtype]
    optimizer = optimizer if optimizer is not None else model.optimizer
    config = {"meta": model.meta, "step": int(step)}
    if run_config is not None:
        config["run"] = run_config
    tensors = [("param/" + k, v) for k, v in model.params.items()]
    if optimizer is not None:
        config["adam"] = dict(step=optimizer.step, beta1=optimizer.beta1, beta2=optimizer.beta2,
                              eps=optimizer.eps)
        tensors += [("adam.m/" + k, v) for k, v in optimizer.m.items()]
        tensors += [("adam.v/" + k, v) for k, v in optimizer.v.items()]
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(blob)), blob,
           struct.pack("<I", len(tensors))]
    out += [_tensor_record(n, v, code) for n, v in tensors]
    with open(path, "wb") as fh:
        fh.write(b"".join(out))


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated file while reading {what}", self.pos)
        b = self.buf[self.pos : self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def parse_checkpoint(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError("bad magic, expected b'RFCK'", 0)
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}", 4)
    (n,) = r.unpack("<I", "config length")
    at = r.pos
    try:
        config = json.loads(r.take(n, "config").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"malformed config: {e}", at) from None
    (count,) = r.unpack("<I", "tensor count")
    tensors = {}
    for _ in range(count):
        (ln,) = r.unpack("<H", "name length")
        name = r.take(ln, "tensor name").decode("utf-8")
        at = r.pos
        code, rank = r.unpack("<BB", "dtype/rank")
        if code not in DTYPES:
            raise CheckpointError(f"unknown dtype code {code} for {name!r}", at)
        shape = r.unpack(f"<{rank}Q", f"extents of {name!r}")
        dt = DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        tensors[name] = np.frombuffer(r.take(nbytes, f"data of {name!r}"), dtype=dt).reshape(shape)
    if r.pos != len(buf):
        raise CheckpointError("trailing bytes after last tensor", r.pos)
    return Checkpoint(config, tensors, int(config.get("step", 0)))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())
