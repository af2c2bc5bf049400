"""Deterministic synthetic datasets: videos, temporal SDF scenes, scene flow."""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .models import coords_from_time


def _rng(seed, *key):
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(key)))


def frame_times(n_frames):
    """``t_norm`` of each frame index: ``f / (F - 1)`` (0 for a single frame)."""
    if n_frames == 1:
        return np.zeros(1)
    return np.arange(n_frames) / (n_frames - 1)


def _mixture_counts(n, fractions):
    counts = [int(np.floor(n * f + 0.5)) for f in fractions[:-1]]
    counts.append(n - sum(counts))
    return counts


# -- video -----------------------------------------------------------------


@dataclass
class VideoDataset:
    frames: np.ndarray  # (F, H, W, 3) in [0, 1]
    test_mask: np.ndarray  # (F, H, W) bool, True = held out
    segments: int = 1
    mode: str = "procedural"

    @property
    def shape(self):
        return self.frames.shape[:3]

    @property
    def n_frames(self):
        return self.frames.shape[0]

    def split_indices(self, split):
        if split not in ("train", "test"):
            raise ValueError("split must be 'train' or 'test'")
        mask = self.test_mask if split == "test" else ~self.test_mask
        return np.flatnonzero(mask.reshape(-1))

    def coords_for(self, flat_idx):
        F, H, W = self.shape
        f, i, j = np.unravel_index(flat_idx, (F, H, W))
        ys = np.linspace(-1.0, 1.0, H) if H > 1 else np.zeros(1)
        xs = np.linspace(-1.0, 1.0, W) if W > 1 else np.zeros(1)
        t = coords_from_time(frame_times(F))
        return np.column_stack([t[f], ys[i], xs[j]])

    def arrays(self, split):
        """All ``(coords, rgb)`` of a split, in flat pixel order."""
        idx = self.split_indices(split)
        return self.coords_for(idx), self.frames.reshape(-1, 3)[idx]

    def with_holdout(self, fraction, seed=0):
        return VideoDataset(self.frames, holdout_mask(self.shape, fraction, seed), self.segments,
                            self.mode)


def holdout_mask(shape, fraction, seed=0):
    n = int(np.prod(shape))
    k = int(np.floor(n * fraction + 0.5))
    if not 0 <= k < n:
        raise ValueError(f"held-out fraction {fraction} leaves no training pixels")
    mask = np.zeros(n, dtype=bool)
    mask[_rng(seed, 3).choice(n, k, replace=False)] = True
    return mask.reshape(shape)


def _segment_frames(rng, n, H, W, n_blobs, n_gratings):
    yy, xx = np.meshgrid(np.linspace(-1, 1, H), np.linspace(-1, 1, W), indexing="ij")
    bg = rng.uniform(0.1, 0.5, 3)
    c0 = rng.uniform(-0.8, 0.8, (n_blobs, 2))
    vel = rng.uniform(-1.2, 1.2, (n_blobs, 2))
    wob = rng.uniform(0.0, 0.4, (n_blobs, 2))
    wob_f = rng.uniform(1.0, 4.0, n_blobs)
    sig = rng.uniform(0.08, 0.3, n_blobs)
    col = rng.uniform(-0.6, 0.6, (n_blobs, 3))
    kvec = rng.normal(0.0, 6.0, (n_gratings, 2))
    speed = rng.uniform(-6.0, 6.0, n_gratings)
    phase = rng.uniform(0, 2 * np.pi, n_gratings)
    gcol = rng.uniform(-0.15, 0.15, (n_gratings, 3))
    out = np.empty((n, H, W, 3))
    for f in range(n):
        tau = f / max(n - 1, 1)
        img = np.broadcast_to(bg, (H, W, 3)).copy()
        for g in range(n_gratings):
            wave = np.sin(kvec[g, 0] * xx + kvec[g, 1] * yy + speed[g] * tau + phase[g])
            img += wave[..., None] * gcol[g]
        for b in range(n_blobs):
            c = c0[b] + vel[b] * tau + wob[b] * np.sin(2 * np.pi * wob_f[b] * tau)
            # bounce inside [-1, 1]
            c = 1.0 - np.abs((c + 1.0) % 4.0 - 2.0)
            r2 = (xx - c[0]) ** 2 + (yy - c[1]) ** 2
            img += np.exp(-r2 / (2 * sig[b] ** 2))[..., None] * col[b]
        out[f] = img
    return out


def gen_video(seed=0, F=30, H=64, W=64, segments=1, holdout=0.1, n_blobs=8, n_gratings=3):
    """Procedural video: moving Gaussian blobs over drifting sinusoidal gratings.

    Content is redrawn at each of ``segments`` boundaries; ``segments == F``
    gives an unrelated scene per frame.
    """
    if min(F, H, W) < 1:
        raise ValueError("F, H, W must be >= 1")
    if not 1 <= segments <= F:
        raise ValueError("segments must lie in [1, F]")
    parts = np.array_split(np.arange(F), segments)
    frames = np.concatenate(
        [_segment_frames(_rng(seed, 1, s), len(p), H, W, n_blobs, n_gratings)
         for s, p in enumerate(parts)]
    )
    frames = np.clip(frames, 0.0, 1.0)
    mode = "random-frames" if segments == F and F > 1 else "procedural"
    return VideoDataset(frames, holdout_mask((F, H, W), holdout, seed), segments, mode)


def sample_video_batch(ds: VideoDataset, n, split="train", seed=0, replace=False):
    """Uniform sample of ``n`` pixels of a split as ``(coords, rgb)``."""
    idx = ds.split_indices(split)
    if len(idx) == 0:
        raise ValueError(f"{split} split is empty")
    if not replace and n > len(idx):
        raise ValueError(f"cannot draw {n} pixels without replacement from {len(idx)}")
    pick = _rng(seed, 2).choice(idx, n, replace=replace)
    return ds.coords_for(pick), ds.frames.reshape(-1, 3)[pick]


# -- PPM frame IO ----------------------------------------------------------


def read_ppm(path):
    """Read a binary (P6) 8-bit PPM into an ``(H, W, 3)`` array in [0, 1]."""
    with open(path, "rb") as fh:
        data = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: not a binary P6 PPM")
    W, H, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PPM supported")
    pixels = np.frombuffer(data, dtype=np.uint8, count=W * H * 3, offset=pos + 1)
    return pixels.reshape(H, W, 3).astype(np.float64) / 255.0


def write_ppm(path, img):
    img = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    H, W = img.shape[:2]
    raw = np.floor(img * 255.0 + 0.5).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{W} {H}\n255\n".encode())
        fh.write(raw.tobytes())


def load_frame_directory(path, holdout=0.1, seed=0):
    """Load ``frame_%05d.ppm`` files in index order as a :class:`VideoDataset`."""
    names = sorted(n for n in os.listdir(path) if n.startswith("frame_") and n.endswith(".ppm"))
    if not names:
        raise FileNotFoundError(f"no frame_%05d.ppm files in {path}")
    frames = np.stack([read_ppm(os.path.join(path, n)) for n in names])
    return VideoDataset(frames, holdout_mask(frames.shape[:3], holdout, seed), 1,
                        "frame-directory")


# -- temporal SDF ----------------------------------------------------------


def _rotation(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)


def _unit_vectors(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


@dataclass
class Sphere:
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 0.5
    pulse: float = 0.0  # radius amplitude
    freq: float = 1.0

    def r(self, t):
        return self.radius + self.pulse * np.sin(2 * np.pi * self.freq * t)

    def sdf(self, x, t):
        return np.linalg.norm(x - np.asarray(self.center), axis=-1) - self.r(t)

    def area(self, t):
        return 4 * np.pi * self.r(t) ** 2

    def sample_surface(self, rng, n, t):
        return np.asarray(self.center) + self.r(t) * _unit_vectors(rng, n)


@dataclass
class Torus:
    major: float = 0.2
    minor: float = 0.07
    orbit_center: tuple = (0.0, 0.0, 0.0)
    orbit_radius: float = 0.7
    tilt: float = 0.6
    spin: float = 1.0

    def frame(self, t):
        ang = 2 * np.pi * t
        c = np.asarray(self.orbit_center) + self.orbit_radius * np.array(
            [np.cos(ang), np.sin(ang), 0.0]
        )
        R = _rotation((0, 0, 1), 2 * np.pi * self.spin * t) @ _rotation((1, 0, 0), self.tilt)
        return c, R

    def sdf(self, x, t):
        c, R = self.frame(t)
        q = (x - c) @ R
        d = np.hypot(q[..., 0], q[..., 1]) - self.major
        return np.hypot(d, q[..., 2]) - self.minor

    def area(self, t):
        return 4 * np.pi**2 * self.major * self.minor

    def sample_surface(self, rng, n, t):
        c, R = self.frame(t)
        out = []
        need = n
        while need > 0:
            u = rng.uniform(0, 2 * np.pi, 2 * need + 8)
            v = rng.uniform(0, 2 * np.pi, 2 * need + 8)
            w = (self.major + self.minor * np.cos(v)) / (self.major + self.minor)
            keep = rng.uniform(size=len(u)) < w
            u, v = u[keep][:need], v[keep][:need]
            rr = self.major + self.minor * np.cos(v)
            q = np.column_stack([rr * np.cos(u), rr * np.sin(u), self.minor * np.sin(v)])
            out.append(q)
            need -= len(q)
        return np.concatenate(out) @ R.T + c


@dataclass
class Capsule:
    a: tuple = (-0.3, 0.0, 0.0)
    b: tuple = (0.3, 0.0, 0.0)
    radius: float = 0.1
    sway: tuple = (0.0, 0.2, 0.0)

    def ends(self, t):
        off = np.asarray(self.sway) * np.sin(2 * np.pi * t)
        return np.asarray(self.a) + off, np.asarray(self.b) - off

    def sdf(self, x, t):
        a, b = self.ends(t)
        ab = b - a
        h = np.clip(((x - a) @ ab) / (ab @ ab), 0.0, 1.0)
        return np.linalg.norm(x - a - h[..., None] * ab, axis=-1) - self.radius

    def area(self, t):
        a, b = self.ends(t)
        L = np.linalg.norm(b - a)
        return 2 * np.pi * self.radius * L + 4 * np.pi * self.radius**2

    def sample_surface(self, rng, n, t):
        a, b = self.ends(t)
        ab = b - a
        L = np.linalg.norm(ab)
        axis = ab / L
        helper = np.array([1.0, 0, 0]) if abs(axis[0]) < 0.9 else np.array([0, 1.0, 0])
        e1 = np.cross(axis, helper)
        e1 /= np.linalg.norm(e1)
        e2 = np.cross(axis, e1)
        cyl = 2 * np.pi * self.radius * L
        caps = 4 * np.pi * self.radius**2
        n_cyl = rng.binomial(n, cyl / (cyl + caps))
        h = rng.uniform(0, 1, n_cyl)
        phi = rng.uniform(0, 2 * np.pi, n_cyl)
        side = (a + h[:, None] * ab + self.radius * (np.cos(phi)[:, None] * e1
                + np.sin(phi)[:, None] * e2))
        d = _unit_vectors(rng, n - n_cyl)
        along = d @ axis
        cap = np.where((along >= 0)[:, None], b, a) + self.radius * d
        return np.concatenate([side, cap])


@dataclass
class TemporalSdfScene:
    primitives: list = field(default_factory=list)
    n_frames: int = 30

    @classmethod
    def default(cls, n_frames=30):
        """Pulsating sphere with a torus orbiting around it."""
        return cls([Sphere((0.0, 0.0, 0.0), 0.32, 0.08, 1.0), Torus()], n_frames)

    def sdf(self, x, t_norm):
        x = np.asarray(x, dtype=np.float64)
        return np.min([p.sdf(x, t_norm) for p in self.primitives], axis=0)

    def normals(self, x, t_norm, h=1e-6):
        g = np.stack(
            [
                self.sdf(x + h * e, t_norm) - self.sdf(x - h * e, t_norm)
                for e in np.eye(3)
            ],
            axis=-1,
        )
        return g / np.linalg.norm(g, axis=-1, keepdims=True)

    def sample_surface(self, rng, n, t_norm, max_rounds=50):
        areas = np.array([p.area(t_norm) for p in self.primitives])
        probs = areas / areas.sum()
        out = []
        need = n
        for _ in range(max_rounds):
            counts = rng.multinomial(2 * need + 4, probs)
            for k, (p, c) in enumerate(zip(self.primitives, counts)):
                if c == 0:
                    continue
                pts = p.sample_surface(rng, c, t_norm)
                others = [q.sdf(pts, t_norm) for j, q in enumerate(self.primitives) if j != k]
                if others:
                    pts = pts[np.min(others, axis=0) >= 0.0]
                out.append(pts)
            pts = np.concatenate(out)
            if len(pts) >= n:
                idx = rng.permutation(len(pts))[:n]
                return pts[idx]
        raise RuntimeError(
            "surface rejection sampling failed; primitives overlap almost entirely "
            f"({[type(p).__name__ for p in self.primitives]})"
        )


def sdf_eval(scene: TemporalSdfScene, x, t_norm):
    return scene.sdf(x, t_norm)


SDF_MIXTURE = (0.5, 0.375, 0.125)


def sample_sdf_batch(scene: TemporalSdfScene, n, t_norm, seed=0, near_sigma=0.1, box=1.0):
    """Surface / near-surface / free-space mixture at one time.

    Returns ``(points, sdf)`` with points ordered surface, near, free.
    """
    if n < 8:
        raise ValueError("n must be >= 8")
    rng = _rng(seed, 4, int(np.floor(t_norm * 1e6)))
    n_s, n_near, n_free = _mixture_counts(n, SDF_MIXTURE)
    surf = scene.sample_surface(rng, n_s + n_near, t_norm)
    near = surf[n_s:] + rng.normal(0.0, near_sigma, (n_near, 3))
    near = np.clip(near, -box, box)
    free = rng.uniform(-box, box, (n_free, 3))
    pts = np.concatenate([surf[:n_s], near, free])
    vals = scene.sdf(pts, t_norm)
    vals[:n_s] = 0.0
    return pts, vals


def sdf_training_set(scene: TemporalSdfScene, n_per_frame, seed=0, near_sigma=0.1):
    """Stack per-frame samples into ``(X, y)`` with ``X = (t, x, y, z)``."""
    Xs, ys = [], []
    for f, t in enumerate(frame_times(scene.n_frames)):
        pts, vals = sample_sdf_batch(scene, n_per_frame, t, seed + 7919 * f, near_sigma)
        Xs.append(np.column_stack([np.full(len(pts), coords_from_time(t)), pts]))
        ys.append(vals[:, None])
    return np.concatenate(Xs), np.concatenate(ys)


# -- scene flow ------------------------------------------------------------


@dataclass
class FlowDataset:
    positions: np.ndarray  # (F, P, 3)
    train_idx: np.ndarray
    test_idx: np.ndarray

    @property
    def n_frames(self):
        return self.positions.shape[0]

    @property
    def flow_fwd(self):
        f = np.zeros_like(self.positions)
        f[:-1] = self.positions[1:] - self.positions[:-1]
        return f

    @property
    def flow_bwd(self):
        f = np.zeros_like(self.positions)
        f[1:] = self.positions[:-1] - self.positions[1:]
        return f

    def arrays(self, split):
        """``X = (t, x, y, z)`` at each frame and ``y = (fwd, bwd)`` flows.

        Flows that would leave the sequence are zero; the flow objective masks them.
        """
        idx = self.train_idx if split == "train" else self.test_idx
        F = self.n_frames
        t = np.repeat(coords_from_time(frame_times(F)), len(idx))
        pos = self.positions[:, idx].reshape(-1, 3)
        fwd = self.flow_fwd[:, idx].reshape(-1, 3)
        bwd = self.flow_bwd[:, idx].reshape(-1, 3)
        return np.column_stack([t, pos]), np.concatenate([fwd, bwd], axis=1)


def _fibonacci_sphere(n):
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    theta = np.pi * (1 + 5**0.5) * i
    return np.column_stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)])


def deform_points(base, tau, params, rigid_only=False):
    ang = 2 * np.pi * params["spin"] * tau
    R = _rotation(params["axis"], ang)
    if rigid_only:
        return base @ R.T
    scale = 1.0 + params["scale_amp"] * np.sin(2 * np.pi * tau * params["scale_freq"] + params["scale_phase"])
    p = base * scale
    bend = params["bend"] * np.sin(2 * np.pi * tau) * p[:, 0] ** 2
    wave = params["wave"] * np.sin(4 * np.pi * p[:, 1] + 2 * np.pi * tau * params["wave_freq"])
    p = p + np.column_stack([np.zeros(len(p)), wave, bend])
    return p @ R.T


def gen_flow(seed=0, F=20, P=400, radius=0.5, rigid_only=False, train_fraction=0.8):
    """Tracked points on a deforming sphere (rotation, anisotropic scaling, bending)."""
    if F < 3 or P < 10:
        raise ValueError("need F >= 3 and P >= 10")
    rng = _rng(seed, 5)
    base = radius * _fibonacci_sphere(P)
    params = dict(
        axis=rng.normal(size=3),
        spin=rng.uniform(0.15, 0.3),
        scale_amp=rng.uniform(0.1, 0.25, 3),
        scale_freq=rng.integers(1, 3, 3),
        scale_phase=rng.uniform(0, 2 * np.pi, 3),
        bend=rng.uniform(0.3, 0.6),
        wave=rng.uniform(0.03, 0.06),
        wave_freq=rng.uniform(1.0, 2.0),
    )
    positions = np.stack([deform_points(base, tau, params, rigid_only) for tau in frame_times(F)])
    perm = _rng(seed, 3).permutation(P)
    n_train = int(np.floor(train_fraction * P + 0.5))
    return FlowDataset(positions, np.sort(perm[:n_train]), np.sort(perm[n_train:]))
