"""End-to-end task runners: fit a field on a dataset and report its metrics."""

from __future__ import annotations

import time

import numpy as np

from . import data, metrics
from .estimator import NeuralFieldRegressor, SceneFlowRegressor
from .models import coords_from_time


def run_video(ds: data.VideoDataset, **params):
    """Fit a video field; return train/test PSNR, parameter count and wall time."""
    Xtr, ytr = ds.arrays("train")
    Xte, yte = ds.arrays("test")
    params.setdefault("frames_per_batch", min(30, ds.n_frames))
    est = NeuralFieldRegressor(**params)
    t0 = time.perf_counter()
    est.fit(Xtr, ytr)
    wall = time.perf_counter() - t0
    return {
        "train_psnr": metrics.psnr(est.predict(Xtr), ytr),
        "test_psnr": metrics.psnr(est.predict(Xte), yte) if len(Xte) else float("nan"),
        "params": est.model_.num_parameters(),
        "wall_seconds": wall,
        "estimator": est,
    }


def render_video(est, shape):
    F, H, W = shape
    ds = data.VideoDataset(np.zeros((F, H, W, 3)), np.zeros((F, H, W), dtype=bool))
    X = ds.coords_for(np.arange(F * H * W))
    return np.clip(est.predict(X), 0.0, 1.0).reshape(F, H, W, 3)


def field_grid(est, t_norm, G=64, box=(-1.0, 1.0)):
    pts = metrics.grid_points(G, box)
    X = np.column_stack([np.full(len(pts), coords_from_time(t_norm)), pts])
    return est.predict(X).reshape(G, G, G)


def run_sdf(scene: data.TemporalSdfScene, n_per_frame=2000, eval_frames=(0, 10, 20), G=64,
            n_eval=30000, data_seed=0, **params):
    """Fit a temporal SDF with the MAPE loss and score extracted meshes per frame."""
    X, y = data.sdf_training_set(scene, n_per_frame, data_seed)
    params.setdefault("loss", "mape")
    params.setdefault("frames_per_batch", min(30, scene.n_frames))
    est = NeuralFieldRegressor(**params)
    t0 = time.perf_counter()
    est.fit(X, y[:, 0])
    wall = time.perf_counter() - t0
    times = data.frame_times(scene.n_frames)
    rows = []
    meshes = {}
    for f in eval_frames:
        t = times[f]
        mesh = metrics.marching_cubes(field_grid(est, t, G), 0.0)
        rng = np.random.default_rng(1000 + f)
        gp = scene.sample_surface(rng, n_eval, t)
        m = metrics.mesh_metrics(mesh, gp, scene.normals(gp, t), n_eval, seed=f)
        rows.append({"frame": f, **m})
        meshes[f] = mesh
    return {
        "chamfer": float(np.mean([r["chamfer"] for r in rows])),
        "nc": float(np.mean([r["nc"] for r in rows])),
        "frames": rows,
        "meshes": meshes,
        "params": est.model_.num_parameters(),
        "wall_seconds": wall,
        "estimator": est,
    }


def sphere_vertex_errors(scene: data.TemporalSdfScene, mesh: metrics.TriMesh, t_norm):
    """Radial error of the vertices whose closest ground-truth primitive is the sphere."""
    sphere = next(p for p in scene.primitives if isinstance(p, data.Sphere))
    v = mesh.vertices
    d = np.stack([np.abs(p.sdf(v, t_norm)) for p in scene.primitives])
    own = np.argmin(d, axis=0) == scene.primitives.index(sphere)
    r = np.linalg.norm(v[own] - np.asarray(sphere.center), axis=1)
    return np.abs(r - sphere.r(t_norm))


def run_flow(ds: data.FlowDataset, **params):
    """Fit bi-directional flow; return held-out forward/backward L1 (x1e3)."""
    Xtr, ytr = ds.arrays("train")
    Xte, yte = ds.arrays("test")
    params.setdefault("frames_per_batch", ds.n_frames)
    est = SceneFlowRegressor(**params)
    t0 = time.perf_counter()
    est.fit(Xtr, ytr)
    wall = time.perf_counter() - t0
    f_te, b_te = est.flow_errors(Xte, yte)
    f_tr, b_tr = est.flow_errors(Xtr, ytr)
    return {
        "test_fwd": 1e3 * f_te,
        "test_bwd": 1e3 * b_te,
        "train_fwd": 1e3 * f_tr,
        "train_bwd": 1e3 * b_tr,
        "params": est.model_.num_parameters(),
        "wall_seconds": wall,
        "estimator": est,
    }
