"""Mesh extraction, surface sampling and evaluation metrics."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from skimage import measure

PSNR_INF = float("inf")


@dataclass
class TriMesh:
    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3) int
    normals: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")

    @property
    def is_empty(self):
        return len(self.faces) == 0

    def face_areas(self):
        a, b, c = (self.vertices[self.faces[:, k]] for k in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def face_normals(self):
        a, b, c = (self.vertices[self.faces[:, k]] for k in range(3))
        n = np.cross(b - a, c - a)
        return n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)


def empty_mesh():
    return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))


def grid_points(G, box=(-1.0, 1.0)):
    """``(G**3, 3)`` lattice in ``ij`` order covering ``box`` along each axis."""
    ax = np.linspace(box[0], box[1], G)
    return np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1).reshape(-1, 3)


def marching_cubes(sdf_grid, iso=0.0, box=(-1.0, 1.0), area_eps=1e-14):
    """Zero-level mesh of an ``ij``-indexed grid in world coordinates of ``box``.

    Grids that never cross ``iso`` give an empty mesh.
    """
    grid = np.asarray(sdf_grid, dtype=np.float64)
    if grid.ndim != 3 or min(grid.shape) < 2:
        raise ValueError(f"expected a 3-D grid with every side >= 2, got {grid.shape}")
    if not np.all(np.isfinite(grid)):
        raise ValueError("sdf grid contains non-finite values")
    if grid.min() > iso or grid.max() < iso or grid.min() == grid.max():
        return empty_mesh()
    spacing = tuple((box[1] - box[0]) / (n - 1) for n in grid.shape)
    verts, faces, normals, _ = measure.marching_cubes(grid, level=iso, spacing=spacing)
    verts = verts + box[0]
    mesh = TriMesh(verts, faces)
    keep = mesh.face_areas() > area_eps
    return TriMesh(verts, faces[keep], normals)


def sample_surface(mesh: TriMesh, n=30000, seed=0):
    """Area-weighted uniform samples on the mesh with their face normals."""
    if mesh.is_empty:
        raise ValueError("cannot sample an empty mesh")
    rng = np.random.default_rng(seed)
    areas = mesh.face_areas()
    face = rng.choice(len(areas), n, p=areas / areas.sum())
    r1 = np.sqrt(rng.uniform(size=n))
    r2 = rng.uniform(size=n)
    a, b, c = (mesh.vertices[mesh.faces[face, k]] for k in range(3))
    pts = (1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b + (r1 * r2)[:, None] * c
    return pts, mesh.face_normals()[face]


def nearest_neighbors(query, ref, method="tree"):
    """Distances and indices of each query point's nearest reference point."""
    query = np.asarray(query, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if len(query) == 0 or len(ref) == 0:
        raise ValueError("nearest neighbours need non-empty point sets")
    if method == "tree":
        _, i = cKDTree(ref).query(query, k=1)
    elif method == "brute":
        i = np.empty(len(query), dtype=np.int64)
        for s in range(0, len(query), 2048):
            q = query[s : s + 2048]
            d2 = np.sum((q[:, None, :] - ref[None, :, :]) ** 2, axis=2)
            i[s : s + 2048] = np.argmin(d2, axis=1)
    else:
        raise ValueError(f"unknown method {method!r}")
    # both routes report distances through the same expression
    return np.linalg.norm(query - ref[i], axis=1), i


def chamfer_l1(a, b, method="tree"):
    """Symmetric mean of Euclidean nearest-neighbour distances."""
    da, _ = nearest_neighbors(a, b, method)
    db, _ = nearest_neighbors(b, a, method)
    return 0.5 * (np.mean(da) + np.mean(db))


def _unit(n):
    n = np.asarray(n, dtype=np.float64)
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    if not np.allclose(norm, 1.0, atol=1e-6):
        warnings.warn("normals are not unit length; normalising", RuntimeWarning, stacklevel=3)
        n = n / np.maximum(norm, 1e-300)
    return n


def normal_consistency(a, na, b, nb, method="tree"):
    """``0.5 * (mean(1 - |n_p . n_nn(p)|) over a + same over b)``; lower is better."""
    na, nb = _unit(na), _unit(nb)
    _, ia = nearest_neighbors(a, b, method)
    _, ib = nearest_neighbors(b, a, method)
    ca = 1.0 - np.abs(np.sum(na * nb[ia], axis=1))
    cb = 1.0 - np.abs(np.sum(nb * na[ib], axis=1))
    return 0.5 * (np.mean(ca) + np.mean(cb))


def psnr(pred, target, peak=1.0):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    mse = np.mean((pred - target) ** 2)
    if mse == 0:
        return PSNR_INF
    return float(10.0 * np.log10(peak**2 / mse))


def mesh_metrics(pred: TriMesh, gt_points, gt_normals, n=30000, seed=0):
    """Chamfer (x1e3) and normal consistency (x1e2) against a ground-truth sample."""
    if pred.is_empty:
        return {"chamfer": float("inf"), "nc": float("inf")}
    pts, nrm = sample_surface(pred, n, seed)
    return {
        "chamfer": 1e3 * chamfer_l1(pts, gt_points),
        "nc": 1e2 * normal_consistency(pts, nrm, gt_points, gt_normals),
    }


# -- export ----------------------------------------------------------------


def write_obj(path, mesh: TriMesh):
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        for f in mesh.faces + 1:
            fh.write(f"f {f[0]} {f[1]} {f[2]}\n")


def read_obj(path):
    verts, faces = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(p) for p in parts[1:4]])
            elif parts[0] == "f":
                faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    return TriMesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))
