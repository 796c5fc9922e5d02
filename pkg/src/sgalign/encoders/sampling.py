"""Point sampling: farthest-point subsampling, mesh surface sampling, normalization."""

from __future__ import annotations

import numpy as np

from ..scenegraph import Mesh

MESH_SAMPLES = 2048


def _sq_dist(points: np.ndarray, q: np.ndarray) -> np.ndarray:
    d = points - q
    return d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2]


def fps(points: np.ndarray, k: int) -> np.ndarray:
    """Greedy farthest-point sample of ``min(k, N)`` indices.

    Starts from the point nearest the centroid; every later pick maximizes the
    distance to the already selected set, ties going to the lowest index.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(pts)
    if n == 0:
        raise ValueError("fps: empty point set")
    if k < 1:
        raise ValueError(f"fps: k must be >= 1, got {k}")
    k = min(k, n)
    out = np.empty(k, dtype=np.int64)
    out[0] = int(np.argmin(_sq_dist(pts, pts.mean(axis=0))))
    nearest = _sq_dist(pts, pts[out[0]])
    for i in range(1, k):
        out[i] = int(np.argmax(nearest))
        np.minimum(nearest, _sq_dist(pts, pts[out[i]]), out=nearest)
    return out


def triangle_areas(mesh: Mesh) -> np.ndarray:
    v = mesh.vertices[mesh.faces]
    return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)


def sample_mesh_surface(mesh: Mesh, n: int = MESH_SAMPLES, seed: int = 0,
                        return_faces: bool = False):
    """Area-weighted uniform samples on the mesh surface, shape (n, 3)."""
    if mesh is None or len(mesh.faces) == 0:
        raise ValueError("sample_mesh_surface: mesh has no triangles")
    areas = triangle_areas(mesh)
    total = areas.sum()
    if not total > 0:
        raise ValueError("sample_mesh_surface: all triangles are degenerate (zero area)")
    rng = np.random.default_rng(seed)
    face = rng.choice(len(areas), size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    tri = mesh.vertices[mesh.faces[face]]
    pts = ((1.0 - r1)[:, None] * tri[:, 0]
           + (r1 * (1.0 - r2))[:, None] * tri[:, 1]
           + (r1 * r2)[:, None] * tri[:, 2])
    return (pts, face) if return_faces else pts


def canonicalize_points(points: np.ndarray) -> np.ndarray:
    """Center on the centroid and scale into the unit ball."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("canonicalize_points: empty point set")
    centered = pts - pts.mean(axis=0)
    radius = np.sqrt((centered * centered).sum(axis=1)).max()
    if radius <= 1e-12:
        return np.zeros_like(centered)
    return centered / radius
