"""Shared per-point MLP followed by a channel-wise max pool."""

from __future__ import annotations

import numpy as np

from .. import numerics as nx
from ..numerics.layers import Linear, Module
from ..numerics.tensor import tracing_kinks
from ..scenegraph import Mesh
from .sampling import MESH_SAMPLES, canonicalize_points, fps, sample_mesh_surface

POINT_RESOLUTION = 512


class PointEncoder(Module):
    """3 -> 64 -> 128 -> ``out_dim`` per point, then max over points."""

    def __init__(self, rng: np.random.Generator, out_dim: int = 128, widths: tuple[int, int] = (64, 128)):
        self.l1 = Linear(rng, 3, widths[0])
        self.l2 = Linear(rng, widths[0], widths[1])
        self.l3 = Linear(rng, widths[1], out_dim)

    @property
    def out_dim(self) -> int:
        return self.l3.fan_out

    def point_features(self, x):
        h = nx.relu(self.l1(x))
        h = nx.relu(self.l2(h))
        return self.l3(h)

    def _numpy_features(self, x: np.ndarray) -> np.ndarray:
        h = np.maximum(self.l1.numpy_forward(x), 0)
        h = np.maximum(self.l2.numpy_forward(h), 0)
        return self.l3.numpy_forward(h)

    def __call__(self, clouds: np.ndarray) -> nx.Tensor:
        """Encode a batch of equal-size clouds (B, K, 3) into (B, out_dim).

        With gradients enabled only the points that win the max for some
        channel are pushed through the recorded graph; the pooled value and
        its gradient are the same as for the full cloud.
        """
        clouds = np.asarray(clouds, dtype=nx.default_dtype())
        if clouds.ndim != 3 or clouds.shape[-1] != 3 or clouds.shape[1] == 0:
            raise ValueError(f"PointEncoder expects (B, K, 3) clouds with K >= 1, got {clouds.shape}")
        tracked = nx.grad_enabled() and any(p.requires_grad for p in self.parameters().values())
        if not tracked and tracing_kinks():
            return nx.max_reduce(self.point_features(nx.Tensor(clouds)), axis=1)
        feats = self._numpy_features(clouds)
        if not tracked:
            return nx.Tensor(feats.max(axis=1))
        winners = feats.argmax(axis=1)  # (B, out_dim)
        support = np.take_along_axis(clouds, winners[..., None], axis=1)
        return nx.max_reduce(self.point_features(nx.Tensor(support)), axis=1)


def pad_cloud(points: np.ndarray, k: int) -> np.ndarray:
    """Repeat leading points until there are ``k`` (max pooling ignores duplicates)."""
    n = len(points)
    if n >= k:
        return points[:k]
    reps = np.resize(np.arange(n), k)
    return points[reps]


def prepare_points(points: np.ndarray, k: int = POINT_RESOLUTION) -> np.ndarray:
    """fps down to ``k`` points, normalize, and pad to exactly ``k`` rows."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("encode_points: empty point cloud")
    # fps keeps every point when k >= N; pooling ignores their order
    sel = pts if len(pts) <= k else pts[fps(pts, k)]
    return pad_cloud(canonicalize_points(sel), k)


def prepare_mesh(mesh: Mesh, seed: int, n: int = MESH_SAMPLES) -> np.ndarray:
    return canonicalize_points(sample_mesh_surface(mesh, n, seed))


def encode_points(params: PointEncoder, points: np.ndarray) -> nx.Tensor:
    """Encode one already downsampled and canonicalized (k, 3) cloud."""
    pts = np.asarray(points).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("encode_points: empty point cloud")
    return params(pts[None])[0]


def encode_mesh(params: PointEncoder, mesh: Mesh, seed: int = 0, n: int = MESH_SAMPLES) -> nx.Tensor:
    return encode_points(params, prepare_mesh(mesh, seed, n))
