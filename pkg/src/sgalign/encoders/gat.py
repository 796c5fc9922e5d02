"""Two-layer graph attention over the structure graph."""

from __future__ import annotations

import numpy as np

from .. import numerics as nx
from ..numerics.layers import Linear, Module, param
from ..scenegraph import SceneGraph, structure_features

MASKED = -1e9
LEAKY_SLOPE = 0.2


class GatLayer(Module):
    """Single-head attention with a diagonal (per-channel scale) transform."""

    def __init__(self, rng: np.random.Generator, dim: int, slope: float = LEAKY_SLOPE):
        self.scale = param(1.0 + 0.1 * rng.standard_normal(dim))
        bound = 1.0 / np.sqrt(dim)
        self.att_self = param(rng.uniform(-bound, bound, size=(dim, 1)))
        self.att_neigh = param(rng.uniform(-bound, bound, size=(dim, 1)))
        self.slope = slope

    def __call__(self, h, mask_bias: np.ndarray) -> nx.Tensor:
        z = h * self.scale
        e = nx.matmul(z, self.att_self) + nx.transpose(nx.matmul(z, self.att_neigh))
        alpha = nx.softmax(nx.leaky_relu(e, self.slope) + mask_bias, axis=1)
        return nx.relu(nx.matmul(alpha, z))


class GatEncoder(Module):
    def __init__(self, rng: np.random.Generator, in_dim: int = 6, hidden: int = 128, slope: float = LEAKY_SLOPE):
        self.lift = Linear(rng, in_dim, hidden)
        self.layers = [GatLayer(rng, hidden, slope), GatLayer(rng, hidden, slope)]

    @property
    def out_dim(self) -> int:
        return self.lift.fan_out

    def __call__(self, features, mask_bias: np.ndarray) -> nx.Tensor:
        h = self.lift(features)
        for layer in self.layers:
            h = layer(h, mask_bias)
        return h


def attention_mask(n: int, edges, index: dict[int, int] | None = None) -> np.ndarray:
    """Additive mask over (target i, source j): 0 where j -> i is an edge or i == j."""
    index = index or {i: i for i in range(n)}
    bias = np.full((n, n), MASKED, dtype=nx.default_dtype())
    np.fill_diagonal(bias, 0.0)
    for s, d, *_ in edges:
        bias[index[d], index[s]] = 0.0
    return bias


def block_mask(masks: list[np.ndarray]) -> np.ndarray:
    n = sum(len(m) for m in masks)
    out = np.full((n, n), MASKED, dtype=nx.default_dtype())
    at = 0
    for m in masks:
        k = len(m)
        out[at:at + k, at:at + k] = m
        at += k
    return out


def encode_structure(params: GatEncoder, graph: SceneGraph) -> nx.Tensor:
    """Structure embeddings (N, hidden) in node order."""
    feats = structure_features(graph)
    return params(nx.Tensor(feats), attention_mask(len(graph), graph.edges, graph.index_of()))
