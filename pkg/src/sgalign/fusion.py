"""Projection heads, attention-weighted modality fusion and scene embedding."""

from __future__ import annotations

import hashlib
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from . import numerics as nx
from .encoders import (
    MESH_SAMPLES,
    POINT_RESOLUTION,
    GatEncoder,
    PointEncoder,
    TextEmbeddingProvider,
    TextProjection,
    attention_mask,
    block_mask,
    prepare_mesh,
    prepare_points,
)
from .encoders.gat import MASKED
from .numerics.layers import LayerNorm, Linear, Module, param
from .scenegraph import MODALITIES, ModalityKind, SceneGraph, structure_features

K = len(MODALITIES)
P, M, S, T, R = MODALITIES


class ProjectionHead(Module):
    """(linear -> layer norm -> relu) x2, then linear to the joint dimension."""

    def __init__(self, rng: np.random.Generator, in_dim: int, hidden: int, out_dim: int):
        self.l1 = Linear(rng, in_dim, hidden)
        self.n1 = LayerNorm(hidden)
        self.l2 = Linear(rng, hidden, hidden)
        self.n2 = LayerNorm(hidden)
        self.l3 = Linear(rng, hidden, out_dim)

    @property
    def in_dim(self) -> int:
        return self.l1.fan_in

    def __call__(self, x) -> nx.Tensor:
        x = nx.as_tensor(x)
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"projection head expects input dim {self.in_dim}, got shape {x.shape}")
        h = nx.relu(self.n1(self.l1(x)))
        h = nx.relu(self.n2(self.l2(h)))
        return nx.l2_normalize(self.l3(h), axis=-1)


class FusionParams(Module):
    def __init__(self, rng: np.random.Generator, dim: int):
        self.logits = param(np.zeros(K))
        self.out1 = Linear(rng, dim, dim)
        self.out2 = Linear(rng, dim, dim)

    def weights(self, mask: np.ndarray) -> nx.Tensor:
        """Softmax of the logits restricted to each row's present modalities."""
        mask = np.atleast_2d(np.asarray(mask, dtype=bool))
        if not mask.any(axis=1).all():
            raise ValueError("fuse: a node has no present modality")
        bias = np.where(mask, 0.0, MASKED).astype(nx.default_dtype())
        return nx.softmax(nx.reshape(self.logits, (1, K)) + bias, axis=1)

    def __call__(self, stacked, mask: np.ndarray) -> nx.Tensor:
        """Fuse (N, K, D) unimodal embeddings into (N, D) joint embeddings."""
        w = self.weights(mask)
        mixed = nx.sum_reduce(stacked * nx.reshape(w, (w.shape[0], K, 1)), axis=1)
        h = self.out2(nx.relu(self.out1(mixed)))
        return nx.l2_normalize(h, axis=-1)


@dataclass(frozen=True)
class ModelConfig:
    point_dim: int = 128
    gat_hidden: int = 128
    text_dim: int = 384
    text_feat: int = 128
    head_hidden: int = 128
    embed_dim: int = 512
    share_point_encoder: bool = False


class AlignerModel(Module):
    """Every trainable parameter: encoders, projection heads, fusion, loss weights."""

    def __init__(self, config: ModelConfig = ModelConfig(), seed: int = 0):
        from .losses import UncertaintyParams

        rng = np.random.default_rng(seed)
        c = config
        self.config = config
        self.point = PointEncoder(rng, c.point_dim)
        self.mesh = self.point if c.share_point_encoder else PointEncoder(rng, c.point_dim)
        self.gat = GatEncoder(rng, 6, c.gat_hidden)
        self.caption = TextProjection(rng, c.text_dim, c.text_feat)
        self.referral = TextProjection(rng, c.text_dim, c.text_feat)
        in_dims = {P: c.point_dim, M: c.point_dim, S: c.gat_hidden, T: c.text_feat, R: c.text_feat}
        self.heads = {k.name: ProjectionHead(rng, in_dims[k], c.head_hidden, c.embed_dim) for k in MODALITIES}
        self.fusion = FusionParams(rng, c.embed_dim)
        self.uncertainty = UncertaintyParams()

    def parameters(self, prefix: str = "") -> dict[str, nx.Tensor]:
        params = super().parameters(prefix)
        if self.config.share_point_encoder:
            params = {k: v for k, v in params.items() if not k.startswith(prefix + "mesh.")}
        return params

    def head(self, kind: ModalityKind) -> ProjectionHead:
        return self.heads[ModalityKind(kind).name]

    # --------------------------------------------------------- persistence
    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(arrays)
        if missing:
            raise nx.CheckpointError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        for name, p in params.items():
            if arrays[name].shape != p.shape:
                raise nx.CheckpointError(f"{name}: checkpoint shape {arrays[name].shape} != model {p.shape}")
            p.data = np.asarray(arrays[name], dtype=p.data.dtype).copy()

    def save(self, path: str | Path) -> None:
        nx.save_arrays(path, self.state_arrays())

    @classmethod
    def load(cls, path: str | Path) -> "AlignerModel":
        arrays = nx.load_arrays(path)
        config = ModelConfig(
            point_dim=arrays["point.l3.weight"].shape[1],
            gat_hidden=arrays["gat.lift.weight"].shape[1],
            text_dim=arrays["caption.weight"].shape[0],
            text_feat=arrays["caption.weight"].shape[1],
            head_hidden=arrays["heads.P.l1.weight"].shape[1],
            embed_dim=arrays["fusion.out1.weight"].shape[0],
            share_point_encoder="mesh.l1.weight" not in arrays,
        )
        model = cls(config)
        model.load_arrays(arrays)
        return model


def project_modality(model: AlignerModel, kind: ModalityKind, raw) -> nx.Tensor:
    """Unit-norm joint-space embedding of one modality's encoder output."""
    return model.head(kind)(raw)


def fuse(params: FusionParams, embeddings: dict, mask: Iterable[ModalityKind]) -> nx.Tensor:
    """Joint embedding of one node from its present unimodal embeddings.

    Entries of ``embeddings`` for modalities outside ``mask`` are ignored.
    """
    present = [ModalityKind(k) for k in mask]
    if not present:
        raise ValueError("fuse: empty modality mask")
    dim = params.out1.fan_in
    rows = []
    for k in MODALITIES:
        if k in present:
            rows.append(nx.reshape(nx.as_tensor(embeddings[k]), (1, dim)))
        else:
            rows.append(nx.Tensor(np.zeros((1, dim))))
    stacked = nx.reshape(nx.concat(rows, axis=0), (1, K, dim))
    m = np.array([[k in present for k in MODALITIES]])
    return params(stacked, m)[0]


# ------------------------------------------------------------ scene inputs
@dataclass
class SceneInputs:
    """Encoder-ready arrays for one scene (or a batch of scenes)."""

    ids: list[int]
    mask: np.ndarray  # (N, K) bool
    points: np.ndarray  # (N, Kp, 3) canonical, zeros where absent
    mesh_points: np.ndarray  # (N, Km, 3)
    structure: np.ndarray  # (N, 6)
    attention: np.ndarray  # (N, N) additive mask
    caption: np.ndarray  # (N, text_dim)
    referral: np.ndarray  # (N, text_dim)
    offsets: list[int] = field(default_factory=lambda: [0])

    def __len__(self) -> int:
        return len(self.ids)

    def restrict(self, modalities: Iterable[ModalityKind]) -> "SceneInputs":
        keep = np.array([k in set(modalities) for k in MODALITIES])
        mask = self.mask & keep
        if not mask.any(axis=1).all():
            bad = [self.ids[i] for i in np.flatnonzero(~mask.any(axis=1))]
            raise ValueError(f"modality mask leaves node(s) {bad[:5]} with zero modalities")
        return SceneInputs(self.ids, mask, self.points, self.mesh_points, self.structure,
                           self.attention, self.caption, self.referral, list(self.offsets))

    @staticmethod
    def concat(items: list["SceneInputs"]) -> "SceneInputs":
        offsets = [0]
        for it in items:
            offsets.append(offsets[-1] + len(it))
        return SceneInputs(
            ids=[i for it in items for i in it.ids],
            mask=np.concatenate([it.mask for it in items]),
            points=np.concatenate([it.points for it in items]),
            mesh_points=np.concatenate([it.mesh_points for it in items]),
            structure=np.concatenate([it.structure for it in items]),
            attention=block_mask([it.attention for it in items]),
            caption=np.concatenate([it.caption for it in items]),
            referral=np.concatenate([it.referral for it in items]),
            offsets=offsets,
        )


_CLOUD_CACHE: OrderedDict[tuple, np.ndarray] = OrderedDict()
CLOUD_CACHE_SIZE = 8192


_CACHE_LOCK = threading.Lock()


def _cached(key: tuple, make):
    with _CACHE_LOCK:
        hit = _CLOUD_CACHE.get(key)
        if hit is not None:
            _CLOUD_CACHE.move_to_end(key)
            return hit
    value = make()
    with _CACHE_LOCK:
        _CLOUD_CACHE[key] = value
        if len(_CLOUD_CACHE) > CLOUD_CACHE_SIZE:
            _CLOUD_CACHE.popitem(last=False)
    return value


def _points_key(points: np.ndarray, k: int) -> tuple:
    return ("P", k, hashlib.blake2b(np.ascontiguousarray(points).tobytes(), digest_size=16).digest())


def _mesh_key(mesh, seed: int, n: int) -> tuple:
    h = hashlib.blake2b(np.ascontiguousarray(mesh.vertices).tobytes(), digest_size=16)
    h.update(np.ascontiguousarray(mesh.faces).tobytes())
    return ("M", n, seed, h.digest())


def mesh_seed(base: int, node_id: int) -> int:
    return (base * 1_000_003 + node_id) % (2 ** 63)


def prepare_scene(
    graph: SceneGraph,
    provider: TextEmbeddingProvider,
    point_resolution: int = POINT_RESOLUTION,
    mesh_samples: int = MESH_SAMPLES,
    seed: int = 0,
    modalities: Iterable[ModalityKind] = MODALITIES,
    cache: bool = True,
) -> SceneInputs:
    """Run the non-learned part of every encoder for the requested modalities.

    With ``cache`` the downsampled clouds are memoized by content, which
    makes repeated evaluation of the same scenes cheap.
    """
    wanted = set(ModalityKind(k) for k in modalities)
    n = len(graph)
    if n == 0:
        raise ValueError("cannot embed an empty scene")
    dim = provider.dim
    mask = np.zeros((n, K), dtype=bool)
    pts = np.zeros((n, point_resolution if P in wanted else 1, 3))
    mpts = np.zeros((n, mesh_samples if M in wanted else 1, 3))
    cap = np.zeros((n, dim), dtype=np.float32)
    ref = np.zeros((n, dim), dtype=np.float32)
    for i, node in enumerate(graph.nodes):
        if P in wanted and node.has(P):
            if cache:
                pts[i] = _cached(_points_key(node.points, point_resolution),
                                 lambda: prepare_points(node.points, point_resolution))
            else:
                pts[i] = prepare_points(node.points, point_resolution)
            mask[i, P] = True
        if M in wanted and node.has(M):
            ms = mesh_seed(seed, node.id)
            if cache:
                mpts[i] = _cached(_mesh_key(node.mesh, ms, mesh_samples),
                                  lambda: prepare_mesh(node.mesh, ms, mesh_samples))
            else:
                mpts[i] = prepare_mesh(node.mesh, ms, mesh_samples)
            mask[i, M] = True
        if T in wanted and node.has(T):
            cap[i] = provider.caption_vector(node)
            mask[i, T] = True
        if R in wanted and node.has(R):
            mean = provider.mean_referral(node)
            if mean is not None:
                ref[i] = mean
                mask[i, R] = True
    if S in wanted and graph.has_structure():
        mask[:, S] = True
        structure = structure_features(graph)
        attention = attention_mask(n, graph.edges, graph.index_of())
    else:
        structure = np.zeros((n, 6))
        attention = attention_mask(n, ())
    if not mask.any(axis=1).all():
        bad = [graph.nodes[i].id for i in np.flatnonzero(~mask.any(axis=1))]
        raise ValueError(f"modality selection leaves node(s) {bad[:5]} with zero modalities")
    return SceneInputs(graph.ids, mask, pts, mpts, structure, attention, cap, ref)


@dataclass
class ForwardOutput:
    stacked: nx.Tensor  # (N, K, D), zero rows where absent
    joint: nx.Tensor  # (N, D)
    mask: np.ndarray  # (N, K)


def forward(model: AlignerModel, inputs: SceneInputs) -> ForwardOutput:
    """Encode, project and fuse every node of ``inputs``."""
    n = len(inputs)
    dim = model.config.embed_dim
    mask = inputs.mask
    per_kind = []
    for k in MODALITIES:
        rows = np.flatnonzero(mask[:, k])
        if len(rows) == 0:
            per_kind.append(nx.Tensor(np.zeros((n, dim))))
            continue
        if k == P:
            raw = model.point(inputs.points[rows])
        elif k == M:
            raw = model.mesh(inputs.mesh_points[rows])
        elif k == S:
            feats = model.gat(nx.Tensor(inputs.structure), inputs.attention)
            raw = nx.take_rows(feats, rows) if len(rows) < n else feats
        elif k == T:
            raw = model.caption(nx.Tensor(inputs.caption[rows]))
        else:
            raw = model.referral(nx.Tensor(inputs.referral[rows]))
        emb = model.head(k)(raw)
        per_kind.append(emb if len(rows) == n else nx.scatter_rows(emb, rows, n))
    stacked = nx.stack(per_kind, axis=1)
    joint = model.fusion(stacked, mask)
    return ForwardOutput(stacked, joint, mask)


@dataclass
class NodeEmbeddingSet:
    ids: list[int]
    mask: np.ndarray  # (N, K) bool
    unimodal: np.ndarray  # (N, K, D), zero where absent
    joint: np.ndarray  # (N, D)

    def __len__(self) -> int:
        return len(self.ids)

    def modalities(self, i: int) -> set[ModalityKind]:
        return {k for k in MODALITIES if self.mask[i, k]}


def embed_inputs(model: AlignerModel, inputs: SceneInputs) -> NodeEmbeddingSet:
    with nx.no_grad():
        out = forward(model, inputs)
    return NodeEmbeddingSet(list(inputs.ids), out.mask.copy(), out.stacked.data, out.joint.data)


def embed_scene(
    model: AlignerModel,
    graph: SceneGraph,
    provider: TextEmbeddingProvider | None = None,
    point_resolution: int = POINT_RESOLUTION,
    seed: int = 0,
    modalities: Iterable[ModalityKind] = MODALITIES,
    mesh_samples: int = MESH_SAMPLES,
) -> NodeEmbeddingSet:
    """Joint and unimodal embeddings for every node of ``graph``."""
    provider = provider or TextEmbeddingProvider(dim=model.config.text_dim)
    inputs = prepare_scene(graph, provider, point_resolution, mesh_samples, seed, modalities)
    return embed_inputs(model, inputs)
