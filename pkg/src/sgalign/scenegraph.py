"""Multimodal 3D scene graphs and their canonical JSON form."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np

BBOX_TOL = 1e-5


class ValidationError(ValueError):
    """A scene graph violates a structural invariant."""


class ModalityKind(enum.IntEnum):
    P = 0  # object point cloud
    M = 1  # mesh
    S = 2  # structure graph
    T = 3  # caption
    R = 4  # referrals


MODALITIES = tuple(ModalityKind)


@dataclass(frozen=True)
class Mesh:
    vertices: np.ndarray  # (V, 3) meters
    faces: np.ndarray  # (F, 3) vertex indices

    def __post_init__(self):
        object.__setattr__(self, "vertices", np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3))
        object.__setattr__(self, "faces", np.asarray(self.faces, dtype=np.int64).reshape(-1, 3))

    def transformed(self, transform: np.ndarray) -> "Mesh":
        return Mesh(apply_transform(transform, self.vertices), self.faces)


@dataclass(frozen=True)
class ObjectNode:
    id: int
    bbox_centroid: np.ndarray
    bbox_extent: np.ndarray
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    mesh: Mesh | None = None
    caption: str | None = None
    referrals: tuple[str, ...] = ()
    label: str | None = None
    text_embedding: np.ndarray | None = None
    referral_embeddings: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "id", int(self.id))
        object.__setattr__(self, "points", np.asarray(self.points, dtype=np.float64).reshape(-1, 3))
        object.__setattr__(self, "bbox_centroid", np.asarray(self.bbox_centroid, dtype=np.float64).reshape(3))
        object.__setattr__(self, "bbox_extent", np.asarray(self.bbox_extent, dtype=np.float64).reshape(3))
        object.__setattr__(self, "referrals", tuple(self.referrals))

    @classmethod
    def from_points(cls, id: int, points: np.ndarray, **kwargs) -> "ObjectNode":
        """Build a node whose bounding box is the AABB of ``points``."""
        centroid, extent = aabb(points)
        return cls(id=id, bbox_centroid=centroid, bbox_extent=extent, points=points, **kwargs)

    def has(self, kind: ModalityKind) -> bool:
        if kind == ModalityKind.P:
            return len(self.points) > 0
        if kind == ModalityKind.M:
            return self.mesh is not None and len(self.mesh.faces) > 0
        if kind == ModalityKind.T:
            return bool(self.caption) or self.text_embedding is not None
        if kind == ModalityKind.R:
            return len(self.referrals) > 0 or (
                self.referral_embeddings is not None and len(self.referral_embeddings) > 0)
        return False

    @property
    def modalities(self) -> frozenset[ModalityKind]:
        """Payload modalities carried by the node itself (S is scene-level)."""
        return frozenset(k for k in MODALITIES if self.has(k))


@dataclass(frozen=True)
class SceneGraph:
    nodes: tuple[ObjectNode, ...]
    edges: tuple[tuple[int, int, str], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "edges", tuple((int(s), int(d), str(p)) for s, d, p in self.edges))

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def ids(self) -> list[int]:
        return [n.id for n in self.nodes]

    def node(self, node_id: int) -> ObjectNode:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def index_of(self) -> dict[int, int]:
        return {n.id: i for i, n in enumerate(self.nodes)}

    def has_structure(self) -> bool:
        return len(self.edges) > 0 or len(self.nodes) >= 2

    def validate(self) -> "SceneGraph":
        validate_graph(self)
        return self

    def transformed(self, transform: np.ndarray) -> "SceneGraph":
        """Apply a 4x4 rigid transform to all geometry; boxes are recomputed."""
        nodes = []
        for n in self.nodes:
            mesh = n.mesh.transformed(transform) if n.mesh is not None else None
            if len(n.points):
                pts = apply_transform(transform, n.points)
                c, e = aabb(pts)
            elif mesh is not None:
                pts = n.points
                c, e = aabb(mesh.vertices)
            else:
                pts = n.points
                corners = _box_corners(n.bbox_centroid, n.bbox_extent)
                c, e = aabb(apply_transform(transform, corners))
            nodes.append(replace(n, points=pts, mesh=mesh, bbox_centroid=c, bbox_extent=e))
        return SceneGraph(tuple(nodes), self.edges)

    def subgraph(self, keep: Iterable[int]) -> "SceneGraph":
        keep = set(keep)
        nodes = tuple(n for n in self.nodes if n.id in keep)
        edges = tuple(e for e in self.edges if e[0] in keep and e[1] in keep)
        return SceneGraph(nodes, edges)


def aabb(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    extent = np.maximum(hi - lo, 1e-6)
    return (lo + hi) / 2.0, extent


def _box_corners(centroid, extent) -> np.ndarray:
    signs = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], dtype=np.float64)
    return centroid + 0.5 * signs * extent


def apply_transform(transform: np.ndarray, points: np.ndarray) -> np.ndarray:
    t = np.asarray(transform, dtype=np.float64).reshape(4, 4)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return pts @ t[:3, :3].T + t[:3, 3]


def validate_graph(graph: SceneGraph) -> None:
    seen: set[int] = set()
    for n in graph.nodes:
        if n.id in seen:
            raise ValidationError(f"duplicate node id {n.id}")
        seen.add(n.id)
        if not n.modalities:
            raise ValidationError(f"node {n.id} carries no modality payload")
        if not np.all(np.isfinite(n.bbox_centroid)) or not np.all(np.isfinite(n.bbox_extent)):
            raise ValidationError(f"node {n.id} has a non-finite bounding box")
        if np.any(n.bbox_extent <= 0):
            raise ValidationError(f"node {n.id} has non-positive bbox extent {n.bbox_extent.tolist()}")
        if n.mesh is not None and len(n.mesh.faces):
            f = n.mesh.faces
            if f.min() < 0 or f.max() >= len(n.mesh.vertices):
                raise ValidationError(f"node {n.id} mesh has a face index outside [0, {len(n.mesh.vertices)})")
        if len(n.points):
            c, e = aabb(n.points)
            if np.max(np.abs(c - n.bbox_centroid)) > BBOX_TOL or np.max(np.abs(e - n.bbox_extent)) > BBOX_TOL:
                raise ValidationError(f"node {n.id} bbox disagrees with the AABB of its points")
    for s, d, p in graph.edges:
        for end in (s, d):
            if end not in seen:
                raise ValidationError(f"edge ({s}, {d}, {p!r}) references absent node id {end}")
        if s == d:
            raise ValidationError(f"self-edge on node {s} ({p!r})")


def structure_features(graph: SceneGraph) -> np.ndarray:
    """Per-node ``[centroid - scene_centroid, extent]`` as an (N, 6) array."""
    if not graph.nodes:
        return np.zeros((0, 6))
    cents = np.stack([n.bbox_centroid for n in graph.nodes])
    exts = np.stack([n.bbox_extent for n in graph.nodes])
    return np.concatenate([cents - cents.mean(axis=0), exts], axis=1)


# ------------------------------------------------------------- serialization
def _fmt(x: float) -> str:
    s = f"{float(x):.6f}"
    return "0.000000" if s == "-0.000000" else s


def _vec(v) -> str:
    return "[" + ",".join(_fmt(x) for x in v) + "]"


def _mat(m) -> str:
    return "[" + ",".join(_vec(row) for row in m) + "]"


def _str(s: str | None) -> str:
    return "null" if s is None else json.dumps(s, ensure_ascii=False)


def _node_json(n: ObjectNode) -> str:
    if n.mesh is None:
        mesh = "null"
    else:
        faces = "[" + ",".join("[" + ",".join(str(int(i)) for i in f) + "]" for f in n.mesh.faces) + "]"
        mesh = '{"vertices":' + _mat(n.mesh.vertices) + ',"faces":' + faces + "}"
    parts = [
        '"id":' + str(n.id),
        '"label":' + _str(n.label),
        '"points":' + _mat(n.points),
        '"mesh":' + mesh,
        '"caption":' + _str(n.caption),
        '"referrals":[' + ",".join(_str(r) for r in n.referrals) + "]",
        '"bbox":{"centroid":' + _vec(n.bbox_centroid) + ',"extent":' + _vec(n.bbox_extent) + "}",
    ]
    return "{" + ",".join(parts) + "}"


def dumps_scene_graph(graph: SceneGraph, extra: dict | None = None) -> str:
    """Canonical text: nodes by id, edges sorted, fixed keys, 6-decimal floats."""
    validate_graph(graph)
    nodes = sorted(graph.nodes, key=lambda n: n.id)
    edges = sorted(set(graph.edges))
    body = ('{"nodes":[' + ",".join(_node_json(n) for n in nodes) + '],"edges":['
            + ",".join('{"src":%d,"dst":%d,"predicate":%s}' % (s, d, _str(p)) for s, d, p in edges) + "]")
    if extra:
        for key in sorted(extra):
            body += "," + json.dumps(key) + ":" + json.dumps(extra[key], sort_keys=True, separators=(",", ":"))
    return body + "}\n"


def save_scene_graph(graph: SceneGraph, path: str | Path, extra: dict | None = None) -> None:
    text = dumps_scene_graph(graph, extra)
    Path(path).write_text(text, encoding="utf-8")


def canonical(graph: SceneGraph) -> SceneGraph:
    """The graph as it reads back after one save/load round trip."""
    return loads_scene_graph(dumps_scene_graph(graph))


def _node_from_json(obj: dict) -> ObjectNode:
    try:
        mesh = obj.get("mesh")
        if mesh is not None:
            mesh = Mesh(np.asarray(mesh["vertices"], dtype=np.float64).reshape(-1, 3),
                        np.asarray(mesh["faces"], dtype=np.int64).reshape(-1, 3))
        bbox = obj["bbox"]
        return ObjectNode(
            id=int(obj["id"]),
            label=obj.get("label"),
            points=np.asarray(obj.get("points") or [], dtype=np.float64).reshape(-1, 3),
            mesh=mesh,
            caption=obj.get("caption"),
            referrals=tuple(obj.get("referrals") or ()),
            bbox_centroid=bbox["centroid"],
            bbox_extent=bbox["extent"],
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"node {obj.get('id', '?')}: malformed field ({exc})") from exc


def loads_scene_graph(text: str) -> SceneGraph:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValueError(f"scene graph parse error: {exc}") from exc
    if not isinstance(doc, dict) or "nodes" not in doc:
        raise ValueError("scene graph parse error: expected an object with a 'nodes' list")
    nodes = tuple(_node_from_json(n) for n in doc["nodes"])
    try:
        edges = tuple((int(e["src"]), int(e["dst"]), str(e["predicate"])) for e in doc.get("edges", []))
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"malformed edge ({exc})") from exc
    graph = SceneGraph(nodes, edges)
    validate_graph(graph)
    return graph


def load_scene_graph(path: str | Path) -> SceneGraph:
    return loads_scene_graph(Path(path).read_text(encoding="utf-8"))


def load_scene_document(path: str | Path) -> tuple[SceneGraph, dict]:
    """Load a graph plus any extra top-level keys stored alongside it."""
    text = Path(path).read_text(encoding="utf-8")
    doc = json.loads(text)
    extra = {k: v for k, v in doc.items() if k not in ("nodes", "edges")}
    return loads_scene_graph(text), extra
