"""Node matching, ranking metrics, overlap classification and graph merging."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .fusion import NodeEmbeddingSet
from .scenegraph import Mesh, ObjectNode, SceneGraph, aabb, apply_transform

MATCH_THRESHOLD = 0.75  # raw cosine 0.5
XI_THRESHOLD = 0.5
HITS_K = (1, 3, 5)


@dataclass(frozen=True)
class SimilarityMatrix:
    values: np.ndarray  # (N1, N2) in [0, 1]
    row_ids: tuple[int, ...]
    col_ids: tuple[int, ...]

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "row_ids", tuple(int(i) for i in self.row_ids))
        object.__setattr__(self, "col_ids", tuple(int(i) for i in self.col_ids))
        if v.shape != (len(self.row_ids), len(self.col_ids)):
            raise ValueError(f"similarity values {v.shape} vs {len(self.row_ids)} rows, {len(self.col_ids)} cols")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def similarity_matrix(e1: NodeEmbeddingSet, e2: NodeEmbeddingSet) -> SimilarityMatrix:
    """(cos + 1) / 2 between joint embeddings."""
    if len(e1) == 0 or len(e2) == 0:
        raise ValueError("similarity_matrix: empty scene")
    a = np.asarray(e1.joint, dtype=np.float64)
    b = np.asarray(e2.joint, dtype=np.float64)
    a = a / np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-12)
    b = b / np.maximum(np.linalg.norm(b, axis=1, keepdims=True), 1e-12)
    vals = np.clip((a @ b.T + 1.0) / 2.0, 0.0, 1.0)
    return SimilarityMatrix(vals, e1.ids, e2.ids)


@dataclass(frozen=True)
class MatchSet:
    pairs: tuple[tuple[int, int, float], ...] = ()

    def __post_init__(self):
        src = [p[0] for p in self.pairs]
        dst = [p[1] for p in self.pairs]
        if len(set(src)) != len(src) or len(set(dst)) != len(dst):
            raise ValueError("MatchSet must be injective in both directions")

    def __len__(self) -> int:
        return len(self.pairs)

    def mapping(self) -> dict[int, int]:
        return {s: d for s, d, _ in self.pairs}


def match_nodes(S: SimilarityMatrix, threshold: float = MATCH_THRESHOLD, optimal: bool = False) -> MatchSet:
    """Greedy one-to-one matching on descending similarity.

    Ties go to the lower row id, then the lower column id. With
    ``optimal=True`` a maximum-weight assignment is used instead and pairs
    below ``threshold`` are dropped afterwards.
    """
    v = S.values
    if v.size == 0:
        return MatchSet()
    if optimal:
        from scipy.optimize import linear_sum_assignment

        rows, cols = linear_sum_assignment(-v)
        keep = [(S.row_ids[r], S.col_ids[c], float(v[r, c])) for r, c in zip(rows, cols) if v[r, c] >= threshold]
        return MatchSet(tuple(sorted(keep, key=lambda p: (-p[2], p[0], p[1]))))
    rid = np.asarray(S.row_ids)
    cid = np.asarray(S.col_ids)
    r, c = np.nonzero(v >= threshold)
    order = np.lexsort((cid[c], rid[r], -v[r, c]))
    used_r: set[int] = set()
    used_c: set[int] = set()
    out = []
    for o in order:
        i, j = int(r[o]), int(c[o])
        if i in used_r or j in used_c:
            continue
        used_r.add(i)
        used_c.add(j)
        out.append((S.row_ids[i], S.col_ids[j], float(v[i, j])))
    ms = MatchSet(tuple(out))
    assert all(p[2] >= threshold for p in ms.pairs)
    return ms


def ranks(S: SimilarityMatrix, ground_truth: Iterable[tuple[int, int]]) -> np.ndarray:
    """Rank of each true column in its row; ties count against the true match."""
    rows = {i: k for k, i in enumerate(S.row_ids)}
    cols = {j: k for k, j in enumerate(S.col_ids)}
    out = []
    for i, j in ground_truth:
        if i not in rows:
            raise KeyError(f"ground-truth source id {i} is not a row of the similarity matrix")
        if j not in cols:
            raise KeyError(f"ground-truth target id {j} is not a column of the similarity matrix")
        row = S.values[rows[i]]
        out.append(int(np.count_nonzero(row >= row[cols[j]])))
    return np.asarray(out, dtype=np.int64)


def mean_rr(S: SimilarityMatrix, ground_truth) -> float:
    r = ranks(S, ground_truth)
    return float(np.mean(1.0 / r)) if len(r) else 0.0


def hits_at_k(S: SimilarityMatrix, ground_truth, k: int) -> float:
    r = ranks(S, ground_truth)
    return float(np.mean(r <= k)) if len(r) else 0.0


def alignment_score(S: SimilarityMatrix, threshold: float = MATCH_THRESHOLD) -> float:
    """Matched fraction of the smaller scene."""
    n = min(S.shape)
    return len(match_nodes(S, threshold)) / n if n else 0.0


@dataclass
class EvalReport:
    mean_rr: float | None = None
    hits: dict[int, float] = field(default_factory=dict)
    precision: float | None = None
    recall: float | None = None
    f1: float | None = None
    count: int = 0
    tags: list[str] = field(default_factory=list)
    bins: list[dict] = field(default_factory=list)

    @classmethod
    def from_ranks(cls, r: np.ndarray, **kw) -> "EvalReport":
        r = np.asarray(r)
        if len(r) == 0:
            return cls(count=0, **kw)
        rep = cls(mean_rr=float(np.mean(1.0 / r)), hits={k: float(np.mean(r <= k)) for k in HITS_K},
                  count=int(len(r)), **kw)
        rep.check()
        return rep

    def check(self) -> None:
        if self.hits:
            h = [self.hits[k] for k in sorted(self.hits)]
            assert all(a <= b + 1e-12 for a, b in zip(h, h[1:])), h
            if self.mean_rr is not None and 1 in self.hits:
                assert self.hits[1] - 1e-12 <= self.mean_rr <= 1.0 + 1e-12

    def metrics(self) -> dict[str, float]:
        out: dict[str, float] = {}
        if self.mean_rr is not None:
            out["mean_rr"] = self.mean_rr
        for k in sorted(self.hits):
            out[f"hits@{k}"] = self.hits[k]
        for name in ("precision", "recall", "f1"):
            val = getattr(self, name)
            if val is not None:
                out[name] = val
        out["count"] = self.count
        return out

    def to_json(self) -> dict:
        doc: dict = {"aggregation": "micro", "tags": list(self.tags), "count": self.count}
        if self.mean_rr is not None:
            doc["mean_rr"] = self.mean_rr
            doc["hits"] = {str(k): v for k, v in sorted(self.hits.items())}
        for name in ("precision", "recall", "f1"):
            if getattr(self, name) is not None:
                doc[name] = getattr(self, name)
        if self.bins:
            doc["bins"] = self.bins
        return doc

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        for k, v in self.metrics().items():
            w.writerow([k, f"{v:.6f}" if isinstance(v, float) else v])
        return buf.getvalue()


def overlap_check(scores: Sequence[float], labels: Sequence[bool], xi_threshold: float = XI_THRESHOLD) -> EvalReport:
    """Precision/recall/F1 of ``xi >= xi_threshold`` as an overlap detector."""
    if len(scores) == 0:
        raise ValueError("overlap_check: empty pair list")
    if len(scores) != len(labels):
        raise ValueError(f"overlap_check: {len(scores)} scores vs {len(labels)} labels")
    pred = np.asarray(scores) >= xi_threshold
    truth = np.asarray(labels, dtype=bool)
    tp = int(np.sum(pred & truth))
    fp = int(np.sum(pred & ~truth))
    fn = int(np.sum(~pred & truth))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return EvalReport(precision=precision, recall=recall, f1=f1, count=len(scores))


def matches_json(ms: MatchSet, xi: float) -> dict:
    return {"pairs": [{"src": s, "dst": d, "score": round(sc, 6)} for s, d, sc in ms.pairs], "xi": round(xi, 6)}


# --------------------------------------------------------------- unification
@dataclass
class UnifiedGraph:
    graph: SceneGraph
    provenance: dict[int, tuple[int | None, int | None]]  # unified id -> (g1 id, g2 id)
    point_sources: dict[int, np.ndarray]  # per point: 0 from g1, 1 from g2
    meshes: dict[int, list[Mesh]]
    captions: dict[int, tuple[str, ...]]
    frame: str  # "g1" when g2 geometry was mapped into g1's frame, else "native"

    def save(self, path: str | Path) -> None:
        from .scenegraph import save_scene_graph

        extra = {
            "frame": self.frame,
            "provenance": [{"id": u, "g1": a, "g2": b} for u, (a, b) in sorted(self.provenance.items())],
            "captions": {str(u): list(c) for u, c in sorted(self.captions.items()) if len(c) > 1},
        }
        save_scene_graph(self.graph, path, extra)


def _union(a: Sequence[str], b: Sequence[str]) -> tuple[str, ...]:
    out = list(a)
    for s in b:
        if s not in out:
            out.append(s)
    return tuple(out)


def _merge_meshes(meshes: list[Mesh]) -> Mesh | None:
    if not meshes:
        return None
    if len(meshes) == 1:
        return meshes[0]
    verts, faces, off = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        faces.append(m.faces + off)
        off += len(m.vertices)
    return Mesh(np.concatenate(verts), np.concatenate(faces))


def build_unified_graph(
    g1: SceneGraph,
    g2: SceneGraph,
    F: MatchSet | Iterable[tuple],
    transform: np.ndarray | None = None,
) -> UnifiedGraph:
    """Merge matched nodes and carry everything else over.

    ``transform`` maps g1's frame to g2's frame; its inverse brings g2's
    geometry into g1's frame. G1 ids are kept; unmatched g2 nodes get fresh
    ids after the largest g1 id, in g2 id order.
    """
    pairs = F.pairs if isinstance(F, MatchSet) else tuple((int(p[0]), int(p[1]), *p[2:]) for p in F)
    src = [p[0] for p in pairs]
    dst = [p[1] for p in pairs]
    if len(set(src)) != len(src) or len(set(dst)) != len(dst):
        raise ValueError("build_unified_graph: match set is not injective")
    ids1, ids2 = set(g1.ids), set(g2.ids)
    for s, d in zip(src, dst):
        if s not in ids1 or d not in ids2:
            raise ValueError(f"build_unified_graph: match ({s}, {d}) references an unknown node")
    g2_to_g1 = dict(zip(dst, src))
    g1_to_g2 = dict(zip(src, dst))
    to_g1 = None if transform is None else np.linalg.inv(np.asarray(transform, dtype=np.float64).reshape(4, 4))
    g2n = g2.transformed(to_g1) if to_g1 is not None else g2

    remap2: dict[int, int] = {}
    nxt = (max(ids1) + 1) if ids1 else 0
    for n in sorted(g2n.nodes, key=lambda n: n.id):
        if n.id in g2_to_g1:
            remap2[n.id] = g2_to_g1[n.id]
        else:
            remap2[n.id] = nxt
            nxt += 1

    nodes: list[ObjectNode] = []
    prov: dict[int, tuple[int | None, int | None]] = {}
    sources: dict[int, np.ndarray] = {}
    meshes: dict[int, list[Mesh]] = {}
    captions: dict[int, tuple[str, ...]] = {}
    g2_by_id = {n.id: n for n in g2n.nodes}

    def put(uid: int, a: ObjectNode | None, b: ObjectNode | None) -> None:
        parts = [x for x in (a, b) if x is not None]
        pts = np.concatenate([x.points for x in parts]) if parts else np.zeros((0, 3))
        tags = np.concatenate([np.full(len(x.points), 0 if x is a else 1, dtype=np.int8) for x in parts])
        ms = [x.mesh for x in parts if x.mesh is not None]
        caps = _union([a.caption] if a is not None and a.caption else [],
                      [b.caption] if b is not None and b.caption else [])
        refs = _union(a.referrals if a is not None else (), b.referrals if b is not None else ())
        mesh = _merge_meshes(ms)
        if len(pts):
            c, e = aabb(pts)
        elif mesh is not None:
            c, e = aabb(mesh.vertices)
        else:
            corners = [x.bbox_centroid + s * x.bbox_extent / 2 for x in parts for s in (-1, 1)]
            c, e = aabb(np.stack(corners))
        first = parts[0]
        nodes.append(replace(first, id=uid, points=pts, mesh=mesh, caption=caps[0] if caps else None,
                             referrals=refs, bbox_centroid=c, bbox_extent=e,
                             label=first.label if first.label is not None else (b.label if b else None),
                             text_embedding=None, referral_embeddings=None))
        prov[uid] = (a.id if a is not None else None, b.id if b is not None else None)
        sources[uid] = tags
        meshes[uid] = ms
        captions[uid] = caps

    for n in g1.nodes:
        other = g1_to_g2.get(n.id)
        put(n.id, n, g2_by_id[other] if other is not None else None)
    for n in sorted(g2n.nodes, key=lambda n: n.id):
        if n.id not in g2_to_g1:
            put(remap2[n.id], None, n)

    edges = set(g1.edges)
    edges.update((remap2[s], remap2[d], p) for s, d, p in g2.edges)
    edges = {e for e in edges if e[0] != e[1]}
    graph = SceneGraph(tuple(nodes), tuple(sorted(edges)))
    return UnifiedGraph(graph, prov, sources, meshes, captions, "g1" if to_g1 is not None else "native")


def save_matches(path: str | Path, ms: MatchSet, xi: float) -> None:
    Path(path).write_text(json.dumps(matches_json(ms, xi), indent=2) + "\n")
