"""Sub-scan pairs with controlled object overlap, and predicted-data noise."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial.transform import Rotation

from ..scenegraph import Mesh, ObjectNode, SceneGraph, aabb
from .scenes import box_iou

OVERLAP_TOL = 0.05
IOU_MIN = 0.25


@dataclass(frozen=True)
class ScenePair:
    g1: SceneGraph
    g2: SceneGraph
    gt_matches: tuple[tuple[int, int], ...]
    overlap_ratio: float
    transform: np.ndarray  # 4x4, maps g1's frame to g2's frame

    @property
    def union_size(self) -> int:
        return len(self.g1) + len(self.g2) - len(self.gt_matches)


def random_transform(rng: np.random.Generator, translation: float = 5.0) -> np.ndarray:
    t = np.eye(4)
    t[:3, :3] = Rotation.random(random_state=rng).as_matrix()
    t[:3, 3] = rng.uniform(-translation, translation, 3)
    return t


def split_sizes(n: int, target: float, tol: float = OVERLAP_TOL) -> tuple[int, int]:
    """Largest union size u <= n and shared count s with |s/u - target| <= tol."""
    for u in range(n, 0, -1):
        s = int(round(target * u))
        for cand in sorted({s, s - 1, s + 1}, key=lambda c: abs(c / u - target)):
            if 1 <= cand <= u and abs(cand / u - target) <= tol + 1e-12:
                return u, cand
    raise ValueError(f"overlap {target:.3f} is unattainable with {n} objects")


def _renumber(graph: SceneGraph, rng: np.random.Generator, offset: int = 1000) -> tuple[SceneGraph, dict[int, int]]:
    perm = rng.permutation(len(graph))
    mapping = {n.id: offset + int(p) for n, p in zip(graph.nodes, perm)}
    order = rng.permutation(len(graph))
    nodes = tuple(replace(graph.nodes[i], id=mapping[graph.nodes[i].id]) for i in order)
    edges = tuple((mapping[s], mapping[d], p) for s, d, p in graph.edges)
    return SceneGraph(nodes, edges), mapping


def _sweep_order(scene: SceneGraph, rng: np.random.Generator) -> list[int]:
    a = rng.uniform(0, 2 * np.pi)
    d = np.array([np.cos(a), np.sin(a)])
    proj = np.array([n.bbox_centroid[:2] @ d for n in scene.nodes])
    return [scene.nodes[i].id for i in np.argsort(proj, kind="stable")]


def make_pair(scene: SceneGraph, target_overlap: float, seed: int = 0, transform: str = "random",
              exclusive: str = "random") -> ScenePair:
    """Two spatially coherent sub-scans whose object-set IoU is near ``target_overlap``.

    ``transform`` is ``"random"`` (uniform rotation, +-5 m translation applied to
    g2) or ``"identity"``. ``exclusive`` divides the non-shared objects between
    the scans at random or as evenly as possible (``"even"``), which makes the
    two scans the same size up to one object.
    """
    if not 0.1 - 1e-9 <= target_overlap <= 0.9 + 1e-9:
        raise ValueError(f"target overlap {target_overlap} outside [0.1, 0.9]")
    if transform not in ("random", "identity"):
        raise ValueError(f"unknown transform mode {transform!r}")
    if exclusive not in ("random", "even"):
        raise ValueError(f"unknown exclusive mode {exclusive!r}")
    rng = np.random.default_rng(seed)
    u, s = split_sizes(len(scene), target_overlap)
    order = _sweep_order(scene, rng)
    start = int(rng.integers(0, len(order) - u + 1))
    window = order[start:start + u]
    excl = u - s
    a1 = int(rng.integers(0, excl + 1))
    if exclusive == "even":
        a1 = excl // 2
    ids1 = window[:a1 + s]
    ids2 = window[a1:]
    g1 = scene.subgraph(ids1)
    g2_local = scene.subgraph(ids2)
    t = random_transform(rng) if transform == "random" else np.eye(4)
    g2, mapping = _renumber(g2_local.transformed(t), rng)
    shared = sorted(set(ids1) & set(ids2))
    matches = tuple((i, mapping[i]) for i in shared)
    ratio = len(matches) / (len(g1) + len(g2) - len(matches))
    return ScenePair(g1, g2, matches, ratio, t)


def make_negative_pair(scene_a: SceneGraph, scene_b: SceneGraph, seed: int = 0, transform: str = "random",
                       fraction: tuple[float, float] = (0.5, 0.9)) -> ScenePair:
    """Sub-scans of two different scenes: no shared objects, overlap 0."""
    rng = np.random.default_rng(seed)

    def cut(scene):
        order = _sweep_order(scene, rng)
        k = max(1, int(round(rng.uniform(*fraction) * len(order))))
        return scene.subgraph(order[:k])

    g1 = cut(scene_a)
    t = random_transform(rng) if transform == "random" else np.eye(4)
    g2, _ = _renumber(cut(scene_b).transformed(t), rng)
    return ScenePair(g1, g2, (), 0.0, t)


def pair_identity(pair: ScenePair) -> ScenePair:
    """The same pair with g2 mapped back into g1's frame."""
    inv = np.linalg.inv(pair.transform)
    return ScenePair(pair.g1, pair.g2.transformed(inv), pair.gt_matches, pair.overlap_ratio, np.eye(4))


# ------------------------------------------------------------ predicted data
@dataclass(frozen=True)
class NoiseConfig:
    p_split: float = 0.2
    p_merge: float = 0.1
    point_dropout: float = 0.2
    sigma: float = 0.02
    p_caption: float = 0.3
    p_referral: float = 0.3
    p_edge: float = 0.2

    @classmethod
    def zero(cls) -> "NoiseConfig":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)


def _split_mesh(mesh: Mesh | None, origin, normal) -> tuple[Mesh | None, Mesh | None]:
    if mesh is None or len(mesh.faces) == 0:
        return None, None
    side = (mesh.vertices[mesh.faces].mean(axis=1) - origin) @ normal >= 0
    out = []
    for keep in (side, ~side):
        if not keep.any():
            out.append(None)
            continue
        faces = mesh.faces[keep]
        used, inv = np.unique(faces, return_inverse=True)
        out.append(Mesh(mesh.vertices[used], inv.reshape(-1, 3)))
    return out[0], out[1]


def _node_like(n: ObjectNode, new_id: int, pts: np.ndarray, mesh: Mesh | None, **kw) -> ObjectNode:
    if len(pts) == 0:
        return replace(n, id=new_id, points=pts, mesh=mesh, **kw)
    c, e = aabb(pts)
    return replace(n, id=new_id, points=pts, mesh=mesh, bbox_centroid=c, bbox_extent=e, **kw)


def _perturb_scene(g: SceneGraph, noise: NoiseConfig, rng: np.random.Generator) -> SceneGraph:
    nodes = list(g.nodes)
    edges = list(g.edges)
    next_id = max(g.ids) + 1
    redirect: dict[int, int] = {}

    # over-segmentation
    out = []
    for n in nodes:
        if noise.p_split > 0 and rng.random() < noise.p_split and len(n.points) >= 4:
            normal = rng.normal(size=3)
            normal /= np.linalg.norm(normal)
            origin = n.points.mean(axis=0)
            side = (n.points - origin) @ normal >= 0
            if side.any() and (~side).any():
                m1, m2 = _split_mesh(n.mesh, origin, normal)
                out.append(_node_like(n, n.id, n.points[side], m1))
                out.append(_node_like(n, next_id, n.points[~side], m2))
                next_id += 1
                continue
        out.append(n)
    nodes = out

    # under-segmentation: merge with the nearest remaining node
    if noise.p_merge > 0 and len(nodes) >= 2:
        alive = {n.id: n for n in nodes}
        for nid in [n.id for n in nodes]:
            if nid not in alive or len(alive) < 2 or rng.random() >= noise.p_merge:
                continue
            a = alive[nid]
            others = [o for o in alive.values() if o.id != nid]
            b = min(others, key=lambda o: (np.linalg.norm(o.bbox_centroid - a.bbox_centroid), o.id))
            meshes = [m for m in (a.mesh, b.mesh) if m is not None]
            mesh = None
            if meshes:
                verts = np.concatenate([m.vertices for m in meshes])
                faces = np.concatenate([meshes[0].faces] + ([meshes[1].faces + len(meshes[0].vertices)]
                                                            if len(meshes) > 1 else []))
                mesh = Mesh(verts, faces)
            big, small = (a, b) if len(a.points) >= len(b.points) else (b, a)
            refs = tuple(dict.fromkeys(big.referrals + small.referrals))
            merged = _node_like(big, a.id, np.concatenate([a.points, b.points]), mesh, referrals=refs)
            alive[a.id] = merged
            del alive[b.id]
            redirect[b.id] = a.id
        nodes = [alive[n.id] for n in nodes if n.id in alive]

    # points, text
    out = []
    for n in nodes:
        pts = n.points
        if noise.point_dropout > 0 and len(pts) > 8:
            keep = rng.random(len(pts)) >= noise.point_dropout
            if keep.sum() < 8:
                keep[:8] = True
            pts = pts[keep]
        if noise.sigma > 0:
            pts = pts + rng.normal(0.0, noise.sigma, pts.shape)
        caption = n.caption if not (n.caption and rng.random() < noise.p_caption) else None
        refs = n.referrals if not (n.referrals and rng.random() < noise.p_referral) else ()
        out.append(_node_like(n, n.id, pts, n.mesh, caption=caption, referrals=refs))
    nodes = out

    def follow(i: int) -> int:
        while i in redirect:
            i = redirect[i]
        return i

    kept = set()
    for s, d, p in edges:
        s, d = follow(s), follow(d)
        if s == d or (noise.p_edge > 0 and rng.random() < noise.p_edge):
            continue
        kept.add((s, d, p))
    return SceneGraph(tuple(nodes), tuple(sorted(kept)))


def propagate_annotations(gt: SceneGraph, pred: SceneGraph, iou_min: float = IOU_MIN) -> dict[int, int]:
    """Predicted id -> ground-truth id of the best-overlapping box (IoU >= ``iou_min``)."""
    out = {}
    gts = sorted(gt.nodes, key=lambda n: n.id)
    for p in pred.nodes:
        best, best_iou = None, -1.0
        for g in gts:  # ascending id, strict > keeps the lower id on ties
            iou = box_iou(p.bbox_centroid, p.bbox_extent, g.bbox_centroid, g.bbox_extent)
            if iou > best_iou:
                best, best_iou = g.id, iou
        if best is not None and best_iou >= iou_min:
            out[p.id] = best
    return out


def _box_iou_nodes(a: ObjectNode, b: ObjectNode) -> float:
    return box_iou(a.bbox_centroid, a.bbox_extent, b.bbox_centroid, b.bbox_extent)


def simulate_predicted(pair: ScenePair, noise: NoiseConfig = NoiseConfig(), seed: int = 0) -> ScenePair:
    """Segmentation, sensor and annotation noise on both sides; matches re-derived."""
    rng = np.random.default_rng(seed)
    p1 = _perturb_scene(pair.g1, noise, rng)
    p2 = _perturb_scene(pair.g2, noise, rng)
    a1 = propagate_annotations(pair.g1, p1)
    a2 = propagate_annotations(pair.g2, p2)
    gt = dict(pair.gt_matches)
    by_gt2: dict[int, list[int]] = {}
    for q, b in a2.items():
        by_gt2.setdefault(b, []).append(q)
    g2_gt = {n.id: n for n in pair.g2.nodes}
    p2_nodes = {n.id: n for n in p2.nodes}
    matches = []
    for p in sorted(a1):
        b = gt.get(a1[p])
        if b is None or b not in by_gt2:
            continue
        reps = by_gt2[b]
        q = max(reps, key=lambda q: (_box_iou_nodes(p2_nodes[q], g2_gt[b]), -q))
        matches.append((p, q))
    return ScenePair(p1, p2, tuple(matches), pair.overlap_ratio, pair.transform)
