"""Random furnished rooms with templated captions, referrals and relation edges."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..encoders.sampling import sample_mesh_surface, triangle_areas
from ..scenegraph import Mesh, ObjectNode, SceneGraph
from .shapes import SHAPES

COLORS = ("red", "blue", "green", "yellow", "white", "black", "gray", "brown", "orange", "purple")
MATERIALS = ("wooden", "metal", "plastic", "fabric", "leather", "glass", "stone", "wicker")
RELATIONS = ("left of", "right of", "in front of", "behind", "next to", "near", "standing on", "supporting")
PHRASES = {r: f"is {r}" for r in RELATIONS}

AXIS_MARGIN = 0.25  # directional relations need this much centroid separation
LATERAL_LIMIT = 1.5
REACH = 3.0
NEXT_TO_GAP = 0.5
STACK_TOL = 0.03


@dataclass(frozen=True)
class SyntheticSceneConfig:
    room_x: tuple[float, float] = (6.0, 10.0)
    room_y: tuple[float, float] = (6.0, 10.0)
    object_count: tuple[int, int] = (10, 16)
    shapes: tuple[str, ...] = tuple(SHAPES)
    stack_prob: float = 0.25
    point_density: float = 150.0  # points per square meter of surface
    point_range: tuple[int, int] = (256, 768)
    point_noise: float = 0.005
    colors: tuple[str, ...] = COLORS
    materials: tuple[str, ...] = MATERIALS
    referral_count: tuple[int, int] = (1, 4)
    relations: tuple[str, ...] = RELATIONS
    gap: float = 0.15
    retries: int = 400

    def validate(self) -> "SyntheticSceneConfig":
        for name in ("room_x", "room_y", "object_count", "point_range", "referral_count"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: min {lo} > max {hi}")
        if self.object_count[0] < 1:
            raise ValueError("object_count must allow at least one object")
        if self.referral_count[0] < 0:
            raise ValueError("referral_count must be nonnegative")
        for s in self.shapes:
            if s not in SHAPES:
                raise ValueError(f"unknown shape {s!r}")
        if not self.shapes or not self.colors or not self.materials:
            raise ValueError("shape, color and material vocabularies must be nonempty")
        return self


@dataclass
class _Placed:
    shape: str
    size: np.ndarray
    yaw: float
    base: np.ndarray  # xy center, z of the bottom
    radius: float
    color: str
    material: str
    support: int | None = None
    carries: int | None = None
    height: float = field(init=False)

    def __post_init__(self):
        self.height = float(self.size[2])

    @property
    def top(self) -> float:
        return float(self.base[2] + self.height)


def _yaw_matrix(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _place(config: SyntheticSceneConfig, rng: np.random.Generator, n: int, room: np.ndarray) -> list[_Placed]:
    placed: list[_Placed] = []
    tries = 0
    while len(placed) < n:
        tries += 1
        if tries > config.retries:
            raise RuntimeError(f"infeasible placement: {len(placed)} of {n} objects after {config.retries} tries")
        spec = SHAPES[config.shapes[rng.integers(len(config.shapes))]]
        size = spec.sample_size(rng)
        yaw = float(rng.uniform(0, 2 * np.pi))
        radius = 0.5 * float(np.hypot(size[0], size[1]))
        color = config.colors[rng.integers(len(config.colors))]
        material = config.materials[rng.integers(len(config.materials))]
        supports = [i for i, p in enumerate(placed)
                    if SHAPES[p.shape].support and p.carries is None and p.support is None
                    and min(p.size[0], p.size[1]) > 2 * radius]
        if spec.stackable and supports and rng.random() < config.stack_prob:
            j = supports[rng.integers(len(supports))]
            base = np.array([placed[j].base[0], placed[j].base[1], placed[j].top])
            placed.append(_Placed(spec.name, size, yaw, base, radius, color, material, support=j))
            placed[j].carries = len(placed) - 1
            continue
        lo = radius + 0.05
        if 2 * lo >= min(room):
            continue
        xy = rng.uniform([lo, lo], room - lo)
        ok = all(np.hypot(*(xy - p.base[:2])) >= radius + p.radius + config.gap
                 for p in placed if p.support is None)
        if ok:
            placed.append(_Placed(spec.name, size, yaw, np.array([xy[0], xy[1], 0.0]), radius, color, material))
    return placed


def _point_count(mesh: Mesh, config: SyntheticSceneConfig) -> int:
    lo, hi = config.point_range
    return int(np.clip(round(triangle_areas(mesh).sum() * config.point_density), lo, hi))


def describe(color: str | None, shape: str) -> str:
    return f"the {color} {shape}" if color else f"the {shape}"


def caption_for(color: str, shape: str, material: str) -> str:
    return f"The {color} {shape} is {material}"


# -------------------------------------------------------------- relations
def _bottom(n: ObjectNode) -> float:
    return float(n.bbox_centroid[2] - n.bbox_extent[2] / 2)


def _top(n: ObjectNode) -> float:
    return float(n.bbox_centroid[2] + n.bbox_extent[2] / 2)


def _stacked_on(a: ObjectNode, b: ObjectNode) -> bool:
    if abs(_bottom(a) - _top(b)) > STACK_TOL:
        return False
    d = np.abs(a.bbox_centroid[:2] - b.bbox_centroid[:2])
    return bool(np.all(d <= b.bbox_extent[:2] / 2))


def relation_holds(graph: SceneGraph, a: ObjectNode, b: ObjectNode, rel: str) -> bool:
    """Whether ``a <rel> b`` is true in the room frame (x right, y away from viewer)."""
    if a.id == b.id:
        return False
    dx, dy = (b.bbox_centroid[:2] - a.bbox_centroid[:2])
    hdist = float(np.hypot(dx, dy))
    if rel in ("left of", "right of"):
        sign = 1 if rel == "left of" else -1
        return bool(sign * dx > AXIS_MARGIN and abs(dy) < LATERAL_LIMIT and hdist < REACH)
    if rel in ("in front of", "behind"):
        sign = 1 if rel == "in front of" else -1
        return bool(sign * dy > AXIS_MARGIN and abs(dx) < LATERAL_LIMIT and hdist < REACH)
    if rel == "next to":
        gap = max(abs(dx) - (a.bbox_extent[0] + b.bbox_extent[0]) / 2, abs(dy) - (a.bbox_extent[1] + b.bbox_extent[1]) / 2)
        vertical = min(_top(a), _top(b)) > max(_bottom(a), _bottom(b))
        return bool(gap < NEXT_TO_GAP and vertical)
    if rel == "near":
        others = [n for n in graph.nodes if n.id != a.id]
        d = np.array([np.linalg.norm(n.bbox_centroid - a.bbox_centroid) for n in others])
        best = d.min()
        return bool(np.isclose(np.linalg.norm(b.bbox_centroid - a.bbox_centroid), best)
                    and np.count_nonzero(np.isclose(d, best)) == 1)
    if rel == "standing on":
        return _stacked_on(a, b)
    if rel == "supporting":
        return _stacked_on(b, a)
    raise ValueError(f"unknown relation {rel!r}")


def resolve_referral(graph: SceneGraph, subject: ObjectNode, rel: str, color: str | None, shape: str,
                     attrs: dict[int, tuple[str, str]]) -> int | None:
    """The unique node matching the description and relation, else None."""
    cands = [n.id for n in graph.nodes
             if n.id != subject.id and attrs[n.id][1] == shape and (color is None or attrs[n.id][0] == color)
             and relation_holds(graph, subject, n, rel)]
    return cands[0] if len(cands) == 1 else None


# ---------------------------------------------------------------- scenes
def generate_scene(config: SyntheticSceneConfig = SyntheticSceneConfig(), seed: int = 0) -> SceneGraph:
    config.validate()
    rng = np.random.default_rng(seed)
    room = np.array([rng.uniform(*config.room_x), rng.uniform(*config.room_y)])
    n = int(rng.integers(config.object_count[0], config.object_count[1] + 1))
    placed = _place(config, rng, n, room)

    nodes = []
    attrs: dict[int, tuple[str, str]] = {}
    for i, p in enumerate(placed):
        local = SHAPES[p.shape].build(p.size)
        verts = local.vertices @ _yaw_matrix(p.yaw).T + p.base
        mesh = Mesh(verts, local.faces)
        pts = sample_mesh_surface(mesh, _point_count(mesh, config), seed=int(rng.integers(2 ** 63)))
        pts = pts + rng.normal(0.0, config.point_noise, pts.shape) if config.point_noise > 0 else pts
        nodes.append(ObjectNode.from_points(i, pts, mesh=mesh, label=p.shape,
                                            caption=caption_for(p.color, p.shape, p.material)))
        attrs[i] = (p.color, p.shape)
    graph = SceneGraph(tuple(nodes))
    if len(nodes) < 2:
        return graph

    final_nodes = []
    edges: list[tuple[int, int, str]] = []
    for a in nodes:
        options = [(b.id, rel) for b in nodes for rel in config.relations if relation_holds(graph, a, b, rel)]
        lo, hi = config.referral_count
        k = min(int(rng.integers(lo, hi + 1)), len(options))
        chosen = [options[i] for i in sorted(rng.choice(len(options), size=k, replace=False))] if k else []
        texts = []
        for b_id, rel in chosen:
            color, shape = attrs[b_id]
            anchor_color = color if rng.random() < 0.5 else None
            texts.append(f"{describe(attrs[a.id][0], attrs[a.id][1])} {PHRASES[rel]} {describe(anchor_color, shape)}")
            target = resolve_referral(graph, a, rel, anchor_color, shape, attrs)
            if target is not None:
                edges.append((a.id, target, rel))
        final_nodes.append(ObjectNode(a.id, a.bbox_centroid, a.bbox_extent, a.points, a.mesh, a.caption,
                                      tuple(texts), a.label))
    return SceneGraph(tuple(final_nodes), tuple(sorted(set(edges))))


def box_iou(c1, e1, c2, e2) -> float:
    lo = np.maximum(np.asarray(c1) - np.asarray(e1) / 2, np.asarray(c2) - np.asarray(e2) / 2)
    hi = np.minimum(np.asarray(c1) + np.asarray(e1) / 2, np.asarray(c2) + np.asarray(e2) / 2)
    inter = float(np.prod(np.clip(hi - lo, 0.0, None)))
    union = float(np.prod(e1) + np.prod(e2) - inter)
    return inter / union if union > 0 else 0.0

