"""Primitive and composite furniture meshes in a local frame (base on z=0)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..scenegraph import Mesh


def box(size, center=(0.0, 0.0, 0.0)) -> Mesh:
    sx, sy, sz = (float(s) / 2 for s in size)
    v = np.array([[x, y, z] for x in (-sx, sx) for y in (-sy, sy) for z in (-sz, sz)]) + np.asarray(center, float)
    # vertex index = 4*ix + 2*iy + iz
    f = [
        (0, 1, 3), (0, 3, 2), (4, 6, 7), (4, 7, 5),  # x-, x+
        (0, 4, 5), (0, 5, 1), (2, 3, 7), (2, 7, 6),  # y-, y+
        (0, 2, 6), (0, 6, 4), (1, 5, 7), (1, 7, 3),  # z-, z+
    ]
    return Mesh(v, np.array(f))


def cylinder(radius: float, height: float, center=(0.0, 0.0, 0.0), segments: int = 16) -> Mesh:
    a = np.linspace(0, 2 * np.pi, segments, endpoint=False)
    ring = np.stack([radius * np.cos(a), radius * np.sin(a)], axis=1)
    lo = np.column_stack([ring, np.full(segments, -height / 2)])
    hi = np.column_stack([ring, np.full(segments, height / 2)])
    v = np.concatenate([lo, hi, [[0, 0, -height / 2], [0, 0, height / 2]]]) + np.asarray(center, float)
    c_lo, c_hi = 2 * segments, 2 * segments + 1
    faces = []
    for i in range(segments):
        j = (i + 1) % segments
        faces += [(i, j, segments + j), (i, segments + j, segments + i), (c_lo, j, i), (c_hi, segments + i, segments + j)]
    return Mesh(v, np.array(faces))


def sphere(radius: float, center=(0.0, 0.0, 0.0), rings: int = 8, segments: int = 12) -> Mesh:
    verts = [[0, 0, radius]]
    for r in range(1, rings):
        th = np.pi * r / rings
        for s in range(segments):
            ph = 2 * np.pi * s / segments
            verts.append([radius * np.sin(th) * np.cos(ph), radius * np.sin(th) * np.sin(ph), radius * np.cos(th)])
    verts.append([0, 0, -radius])
    bottom = len(verts) - 1
    faces = []
    for s in range(segments):
        faces.append((0, 1 + s, 1 + (s + 1) % segments))
    for r in range(rings - 2):
        a0 = 1 + r * segments
        b0 = a0 + segments
        for s in range(segments):
            t = (s + 1) % segments
            faces += [(a0 + s, b0 + s, b0 + t), (a0 + s, b0 + t, a0 + t)]
    last = 1 + (rings - 2) * segments
    for s in range(segments):
        faces.append((last + s, bottom, last + (s + 1) % segments))
    return Mesh(np.asarray(verts) + np.asarray(center, float), np.array(faces))


def merge(parts: list[Mesh]) -> Mesh:
    verts, faces, off = [], [], 0
    for m in parts:
        verts.append(m.vertices)
        faces.append(m.faces + off)
        off += len(m.vertices)
    return Mesh(np.concatenate(verts), np.concatenate(faces))


# ------------------------------------------------------------------ library
def _cube(s):
    return box(s, (0, 0, s[2] / 2))


def _cyl(s):
    return cylinder(min(s[0], s[1]) / 2, s[2], (0, 0, s[2] / 2))


def _ball(s):
    r = min(s) / 2
    return sphere(r, (0, 0, r))


def _table(s):
    sx, sy, sz = s
    top = 0.06
    leg = 0.06
    parts = [box((sx, sy, top), (0, 0, sz - top / 2))]
    for x in (-1, 1):
        for y in (-1, 1):
            parts.append(box((leg, leg, sz - top), (x * (sx / 2 - leg), y * (sy / 2 - leg), (sz - top) / 2)))
    return merge(parts)


def _chair(s):
    sx, sy, sz = s
    seat_h = 0.45 * sz
    leg = 0.05
    parts = [box((sx, sy, 0.05), (0, 0, seat_h)), box((sx, 0.05, sz - seat_h), (0, sy / 2 - 0.025, (sz + seat_h) / 2))]
    for x in (-1, 1):
        for y in (-1, 1):
            parts.append(box((leg, leg, seat_h), (x * (sx / 2 - leg), y * (sy / 2 - leg), seat_h / 2)))
    return merge(parts)


def _lamp(s):
    sx, _, sz = s
    return merge([
        cylinder(sx / 2, 0.04, (0, 0, 0.02)),
        cylinder(0.02, sz * 0.75, (0, 0, sz * 0.375)),
        sphere(sx * 0.4, (0, 0, sz - sx * 0.4)),
    ])


def _shelf(s):
    sx, sy, sz = s
    t = 0.04
    parts = [box((t, sy, sz), (x * (sx - t) / 2, 0, sz / 2)) for x in (-1, 1)]
    for h in np.linspace(t / 2, sz - t / 2, 4):
        parts.append(box((sx - 2 * t, sy, t), (0, 0, h)))
    return merge(parts)


def _sofa(s):
    sx, sy, sz = s
    return merge([
        box((sx, sy, sz * 0.45), (0, 0, sz * 0.225)),
        box((sx, sy * 0.25, sz * 0.55), (0, sy * 0.375, sz * 0.725)),
        box((sx * 0.12, sy * 0.75, sz * 0.25), (-sx * 0.44, -sy * 0.125, sz * 0.575)),
        box((sx * 0.12, sy * 0.75, sz * 0.25), (sx * 0.44, -sy * 0.125, sz * 0.575)),
    ])


def _bed(s):
    sx, sy, sz = s
    return merge([
        box((sx, sy, sz * 0.45), (0, 0, sz * 0.225)),
        box((sx, 0.06, sz), (0, sy / 2 - 0.03, sz / 2)),
    ])


@dataclass(frozen=True)
class ShapeSpec:
    name: str
    build: Callable[[np.ndarray], Mesh]
    size_lo: tuple[float, float, float]
    size_hi: tuple[float, float, float]
    stackable: bool = False  # small enough to stand on something
    support: bool = False  # flat top that can carry a stackable object

    def sample_size(self, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(self.size_lo, self.size_hi)


SHAPES: dict[str, ShapeSpec] = {s.name: s for s in [
    ShapeSpec("cube", lambda s: _cube((s[0], s[0], s[0])), (0.3, 0.3, 0.3), (0.6, 0.6, 0.6), stackable=True, support=True),
    ShapeSpec("cabinet", _cube, (0.5, 0.4, 0.9), (1.0, 0.6, 1.8), support=True),
    ShapeSpec("bench", _cube, (1.2, 0.35, 0.4), (2.0, 0.5, 0.5), support=True),
    ShapeSpec("mat", _cube, (0.8, 0.6, 0.02), (1.6, 1.2, 0.05)),
    ShapeSpec("barrel", _cyl, (0.4, 0.4, 0.6), (0.7, 0.7, 1.0), support=True),
    ShapeSpec("pillar", _cyl, (0.2, 0.2, 1.8), (0.4, 0.4, 2.6)),
    ShapeSpec("ottoman", _cyl, (0.5, 0.5, 0.3), (0.9, 0.9, 0.45), stackable=False, support=True),
    ShapeSpec("ball", _ball, (0.2, 0.2, 0.2), (0.5, 0.5, 0.5), stackable=True),
    ShapeSpec("table", _table, (0.9, 0.6, 0.7), (1.8, 1.0, 0.8), support=True),
    ShapeSpec("chair", _chair, (0.4, 0.4, 0.8), (0.55, 0.55, 1.0)),
    ShapeSpec("lamp", _lamp, (0.25, 0.25, 0.4), (0.4, 0.4, 1.6), stackable=True),
    ShapeSpec("shelf", _shelf, (0.8, 0.3, 1.2), (1.6, 0.45, 2.0)),
    ShapeSpec("sofa", _sofa, (1.6, 0.8, 0.8), (2.4, 1.0, 0.95)),
    ShapeSpec("bed", _bed, (1.4, 1.9, 0.5), (1.9, 2.2, 0.7)),
]}
