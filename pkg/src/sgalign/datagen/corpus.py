"""On-disk corpora: scene-graph files plus a JSON-lines pair manifest."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..scenegraph import SceneGraph, load_scene_graph, save_scene_graph
from .pairs import ScenePair, make_negative_pair, make_pair
from .scenes import SyntheticSceneConfig, generate_scene

MANIFEST = "manifest.jsonl"


def split_of(scene_id: int, seed: int, val_fraction: float = 0.1) -> str:
    h = hashlib.sha256(f"{seed}:{scene_id}".encode()).digest()
    return "val" if int.from_bytes(h[:8], "little") / 2 ** 64 < val_fraction else "train"


@dataclass(frozen=True)
class ManifestEntry:
    g1: str
    g2: str
    matches: tuple[tuple[int, int], ...]
    overlap: float
    transform: tuple[float, ...]
    split: str
    scene: int = -1
    kind: str = "pair"  # "pair" or "negative"

    def to_json(self) -> str:
        doc = {
            "g1": self.g1,
            "g2": self.g2,
            "matches": [list(m) for m in self.matches],
            "overlap": round(self.overlap, 6),
            "transform": [round(float(x), 9) for x in self.transform],
            "split": self.split,
            "scene": self.scene,
            "kind": self.kind,
        }
        return json.dumps(doc, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "ManifestEntry":
        d = json.loads(line)
        return cls(d["g1"], d["g2"], tuple(tuple(m) for m in d["matches"]), float(d["overlap"]),
                   tuple(d["transform"]), d["split"], int(d.get("scene", -1)), d.get("kind", "pair"))

    @property
    def transform_matrix(self) -> np.ndarray:
        return np.asarray(self.transform, dtype=np.float64).reshape(4, 4)


@dataclass(frozen=True)
class Manifest:
    root: Path
    entries: tuple[ManifestEntry, ...]

    @classmethod
    def load(cls, path: str | Path) -> "Manifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST
        lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
        return cls(path.parent, tuple(ManifestEntry.from_json(ln) for ln in lines))

    def split(self, name: str | None) -> list[ManifestEntry]:
        return [e for e in self.entries if name in (None, "all") or e.split == name]

    def load_pair(self, entry: ManifestEntry) -> ScenePair:
        g1 = load_scene_graph(self.root / entry.g1)
        g2 = load_scene_graph(self.root / entry.g2)
        return ScenePair(g1, g2, entry.matches, entry.overlap, entry.transform_matrix)


def _write_pair(out: Path, name: str, pair: ScenePair, split: str, scene: int, kind: str) -> ManifestEntry:
    p1, p2 = f"scenes/{name}_a.json", f"scenes/{name}_b.json"
    save_scene_graph(pair.g1, out / p1)
    save_scene_graph(pair.g2, out / p2)
    return ManifestEntry(p1, p2, tuple(pair.gt_matches), pair.overlap_ratio,
                         tuple(pair.transform.reshape(-1).tolist()), split, scene, kind)


def generate_corpus(
    config: SyntheticSceneConfig,
    n_scenes: int,
    pairs_per_scene: int,
    overlap_range: tuple[float, float] = (0.1, 0.9),
    seed: int = 0,
    out_dir: str | Path = "corpus",
    negatives_per_scene: int = 0,
    transform: str = "random",
) -> Manifest:
    """Write scenes and pairs under ``out_dir``; returns the loaded manifest."""
    lo, hi = overlap_range
    if not 0.1 - 1e-9 <= lo <= hi <= 0.9 + 1e-9:
        raise ValueError(f"overlap range {overlap_range} must lie within [0.1, 0.9]")
    if n_scenes < 1 or pairs_per_scene < 0:
        raise ValueError("need n_scenes >= 1 and pairs_per_scene >= 0")
    out = Path(out_dir)
    (out / "scenes").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    scene_seeds = rng.integers(0, 2 ** 31, size=n_scenes)
    scenes = [generate_scene(config, int(s)) for s in scene_seeds]
    entries = []
    for sid, scene in enumerate(scenes):
        split = split_of(sid, seed)
        save_scene_graph(scene, out / "scenes" / f"{sid:05d}_full.json")
        for k in range(pairs_per_scene):
            t = float(rng.uniform(lo, hi))
            pair = make_pair(scene, t, seed=int(rng.integers(2 ** 31)), transform=transform)
            entries.append(_write_pair(out, f"{sid:05d}_{k:02d}", pair, split, sid, "pair"))
        for k in range(negatives_per_scene if n_scenes > 1 else 0):
            # partner from the same split keeps val scenes out of training
            same = [j for j in range(n_scenes) if j != sid and split_of(j, seed) == split] or \
                   [j for j in range(n_scenes) if j != sid]
            other = same[int(rng.integers(len(same)))]
            pair = make_negative_pair(scene, scenes[other], seed=int(rng.integers(2 ** 31)), transform=transform)
            entries.append(_write_pair(out, f"{sid:05d}_n{k:02d}", pair, split, sid, "negative"))
    text = "".join(e.to_json() + "\n" for e in entries)
    (out / MANIFEST).write_text(text)
    return Manifest(out, tuple(entries))


def load_scenes(paths: list[Path]) -> list[SceneGraph]:
    return [load_scene_graph(p) for p in paths]
