"""Training loop, evaluation harness and runtime benchmark."""

from __future__ import annotations

import csv
import gc
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from . import numerics as nx
from .alignment import (
    MATCH_THRESHOLD,
    EvalReport,
    alignment_score,
    ranks,
    similarity_matrix,
)
from .datagen import Manifest, NoiseConfig, ScenePair, pair_identity, simulate_predicted
from .encoders import MESH_SAMPLES, TextEmbeddingProvider, canonicalize_points
from .encoders.sampling import sample_mesh_surface
from .fusion import AlignerModel, ModelConfig, SceneInputs, embed_inputs, forward, mesh_seed, prepare_scene
from .losses import Batch, LossTerm, average_terms, total_loss, write_loss_report
from .scenegraph import MODALITIES, ModalityKind, SceneGraph, aabb

log = logging.getLogger(__name__)

RESOLUTIONS = (64, 128, 256, 512)
TERM_NAMES = ["icl_joint"] + [f"{t}_{k.name}" for k in MODALITIES for t in ("icl", "ial")]
BIN_EDGES = np.round(np.arange(0.1, 0.91, 0.1), 10)


class TrainingDivergence(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 4
    base_lr: float = 1e-3
    min_lr: float = 0.0
    weight_decay: float = 0.01
    seed: int = 0
    modality_dropout: float = 0.15
    point_resolution: int = 512
    embed_dim: int = 512
    hidden: int = 128
    temperature: float = 0.1
    mesh_train_points: int = 512  # mesh samples per node per step (eval uses the full 2048)
    augment: bool = True  # random rotation of each scene every step
    keep_checkpoints: int = 5
    share_point_encoder: bool = False

    def validate(self) -> "TrainConfig":
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.modality_dropout < 1.0:
            raise ValueError("modality_dropout must lie in [0, 1)")
        if self.point_resolution not in RESOLUTIONS:
            raise ValueError(f"point_resolution must be one of {RESOLUTIONS}")
        if self.base_lr < 0 or self.min_lr < 0:
            raise ValueError("learning rates must be nonnegative")
        if not 1 <= self.mesh_train_points <= MESH_SAMPLES:
            raise ValueError(f"mesh_train_points must lie in [1, {MESH_SAMPLES}]")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        return cls(**d).validate()

    def model_config(self) -> ModelConfig:
        return ModelConfig(point_dim=self.hidden, gat_hidden=self.hidden, text_feat=self.hidden,
                           head_hidden=self.hidden, embed_dim=self.embed_dim,
                           share_point_encoder=self.share_point_encoder)


# ------------------------------------------------------------- scene cache
@dataclass
class SceneCache:
    """Rotation-ready encoder inputs for one scene; rebuilt into SceneInputs per step."""

    ids: list[int]
    has: np.ndarray  # (N, K) payload availability
    raw: list[np.ndarray]  # per-node geometry used for boxes
    points: np.ndarray  # (N, K_p, 3) canonical
    mesh: np.ndarray  # (N, K_m, 3) canonical
    caption: np.ndarray
    referral: np.ndarray
    attention: np.ndarray

    @classmethod
    def build(cls, graph: SceneGraph, provider: TextEmbeddingProvider, resolution: int, mesh_points: int,
              seed: int) -> "SceneCache":
        base = prepare_scene(graph, provider, resolution, 1, seed)
        n = len(graph)
        mesh = np.zeros((n, mesh_points, 3), dtype=np.float32)
        for i, node in enumerate(graph.nodes):
            if node.has(ModalityKind.M):
                mesh[i] = canonicalize_points(sample_mesh_surface(node.mesh, mesh_points, mesh_seed(seed, node.id)))
        has = base.mask.copy()
        raw = [node.points if len(node.points) else node.mesh.vertices for node in graph.nodes]
        return cls(graph.ids, has, [np.asarray(r, dtype=np.float32) for r in raw], base.points.astype(np.float32),
                   mesh, base.caption, base.referral, base.attention)

    def inputs(self, rotation: np.ndarray | None, mask: np.ndarray, mesh_take: np.ndarray | None) -> SceneInputs:
        pts, mesh = self.points, self.mesh
        if mesh_take is not None:
            mesh = mesh[:, mesh_take]
        if rotation is None:
            cents = np.stack([aabb(r)[0] for r in self.raw])
            exts = np.stack([aabb(r)[1] for r in self.raw])
        else:
            rt = rotation.T.astype(np.float32)
            pts = pts @ rt
            mesh = mesh @ rt
            boxes = [aabb(r @ rt) for r in self.raw]
            cents = np.stack([b[0] for b in boxes])
            exts = np.stack([b[1] for b in boxes])
        structure = np.concatenate([cents - cents.mean(axis=0), exts], axis=1)
        return SceneInputs(list(self.ids), mask, pts, mesh, structure, self.attention, self.caption, self.referral)


def modality_dropout(has: np.ndarray, p: float, rng: np.random.Generator) -> np.ndarray:
    """Drop each modality for the whole scene with probability ``p``; never empty a node."""
    mask = has.copy()
    if p <= 0:
        return mask
    drop = rng.random(len(MODALITIES)) < p
    mask[:, drop] = False
    for i in np.flatnonzero(~mask.any(axis=1)):
        avail = np.flatnonzero(has[i])
        mask[i, avail[rng.integers(len(avail))]] = True
    return mask


@dataclass
class TrainResult:
    model: AlignerModel
    history: list[dict]
    epoch_means: list[float]
    checkpoint: Path | None
    epoch_terms: list[list[LossTerm]] = field(default_factory=list)


def _pair_rows(pair: ScenePair, c1: SceneCache, c2: SceneCache, off1: int, off2: int) -> tuple[list, list]:
    i1 = {n: i for i, n in enumerate(c1.ids)}
    i2 = {n: i for i, n in enumerate(c2.ids)}
    ra, rb = [], []
    for a, b in pair.gt_matches:
        if a in i1 and b in i2:
            ra.append(off1 + i1[a])
            rb.append(off2 + i2[b])
    return ra, rb


def load_pairs(manifest: Manifest | str | Path, split: str | None) -> list[ScenePair]:
    m = manifest if isinstance(manifest, Manifest) else Manifest.load(manifest)
    return [m.load_pair(e) for e in m.split(split)]


def train(
    pairs: Sequence[ScenePair] | Manifest | str | Path,
    config: TrainConfig = TrainConfig(),
    out_dir: str | Path | None = None,
    provider: TextEmbeddingProvider | None = None,
    progress: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Fit a model on the ground-truth correspondences of ``pairs``.

    A manifest (or its path) selects its ``train`` split.
    """
    config.validate()
    if not isinstance(pairs, (list, tuple)):
        pairs = load_pairs(pairs, "train")
    pairs = [p for p in pairs if len(p.gt_matches) > 0]
    if not pairs:
        raise ValueError("train: no training pairs with correspondences")
    provider = provider or TextEmbeddingProvider()
    rng = np.random.default_rng(config.seed)
    model = AlignerModel(config.model_config(), seed=config.seed)
    params = model.parameters()
    state = nx.OptimizerState(config.base_lr, config.weight_decay, total_epochs=config.epochs, min_lr=config.min_lr)
    pool = min(MESH_SAMPLES, 2 * config.mesh_train_points) if config.augment else config.mesh_train_points
    caches = []
    for k, p in enumerate(pairs):
        caches.append((SceneCache.build(p.g1, provider, config.point_resolution, pool, 2 * k),
                       SceneCache.build(p.g2, provider, config.point_resolution, pool, 2 * k + 1)))
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)

    history: list[dict] = []
    epoch_means: list[float] = []
    epoch_terms: list[list[LossTerm]] = []
    saved: list[Path] = []
    step = 0
    for epoch in range(config.epochs):
        lr = nx.cosine_lr(epoch, config.epochs, config.base_lr, config.min_lr)
        order = rng.permutation(len(pairs))
        losses, terms_acc = [], []
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            idx = order[start:start + config.batch_size]
            scenes, rows_a, rows_b, off = [], [], [], 0
            for j in idx:
                sides = []
                for cache in caches[j]:
                    rot = Rotation.random(random_state=rng).as_matrix() if config.augment else None
                    mask = modality_dropout(cache.has, config.modality_dropout, rng)
                    take = (rng.choice(pool, config.mesh_train_points, replace=False) if config.augment
                            else None)
                    sides.append(cache.inputs(rot, mask, take))
                ra, rb = _pair_rows(pairs[j], caches[j][0], caches[j][1], off, off + len(sides[0]))
                rows_a += ra
                rows_b += rb
                off += len(sides[0]) + len(sides[1])
                scenes += sides
            if len(rows_a) < 2:
                continue
            for p in params.values():
                p.zero_grad()
            fw = forward(model, SceneInputs.concat(scenes))
            batch = Batch.gather(fw, fw, rows_a, rows_b)
            loss, terms = total_loss(batch, model.uncertainty, config.temperature)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDivergence(f"non-finite loss at epoch {epoch}, batch {b} (pairs {idx.tolist()})")
            loss.backward()
            nx.adamw_step(params, state, lr)
            row = {"epoch": epoch, "step": step, "lr": lr, "total": value}
            row.update({t.name: t.weighted for t in terms})
            history.append(row)
            losses.append(value)
            terms_acc.append(terms)
            step += 1
        mean = float(np.mean(losses)) if losses else float("nan")
        epoch_means.append(mean)
        epoch_terms.append(average_terms(terms_acc))
        log.info("epoch %d lr %.2e mean loss %.4f", epoch, lr, mean)
        if progress is not None:
            progress(epoch, mean)
        if out is not None:
            path = out / "checkpoints" / f"epoch_{epoch:03d}.sgpp"
            model.save(path)
            saved.append(path)
            while len(saved) > config.keep_checkpoints:
                saved.pop(0).unlink(missing_ok=True)

    final = None
    if out is not None:
        final = out / "model.sgpp"
        model.save(final)
        write_history(out / "history.csv", history)
        write_loss_report(out / "loss_report.csv", [(e, t) for e, ts in enumerate(epoch_terms) for t in ts])
    return TrainResult(model, history, epoch_means, final, epoch_terms)


def write_history(path: str | Path, history: list[dict]) -> None:
    cols = ["epoch", "step", "lr", "total"] + TERM_NAMES
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in history:
            w.writerow([row["epoch"], row["step"], f"{row['lr']:.8f}"]
                       + [f"{row[c]:.6f}" if c in row else "" for c in cols[3:]])


# ---------------------------------------------------------------- evaluate
@dataclass
class EvalOptions:
    transform_mode: str = "random"  # "random" (stored T) or "identity" (T = I4)
    point_resolution: int = 512
    modality_mask_src: tuple[ModalityKind, ...] = MODALITIES
    modality_mask_ref: tuple[ModalityKind, ...] = MODALITIES
    predicted: bool = False
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    seed: int = 0

    def validate(self) -> "EvalOptions":
        if self.transform_mode not in ("random", "identity"):
            raise ValueError(f"transform_mode must be 'random' or 'identity', got {self.transform_mode!r}")
        if self.point_resolution not in RESOLUTIONS:
            raise ValueError(f"point_resolution must be one of {RESOLUTIONS}")
        if not self.modality_mask_src or not self.modality_mask_ref:
            raise ValueError("modality masks must be nonempty")
        return self


def _as_model(model: AlignerModel | str | Path) -> AlignerModel:
    return model if isinstance(model, AlignerModel) else AlignerModel.load(model)


def _prepared(pair: ScenePair, opts: EvalOptions, k: int) -> ScenePair:
    if opts.transform_mode == "identity":
        pair = pair_identity(pair)
    if opts.predicted:
        pair = simulate_predicted(pair, opts.noise, seed=opts.seed * 100_003 + k)
    return pair


def embed_pair(model: AlignerModel, pair: ScenePair, opts: EvalOptions, provider: TextEmbeddingProvider, k: int):
    s1 = opts.seed * 1_000_003 + 2 * k
    i1 = prepare_scene(pair.g1, provider, opts.point_resolution, MESH_SAMPLES, s1, opts.modality_mask_src)
    i2 = prepare_scene(pair.g2, provider, opts.point_resolution, MESH_SAMPLES, s1 + 1, opts.modality_mask_ref)
    return embed_inputs(model, i1), embed_inputs(model, i2)


def _ordered_map(fn, items, workers: int) -> list:
    if workers <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


def evaluate(
    model: AlignerModel | str | Path,
    pairs: Sequence[ScenePair],
    options: EvalOptions = EvalOptions(),
    provider: TextEmbeddingProvider | None = None,
    workers: int = 1,
) -> EvalReport:
    """Micro-averaged Mean RR and Hits@K over all ground-truth correspondences.

    ``workers`` > 1 embeds pairs concurrently; results are merged in pair order.
    """
    options.validate()
    model = _as_model(model)
    provider = provider or TextEmbeddingProvider(dim=model.config.text_dim)
    if not pairs:
        raise ValueError("evaluate: empty split")

    def one(item):
        k, pair = item
        pair = _prepared(pair, options, k)
        if not pair.gt_matches:
            return None
        e1, e2 = embed_pair(model, pair, options, provider, k)
        return ranks(similarity_matrix(e1, e2), pair.gt_matches), pair.overlap_ratio

    all_ranks, overlaps = [], []
    for res in _ordered_map(one, list(enumerate(pairs)), workers):
        if res is None:
            continue
        r, ov = res
        all_ranks.append(r)
        overlaps.append(np.full(len(r), ov))
    r = np.concatenate(all_ranks) if all_ranks else np.zeros(0, dtype=int)
    ov = np.concatenate(overlaps) if overlaps else np.zeros(0)
    tags = ["T=I4" if options.transform_mode == "identity" else "T!=I4"]
    if options.predicted:
        tags.append("predicted")
    report = EvalReport.from_ranks(r, tags=tags)
    for lo, hi in zip(BIN_EDGES[:-1], BIN_EDGES[1:]):
        last = hi >= BIN_EDGES[-1]
        sel = (ov >= lo) & ((ov <= hi) if last else (ov < hi))
        entry = {"overlap": [float(lo), float(hi)], "count": int(sel.sum())}
        if sel.any():
            entry["mean_rr"] = float(np.mean(1.0 / r[sel]))
            entry["hits@1"] = float(np.mean(r[sel] <= 1))
        report.bins.append(entry)
    return report


def pair_scores(
    model: AlignerModel | str | Path,
    pairs: Sequence[ScenePair],
    options: EvalOptions = EvalOptions(),
    threshold: float = MATCH_THRESHOLD,
    provider: TextEmbeddingProvider | None = None,
    workers: int = 1,
) -> np.ndarray:
    """Alignment score of every pair."""
    options.validate()
    model = _as_model(model)
    provider = provider or TextEmbeddingProvider(dim=model.config.text_dim)

    def one(item):
        k, pair = item
        pair = _prepared(pair, options, k)
        e1, e2 = embed_pair(model, pair, options, provider, k)
        return alignment_score(similarity_matrix(e1, e2), threshold)

    return np.asarray(_ordered_map(one, list(enumerate(pairs)), workers))


def chance_level(pairs: Sequence[ScenePair]) -> float:
    """Expected Hits@1 of a random ranking: mean of 1/N2 over correspondences."""
    vals = [1.0 / len(p.g2) for p in pairs for _ in p.gt_matches]
    return float(np.mean(vals)) if vals else 0.0


# ------------------------------------------------------------------- bench
CUMULATIVE = tuple(tuple(MODALITIES[:i]) for i in range(1, len(MODALITIES) + 1))


@dataclass
class BenchRow:
    modalities: tuple[ModalityKind, ...]
    mean_ms: float
    std_ms: float
    buffer_bytes: int

    @property
    def label(self) -> str:
        return "".join(k.name for k in self.modalities)


def bench(
    model: AlignerModel | str | Path,
    pairs: Sequence[ScenePair],
    subsets: Iterable[Sequence[ModalityKind]] = CUMULATIVE,
    runs: int = 5,
    point_resolution: int = 512,
) -> list[BenchRow]:
    """Per-pair inference time and embedding-buffer size for each modality subset.

    Subsets are interleaved per scene, in an order that rotates from scene to
    scene, so slow drift (thermal, allocator) is spread evenly instead of
    landing on whichever subset ran during it. The garbage collector is
    paused while timing, and the text provider's memo is disabled so text
    encoding is timed too.
    """
    model = _as_model(model)
    subsets = [tuple(ModalityKind(k) for k in s) for s in subsets]
    if not pairs:
        raise ValueError("bench: no pairs")
    provider = TextEmbeddingProvider(dim=model.config.text_dim, cache=False)
    times = np.zeros((runs, len(subsets)))
    peak = [0] * len(subsets)
    scenes = [(g, 2 * k + j) for k, pair in enumerate(pairs) for j, g in enumerate((pair.g1, pair.g2))]
    gc_was_enabled = gc.isenabled()
    gc.disable()
    try:
        for run in range(runs):
            for n, (g, seed) in enumerate(scenes):
                shift = (n + run) % len(subsets)
                for si in list(range(len(subsets)))[shift:] + list(range(shift)):
                    t0 = time.perf_counter()
                    inputs = prepare_scene(g, provider, point_resolution, MESH_SAMPLES, seed, subsets[si], cache=False)
                    emb = embed_inputs(model, inputs)
                    times[run, si] += time.perf_counter() - t0
                    used = int(emb.mask.sum()) * emb.unimodal.shape[-1] * 4 + emb.joint.size * 4
                    peak[si] = max(peak[si], used)
            gc.collect()
    finally:
        if gc_was_enabled:
            gc.enable()
    times *= 1000.0 / len(pairs)
    return [BenchRow(s, float(times[:, i].mean()), float(times[:, i].std(ddof=1) if runs > 1 else 0.0), peak[i])
            for i, s in enumerate(subsets)]


def write_bench(path: str | Path, rows: list[BenchRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["modalities", "mean_ms", "std_ms", "runtime", "buffer_bytes"])
        for r in rows:
            w.writerow([r.label, f"{r.mean_ms:.3f}", f"{r.std_ms:.3f}", f"{r.mean_ms:.2f} ± {r.std_ms:.2f}",
                        r.buffer_bytes])
