import json
import re
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sgalign import ObjectNode, SceneGraph
from sgalign.scenegraph import dumps_scene_graph
from sgalign.datagen import (
    Manifest,
    ScenePair,
    NoiseConfig,
    SyntheticSceneConfig,
    box_iou,
    generate_corpus,
    generate_scene,
    make_negative_pair,
    make_pair,
    pair_identity,
    propagate_annotations,
    relation_holds,
    simulate_predicted,
    split_of,
    split_sizes,
)

from .oracles import iou_oracle, propagate_oracle

SMALL = SyntheticSceneConfig(object_count=(6, 10), room_x=(6, 8), room_y=(6, 8))
TWENTY = SyntheticSceneConfig(object_count=(20, 20), room_x=(9, 10), room_y=(9, 10))


def _apply(t, pts):
    return pts @ t[:3, :3].T + t[:3, 3]


# ----------------------------------------------------------------- scenes
def test_single_object_scene():
    g = generate_scene(SyntheticSceneConfig(object_count=(1, 1)), 0)
    assert len(g) == 1 and g.edges == ()
    g.validate()


def test_same_seed_same_scene():
    assert dumps_scene_graph(generate_scene(SMALL, 7)) == dumps_scene_graph(generate_scene(SMALL, 7))
    assert dumps_scene_graph(generate_scene(SMALL, 7)) != dumps_scene_graph(generate_scene(SMALL, 8))


def test_invalid_config_rejected():
    with pytest.raises(ValueError, match="min"):
        generate_scene(SyntheticSceneConfig(object_count=(5, 2)))
    with pytest.raises(ValueError, match="unknown shape"):
        generate_scene(SyntheticSceneConfig(shapes=("teapot",)))


def test_infeasible_placement_errors():
    cramped = SyntheticSceneConfig(object_count=(60, 60), room_x=(1, 1), room_y=(1, 1), retries=20)
    with pytest.raises(RuntimeError, match="infeasible"):
        generate_scene(cramped, 0)


@pytest.mark.parametrize("seed", range(15))
def test_generated_scene_contents(seed):
    g = generate_scene(SMALL, seed)
    g.validate()
    for n in g.nodes:
        assert re.fullmatch(r"The \w+ \w+ is \w+", n.caption)
        assert 1 <= len(n.referrals) <= 4
        assert len(n.points) >= 256 and n.mesh is not None
    # directed edges are subject -> anchor and unique per (src, dst, predicate)
    assert len(set(g.edges)) == len(g.edges)


@pytest.mark.parametrize("seed", range(25))
def test_every_edge_predicate_holds(seed):
    g = generate_scene(SMALL, seed)
    for s, d, rel in g.edges:
        assert relation_holds(g, g.node(s), g.node(d), rel), (s, d, rel)


def test_directional_predicates_follow_centroid_order():
    pts = np.array([[0, 0, 0], [0.5, 0.5, 0.5]])
    a, b = ObjectNode.from_points(0, pts), ObjectNode.from_points(1, pts + [1.5, 0, 0])
    g = SceneGraph((a, b))
    assert relation_holds(g, a, b, "left of") and relation_holds(g, b, a, "right of")
    assert not relation_holds(g, a, b, "right of") and not relation_holds(g, a, b, "behind")
    assert relation_holds(g, a, b, "near")
    with pytest.raises(ValueError, match="unknown relation"):
        relation_holds(g, a, b, "inside")


# ------------------------------------------------------------------ pairs
def test_high_overlap_on_twenty_objects():
    scene = generate_scene(TWENTY, 1)
    for seed in range(10):
        pair = make_pair(scene, 0.9, seed)
        ratio = len(pair.gt_matches) / pair.union_size
        assert 0.85 <= ratio <= 0.95


@pytest.mark.parametrize("n,target", [(10, 0.5), (20, 0.25), (10, 0.9), (10, 0.1), (16, 0.75)])
def test_divisible_counts_are_exact(n, target):
    u, s = split_sizes(n, target)
    assert (u, s) == (n, round(target * n))  # whole scene fits and the ratio is exact
    scene = generate_scene(SyntheticSceneConfig(object_count=(n, n), room_x=(9, 10), room_y=(9, 10)), 2)
    assert make_pair(scene, target, seed=0).overlap_ratio == pytest.approx(target, abs=1e-12)


def test_overlap_bounds_and_small_scenes():
    scene = generate_scene(SMALL, 0)
    with pytest.raises(ValueError, match="outside"):
        make_pair(scene, 0.95)
    with pytest.raises(ValueError, match="unattainable"):
        split_sizes(1, 0.5)
    with pytest.raises(ValueError, match="transform mode"):
        make_pair(scene, 0.5, transform="mirror")


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 500), st.floats(0.1, 0.9), st.integers(0, 10_000))
def test_pair_invariants(scene_seed, target, seed):
    scene = generate_scene(SMALL, scene_seed)
    try:
        pair = make_pair(scene, target, seed)
    except ValueError as exc:  # small scenes cannot express every ratio
        assert "unattainable" in str(exc)
        with pytest.raises(ValueError):
            split_sizes(len(scene), target)
        return
    ids1, ids2 = set(pair.g1.ids), set(pair.g2.ids)
    src, dst = [a for a, _ in pair.gt_matches], [b for _, b in pair.gt_matches]
    assert len(set(src)) == len(src) == len(set(dst))
    assert set(src) <= ids1 and set(dst) <= ids2
    shared = len(pair.gt_matches)
    assert pair.overlap_ratio == shared / (len(ids1) + len(ids2) - shared)
    assert abs(pair.overlap_ratio - target) <= 0.05 + 1e-12
    pair.g1.validate()
    pair.g2.validate()
    # induced subgraphs: every source edge with both endpoints kept survives
    for s, d, p in scene.edges:
        if s in ids1 and d in ids1:
            assert (s, d, p) in pair.g1.edges


@pytest.mark.parametrize("seed", range(10))
def test_matched_geometry_agrees_up_to_transform(seed):
    pair = make_pair(generate_scene(SMALL, seed), 0.5, seed)
    rot = pair.transform[:3, :3]
    np.testing.assert_allclose(rot @ rot.T, np.eye(3), atol=1e-9)
    assert np.linalg.det(rot) == pytest.approx(1.0)
    assert np.all(np.abs(pair.transform[:3, 3]) <= 5)
    for a, b in pair.gt_matches:
        na, nb = pair.g1.node(a), pair.g2.node(b)
        assert np.max(np.abs(_apply(pair.transform, na.points) - nb.points)) < 1e-6
        assert na.caption == nb.caption


def test_identity_mode_and_pair_identity():
    scene = generate_scene(SMALL, 3)
    ident = make_pair(scene, 0.5, 4, transform="identity")
    np.testing.assert_array_equal(ident.transform, np.eye(4))
    back = pair_identity(make_pair(scene, 0.5, 4))
    np.testing.assert_array_equal(back.transform, np.eye(4))
    for a, b in back.gt_matches:
        np.testing.assert_allclose(back.g2.node(b).points, back.g1.node(a).points, atol=1e-6)


@pytest.mark.parametrize("target", [0.1, 0.3, 0.5, 0.7, 0.9])
def test_even_mode_balances_scan_sizes(target):
    scene = generate_scene(TWENTY, 4)
    for seed in range(5):
        pair = make_pair(scene, target, seed, exclusive="even")
        assert abs(len(pair.g1) - len(pair.g2)) <= 1
        assert abs(pair.overlap_ratio - target) <= 0.05 + 1e-12
    with pytest.raises(ValueError, match="exclusive mode"):
        make_pair(scene, 0.5, exclusive="half")


def test_negative_pairs_are_disjoint():
    pair = make_negative_pair(generate_scene(SMALL, 1), generate_scene(SMALL, 2), seed=0)
    assert pair.gt_matches == () and pair.overlap_ratio == 0.0
    assert len(pair.g1) >= 1 and len(pair.g2) >= 1


# ------------------------------------------------------------ propagation
def test_box_iou_examples():
    assert box_iou([0, 0, 0], [1, 1, 1], [0, 0, 0], [1, 1, 1]) == 1.0
    assert box_iou([0, 0, 0], [1, 1, 1], [5, 0, 0], [1, 1, 1]) == 0.0
    assert box_iou([0, 0, 0], [2, 1, 1], [0.5, 0, 0], [1, 1, 1]) == pytest.approx(0.5)


def test_propagation_identity():
    g = generate_scene(SMALL, 5)
    assert propagate_annotations(g, g) == {i: i for i in g.ids}


def test_disjoint_prediction_is_unassigned():
    g = generate_scene(SMALL, 5)
    far = ObjectNode.from_points(77, np.array([[100, 100, 0], [101, 101, 1.0]]), caption="x")
    assert propagate_annotations(g, SceneGraph((far,))) == {}


def test_tied_iou_prefers_lower_gt_id():
    pts = np.array([[0, 0, 0], [1, 1, 1.0]])
    gt = SceneGraph((ObjectNode.from_points(4, pts), ObjectNode.from_points(2, pts)))
    pred = SceneGraph((ObjectNode.from_points(9, pts),))
    assert propagate_annotations(gt, pred) == {9: 2}


def _jittered(rng, n):
    cs = rng.uniform(0, 4, (n, 3))
    es = rng.uniform(0.3, 1.5, (n, 3))
    gt = SceneGraph(tuple(ObjectNode(i, c, e, caption="c") for i, (c, e) in enumerate(zip(cs, es))))
    pc = cs + rng.normal(0, 0.3, cs.shape)
    pe = es * rng.uniform(0.6, 1.4, es.shape)
    pred = SceneGraph(tuple(ObjectNode(100 + i, c, e, caption="c") for i, (c, e) in enumerate(zip(pc, pe))))
    return gt, pred


@pytest.mark.parametrize("seed", range(50))
def test_propagation_matches_exhaustive_oracle(seed):
    rng = np.random.default_rng(seed)
    gt, pred = _jittered(rng, int(rng.integers(1, 17)))
    assert propagate_annotations(gt, pred) == propagate_oracle(gt, pred)
    for a, b in [(n, m) for n in gt.nodes for m in pred.nodes][:10]:
        assert box_iou(a.bbox_centroid, a.bbox_extent, b.bbox_centroid, b.bbox_extent) == pytest.approx(
            iou_oracle(a.bbox_centroid, a.bbox_extent, b.bbox_centroid, b.bbox_extent), abs=1e-12)


# -------------------------------------------------------- predicted data
def test_zero_noise_is_identity():
    pair = make_pair(generate_scene(SMALL, 2), 0.5, 1)
    sim = simulate_predicted(pair, NoiseConfig.zero(), seed=3)
    assert dumps_scene_graph(sim.g1) == dumps_scene_graph(pair.g1)
    assert dumps_scene_graph(sim.g2) == dumps_scene_graph(pair.g2)
    assert sorted(sim.gt_matches) == sorted(pair.gt_matches)


def test_forced_split_partitions_points():
    g = generate_scene(SyntheticSceneConfig(object_count=(1, 1)), 4)
    single = ScenePair(g, g, ((0, 0),), 1.0, np.eye(4))
    noise = replace(NoiseConfig.zero(), p_split=1.0)
    out = simulate_predicted(single, noise, seed=0).g1
    assert len(out) == 2
    halves = np.concatenate([n.points for n in out.nodes])
    key = lambda a: a[np.lexsort(a.T)]
    np.testing.assert_array_equal(key(halves), key(g.nodes[0].points))
    out.validate()


def _expected_matches(pair, sim):
    """Independent re-derivation of predicted correspondences."""
    a1, a2 = propagate_oracle(pair.g1, sim.g1), propagate_oracle(pair.g2, sim.g2)
    gt = dict(pair.gt_matches)
    out = []
    for p in sorted(a1):
        b = gt.get(a1[p])
        cands = [q for q in sorted(a2) if a2[q] == b]
        if b is None or not cands:
            continue
        gb = pair.g2.node(b)
        scores = [(iou_oracle(sim.g2.node(q).bbox_centroid, sim.g2.node(q).bbox_extent,
                              gb.bbox_centroid, gb.bbox_extent), -q) for q in cands]
        out.append((p, -max(scores)[1]))
    return out


@pytest.mark.parametrize("seed", range(100))
def test_predicted_pairs_against_propagation_oracle(seed):
    pair = make_pair(generate_scene(SMALL, seed % 20), 0.6, seed)
    sim = simulate_predicted(pair, NoiseConfig(), seed)
    n1, n2 = len(pair.g1), len(pair.g2)
    assert 1 <= len(sim.g1) <= 2 * n1 and 1 <= len(sim.g2) <= 2 * n2
    sim.g1.validate()
    sim.g2.validate()
    ids1, ids2 = set(sim.g1.ids), set(sim.g2.ids)
    assert all(p in ids1 and q in ids2 for p, q in sim.gt_matches)
    assert list(sim.gt_matches) == _expected_matches(pair, sim)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 1), st.floats(0, 1))
def test_predicted_scenes_never_empty(seed, p_split, p_merge):
    pair = make_pair(generate_scene(SMALL, seed % 7), 0.3, seed)
    sim = simulate_predicted(pair, replace(NoiseConfig(), p_split=p_split, p_merge=p_merge), seed)
    assert len(sim.g1) >= 1 and len(sim.g2) >= 1
    assert all(len(n.points) > 0 for n in sim.g1.nodes + sim.g2.nodes)


def test_merge_only_reduces_node_count():
    pair = make_pair(generate_scene(SMALL, 1), 0.5, 1)
    sim = simulate_predicted(pair, replace(NoiseConfig.zero(), p_merge=0.5), 2)
    assert len(sim.g1) <= len(pair.g1) and len(sim.g2) <= len(pair.g2)
    assert set(sim.g1.ids) <= set(pair.g1.ids)


# ----------------------------------------------------------------- corpus
def test_one_scene_one_pair(tmp_path):
    m = generate_corpus(SMALL, 1, 1, seed=0, out_dir=tmp_path)
    assert len(m.entries) == 1
    doc = json.loads((tmp_path / "manifest.jsonl").read_text())
    assert {"g1", "g2", "matches", "overlap", "transform", "split"} <= set(doc)
    assert len(doc["transform"]) == 16


def test_same_seed_same_manifest(tmp_path):
    generate_corpus(SMALL, 3, 2, seed=5, out_dir=tmp_path / "a", negatives_per_scene=1)
    generate_corpus(SMALL, 3, 2, seed=5, out_dir=tmp_path / "b", negatives_per_scene=1)
    assert (tmp_path / "a/manifest.jsonl").read_bytes() == (tmp_path / "b/manifest.jsonl").read_bytes()
    for f in (tmp_path / "a/scenes").iterdir():
        assert f.read_bytes() == (tmp_path / "b/scenes" / f.name).read_bytes()


def test_declared_overlap_recomputes(tmp_path):
    m = generate_corpus(SMALL, 4, 3, overlap_range=(0.2, 0.8), seed=1, out_dir=tmp_path, negatives_per_scene=1)
    m = Manifest.load(tmp_path)
    assert len(m.entries) == 16
    for e in m.entries:
        pair = m.load_pair(e)
        k = len(e.matches)
        assert e.overlap == pytest.approx(k / (len(pair.g1) + len(pair.g2) - k), abs=1e-6)
        if e.kind == "pair":
            for a, b in e.matches:
                err = _apply(pair.transform, pair.g1.node(a).points) - pair.g2.node(b).points
                assert np.max(np.abs(err)) < 1e-4  # six-decimal serialization
        else:
            assert k == 0


def test_corpus_argument_errors(tmp_path):
    with pytest.raises(ValueError, match="overlap range"):
        generate_corpus(SMALL, 1, 1, overlap_range=(0.05, 0.5), out_dir=tmp_path)
    with pytest.raises(ValueError, match="n_scenes"):
        generate_corpus(SMALL, 0, 1, out_dir=tmp_path)


def test_split_is_ninety_ten_by_hash():
    splits = [split_of(i, 0) for i in range(5000)]
    assert 0.08 < splits.count("val") / len(splits) < 0.12
    assert splits == [split_of(i, 0) for i in range(5000)]
