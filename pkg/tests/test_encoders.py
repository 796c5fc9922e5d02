import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from sgalign import ModalityKind, ObjectNode, SceneGraph
from sgalign import numerics as nx
from sgalign.encoders import (
    GatEncoder,
    MissingEmbeddingError,
    PointEncoder,
    TextEmbeddingProvider,
    TextProjection,
    attention_mask,
    canonicalize_points,
    embed_caption,
    embed_referrals,
    encode_mesh,
    encode_points,
    encode_structure,
    fps,
    prepare_mesh,
    prepare_points,
    read_sgem,
    sample_mesh_surface,
    write_sgem,
)
from sgalign.encoders.gat import LEAKY_SLOPE
from sgalign.scenegraph import Mesh, structure_features

from .oracles import fps_oracle, run_grad_case, tetra

RNG = np.random.default_rng(1234)
ENC = PointEncoder(np.random.default_rng(0))


# ------------------------------------------------------------------ fps
def test_fps_k_at_least_n_returns_everything():
    pts = RNG.normal(size=(5, 3))
    assert sorted(fps(pts, 9).tolist()) == [0, 1, 2, 3, 4]


def test_fps_square_picks_a_diagonal():
    sq = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0.0]])
    a, b = fps(sq, 2)
    assert {int(a), int(b)} in ({0, 2}, {1, 3})


def test_fps_starts_near_centroid():
    pts = np.array([[10, 0, 0], [0.1, 0, 0], [-10, 0, 0], [0, 9, 0.0]])
    assert fps(pts, 1)[0] == 1


@pytest.mark.parametrize("seed", range(20))
def test_fps_matches_brute_force(seed):
    pts = np.random.default_rng(seed).normal(size=(64, 3))
    assert fps(pts, 8).tolist() == fps_oracle(pts, 8)


def test_fps_ties_go_to_lowest_index():
    pts = np.array([[0, 0, 0], [1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0.0]])
    assert fps(pts, 2).tolist() == [0, 1]


def test_fps_errors():
    with pytest.raises(ValueError, match="empty"):
        fps(np.zeros((0, 3)), 3)
    with pytest.raises(ValueError):
        fps(np.zeros((4, 3)), 0)


# ------------------------------------------------------------- sampling
def test_single_triangle_samples_inside():
    v = np.array([[0, 0, 0], [2, 0, 0], [0, 3, 0.0]])
    pts = sample_mesh_surface(Mesh(v, [[0, 1, 2]]), 2000, seed=1)
    u, w = pts[:, 0] / 2, pts[:, 1] / 3
    assert np.all(u >= -1e-12) and np.all(w >= -1e-12) and np.all(u + w <= 1 + 1e-12)
    assert np.allclose(pts[:, 2], 0)


def test_area_proportional_face_choice():
    # areas 1 and 3
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 2, 0], [5, 0, 0], [8, 0, 0], [5, 2, 0.0]])
    mesh = Mesh(v, [[0, 1, 2], [3, 4, 5]])
    n = 10_000
    _, face = sample_mesh_surface(mesh, n, seed=3, return_faces=True)
    k = int((face == 0).sum())
    mean, sd = n * 0.25, np.sqrt(n * 0.25 * 0.75)
    assert abs(k - mean) <= 3 * sd


def test_unit_square_sample_mean():
    v = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0.0]])
    pts = sample_mesh_surface(Mesh(v, [[0, 1, 2], [0, 2, 3]]), 10_000, seed=5)
    np.testing.assert_allclose(pts.mean(axis=0), [0.5, 0.5, 0.0], atol=0.02)


def test_sampling_is_seed_deterministic_and_default_size():
    m = tetra()
    a, b = sample_mesh_surface(m, seed=7), sample_mesh_surface(m, seed=7)
    assert a.shape == (2048, 3)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, sample_mesh_surface(m, seed=8))


def test_degenerate_and_empty_meshes_error():
    flat = Mesh(np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0.0]]), [[0, 1, 2]])
    with pytest.raises(ValueError, match="degenerate"):
        sample_mesh_surface(flat, 10)
    with pytest.raises(ValueError, match="no triangles"):
        encode_mesh(ENC, Mesh(np.zeros((0, 3)), np.zeros((0, 3))))


# ------------------------------------------------------------ canonicalize
def test_canonicalize_examples():
    np.testing.assert_array_equal(canonicalize_points([[3, 4, 5]]), [[0, 0, 0]])
    np.testing.assert_allclose(canonicalize_points([[0, 0, 0], [2, 0, 0]]), [[-1, 0, 0], [1, 0, 0]])
    np.testing.assert_array_equal(canonicalize_points([[1, 1, 1]] * 4), np.zeros((4, 3)))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 40), st.just(3)), elements=st.floats(-10, 10)),
       st.lists(st.floats(-100, 100), min_size=3, max_size=3))
def test_canonicalize_translation_invariant(pts, t):
    np.testing.assert_allclose(canonicalize_points(pts), canonicalize_points(pts + np.asarray(t)), atol=1e-6)


# ------------------------------------------------------------- point encoder
def test_encode_points_permutation_and_duplication():
    pts = canonicalize_points(RNG.normal(size=(50, 3)))
    base = encode_points(ENC, pts).data
    assert base.shape == (128,)
    np.testing.assert_array_equal(encode_points(ENC, pts[RNG.permutation(50)]).data, base)
    np.testing.assert_array_equal(encode_points(ENC, np.concatenate([pts, pts])).data, base)


def test_encode_points_empty_errors():
    with pytest.raises(ValueError, match="empty"):
        encode_points(ENC, np.zeros((0, 3)))
    with pytest.raises(ValueError, match="empty"):
        prepare_points(np.zeros((0, 3)))


def test_tracked_and_untracked_paths_agree():
    clouds = RNG.uniform(-1, 1, (3, 40, 3))
    fast = ENC(clouds).data
    full = nx.max_reduce(ENC.point_features(nx.Tensor(clouds)), axis=1).data
    np.testing.assert_allclose(fast, full, rtol=1e-6, atol=1e-6)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_full_point_pipeline_translation_invariant(seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(int(rng.integers(10, 700)), 3))
    t = rng.uniform(-20, 20, 3)
    a = encode_points(ENC, prepare_points(pts, 64)).data
    b = encode_points(ENC, prepare_points(pts + t, 64)).data
    np.testing.assert_allclose(a, b, atol=1e-5)


def test_prepare_points_pads_to_k():
    out = prepare_points(RNG.normal(size=(10, 3)), 64)
    assert out.shape == (64, 3)
    assert len(np.unique(out, axis=0)) == 10


def test_encode_mesh_is_composition():
    m = tetra(2.0, (1, 1, 1))
    direct = encode_points(ENC, prepare_mesh(m, seed=4)).data
    np.testing.assert_array_equal(encode_mesh(ENC, m, seed=4).data, direct)
    assert not np.array_equal(encode_mesh(ENC, m, seed=5).data, direct)


def test_point_encoder_gradients():
    assert run_grad_case("module:point_encoder", instances=20) < 1e-3


# ----------------------------------------------------------------- GAT
def _graph(centroids, edges=()):
    nodes = tuple(ObjectNode(i, bbox_centroid=c, bbox_extent=(1, 1, 1), caption="x") for i, c in enumerate(centroids))
    return SceneGraph(nodes, edges)


def test_isolated_node_is_self_attention_only():
    gat = GatEncoder(np.random.default_rng(2), hidden=16)
    g = _graph([(1, 2, 3)])
    out = encode_structure(gat, g).data
    h = gat.lift.numpy_forward(structure_features(g).astype(np.float32))
    for layer in gat.layers:
        h = np.maximum(h * layer.scale.data, 0)
    np.testing.assert_allclose(out, h, rtol=1e-5, atol=1e-6)


def test_symmetric_pair_gets_identical_embeddings():
    gat = GatEncoder(np.random.default_rng(3))
    g = SceneGraph(tuple(ObjectNode(i, bbox_centroid=(0, 0, 0), bbox_extent=(1, 2, 1), caption="x")
                         for i in range(2)), ((0, 1, "near"), (1, 0, "near")))
    out = encode_structure(gat, g).data
    np.testing.assert_array_equal(out[0], out[1])


def test_structure_equivariant_to_node_order():
    gat = GatEncoder(np.random.default_rng(4))
    rng = np.random.default_rng(5)
    cents = rng.uniform(-3, 3, (6, 3))
    edges = ((0, 1, "near"), (2, 1, "left of"), (4, 5, "on"), (5, 3, "near"))
    g = _graph(cents, edges)
    perm = rng.permutation(6)
    g2 = SceneGraph(tuple(g.nodes[i] for i in perm), edges)
    a, b = encode_structure(gat, g).data, encode_structure(gat, g2).data
    np.testing.assert_allclose(b, a[perm], rtol=1e-5, atol=1e-6)


def test_attention_mask_direction():
    m = attention_mask(3, [(0, 2, "near")])
    # row = receiving node, column = sender
    assert m[2, 0] == 0 and m[0, 2] < -1e8 and np.all(np.diag(m) == 0)


def test_gat_shapes_and_slope():
    gat = GatEncoder(np.random.default_rng(0))
    assert len(gat.layers) == 2 and gat.out_dim == 128
    assert all(layer.scale.shape == (128,) for layer in gat.layers)
    assert gat.layers[0].slope == LEAKY_SLOPE == 0.2


def test_gat_gradients_on_four_nodes():
    assert run_grad_case("module:gat", instances=20) < 1e-3


# ---------------------------------------------------------------- text
def test_toy_hash_is_deterministic_and_unit_norm():
    p = TextEmbeddingProvider()
    a, b = p.encode("The red chair is wood"), TextEmbeddingProvider().encode("The red chair is wood")
    np.testing.assert_array_equal(a, b)
    assert a.shape == (384,)
    assert np.linalg.norm(a) == pytest.approx(1.0, abs=1e-6)
    assert not np.array_equal(a, p.encode("The blue chair is wood"))


def test_single_referral_mean_is_itself():
    p = TextEmbeddingProvider(dim=16)
    node = ObjectNode(0, bbox_centroid=(0, 0, 0), bbox_extent=(1, 1, 1), referrals=("the lamp near the bed",))
    np.testing.assert_array_equal(p.mean_referral(node), p.encode("the lamp near the bed"))


def test_opposite_referrals_average_to_zero_but_stay_present():
    u = np.ones(8, dtype=np.float32)
    node = ObjectNode(0, bbox_centroid=(0, 0, 0), bbox_extent=(1, 1, 1), referral_embeddings=np.stack([u, -u]))
    p = TextEmbeddingProvider(dim=8)
    assert node.has(ModalityKind.R)
    np.testing.assert_array_equal(p.mean_referral(node), np.zeros(8))
    proj = TextProjection(np.random.default_rng(0), 8, 4)
    np.testing.assert_allclose(embed_referrals(p, proj, node).data, proj.bias.data)


def test_no_referrals_means_absent():
    node = ObjectNode(0, bbox_centroid=(0, 0, 0), bbox_extent=(1, 1, 1), caption="x")
    p = TextEmbeddingProvider(dim=8)
    assert embed_referrals(p, TextProjection(np.random.default_rng(0), 8, 4), node) is None


def test_sgem_round_trip_and_missing_entry(tmp_path):
    rng = np.random.default_rng(0)
    records = [(7, int(ModalityKind.T), rng.normal(size=6).astype(np.float32)),
               (7, int(ModalityKind.R), rng.normal(size=6).astype(np.float32)),
               (7, int(ModalityKind.R), rng.normal(size=6).astype(np.float32))]
    write_sgem(tmp_path / "e.sgem", 6, records)
    assert (tmp_path / "e.sgem").read_bytes()[:4] == b"SGEM"
    dim, table = read_sgem(tmp_path / "e.sgem")
    assert dim == 6 and len(table[(7, int(ModalityKind.R))]) == 2
    p = TextEmbeddingProvider.from_file(tmp_path / "e.sgem")
    node = ObjectNode(7, bbox_centroid=(0, 0, 0), bbox_extent=(1, 1, 1), caption="anything", referrals=("a", "b"))
    np.testing.assert_array_equal(p.caption_vector(node), records[0][2])
    np.testing.assert_allclose(p.mean_referral(node), (records[1][2] + records[2][2]) / 2, rtol=1e-6)
    proj = TextProjection(rng, 6, 4)
    assert embed_caption(p, proj, node).shape == (4,)
    other = ObjectNode(8, bbox_centroid=(0, 0, 0), bbox_extent=(1, 1, 1), caption="anything")
    with pytest.raises(MissingEmbeddingError, match="8"):
        p.caption_vector(other)


def test_text_projection_gradients():
    assert run_grad_case("module:text_projection", instances=20) < 1e-3


# ------------------------------------------------------------ finiteness
@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 30), st.just(3)),
              elements=st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)))
def test_point_encoder_outputs_are_finite(pts):
    assert np.all(np.isfinite(encode_points(ENC, prepare_points(pts, 32)).data))
