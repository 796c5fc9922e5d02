import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from sgalign import MODALITIES
from sgalign import numerics as nx
from sgalign.losses import (
    Batch,
    LossTerm,
    UncertaintyParams,
    average_terms,
    ial_loss,
    icl_loss,
    total_loss,
    write_loss_report,
)

from .oracles import kl_oracle, run_grad_case, tiny_model, toy_batch_fn

P, M, S, T, R = MODALITIES


def _unit(rng, m, d):
    x = rng.normal(size=(m, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def test_icl_orthogonal_pair_closed_form():
    e = np.eye(2)
    with nx.precision(np.float64):
        assert icl_loss(e, e, 0.1).item() == pytest.approx(math.log1p(math.exp(-10)), rel=1e-9)
    assert icl_loss(e, e, 0.1).item() == pytest.approx(math.log1p(math.exp(-10)), rel=1e-3)
    assert math.log1p(math.exp(-10)) == pytest.approx(4.54e-5, rel=1e-3)


def test_icl_uniform_similarities_give_log_m():
    m = 5
    a = np.zeros((m, 3))
    a[:, 0] = 1
    assert icl_loss(a, a.copy(), 0.1).item() == pytest.approx(math.log(m), rel=1e-6)


def test_icl_is_rotation_invariant():
    rng = np.random.default_rng(0)
    a, p = _unit(rng, 6, 3), _unit(rng, 6, 3)
    rot = Rotation.random(random_state=1).as_matrix()
    with nx.precision(np.float64):
        assert icl_loss(a @ rot.T, p @ rot.T).item() == pytest.approx(icl_loss(a, p).item(), rel=1e-9)


def test_icl_needs_negatives():
    with pytest.raises(ValueError, match="at least 2"):
        icl_loss(np.ones((1, 3)), np.ones((1, 3)))
    with pytest.raises(ValueError, match="equal"):
        icl_loss(np.ones((3, 3)), np.ones((2, 3)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(0.05, 0.5))
def test_icl_decreases_when_a_positive_moves_closer(seed, step):
    rng = np.random.default_rng(seed)
    a, p = _unit(rng, 4, 6), _unit(rng, 4, 6)
    closer = p.copy()
    closer[0] = (1 - step) * p[0] + step * a[0]
    closer[0] /= np.linalg.norm(closer[0])
    with nx.precision(np.float64):
        # only the positive similarity grows; the other anchors must not gain on row 0
        others = a[1:] @ closer[0] - a[1:] @ p[0]
        if np.any(others > 0):
            return
        assert icl_loss(a, closer).item() < icl_loss(a, p).item()


def test_ial_zero_when_unimodal_equals_joint():
    rng = np.random.default_rng(1)
    a, b = _unit(rng, 5, 4), _unit(rng, 5, 4)
    assert ial_loss(a, b, a, b).item() == pytest.approx(0.0, abs=1e-7)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_ial_is_nonnegative(seed):
    rng = np.random.default_rng(seed)
    args = [_unit(rng, 4, 3) for _ in range(4)]
    assert ial_loss(*args).item() >= -1e-7


def test_ial_matches_termwise_oracle():
    rng = np.random.default_rng(2)
    ja, jb, ua, ub = (_unit(rng, 3, 4) for _ in range(4))
    tj, tu = 0.1, 0.2
    j, u = ja @ jb.T / tj, ua @ ub.T / tu
    expected = 0.5 * (kl_oracle(j, u) + kl_oracle(j.T, u.T))
    with nx.precision(np.float64):
        assert ial_loss(ja, jb, ua, ub, tj, tu).item() == pytest.approx(expected, rel=1e-10)


def test_ial_gradients():
    assert run_grad_case("module:ial_loss", instances=20) < 1e-3


def test_icl_gradients():
    assert run_grad_case("module:icl_loss", instances=20) < 1e-3


# --------------------------------------------------------------- total loss
def _batch(rng, m=4, d=6, present=None):
    present = np.ones((m, 5), bool) if present is None else present
    uni_a = np.stack([_unit(rng, m, d) for _ in range(5)], axis=1) * present[..., None]
    uni_b = np.stack([_unit(rng, m, d) for _ in range(5)], axis=1) * present[..., None]
    return Batch(nx.Tensor(_unit(rng, m, d)), nx.Tensor(_unit(rng, m, d)), nx.Tensor(uni_a), nx.Tensor(uni_b), present)


def test_unit_variance_halves_each_term():
    rng = np.random.default_rng(3)
    batch = _batch(rng)
    total, terms = total_loss(batch, UncertaintyParams())
    assert terms[0].name == "icl_joint" and terms[0].weight == 1.0
    for t in terms[1:]:
        assert t.weight == pytest.approx(0.5)
        assert t.weighted == pytest.approx(t.raw / 2, rel=1e-6)
    assert len(terms) == 11


def test_report_sums_to_scalar():
    rng = np.random.default_rng(4)
    u = UncertaintyParams()
    u.log_var.data = rng.normal(size=(2, 5)).astype(np.float32)
    with nx.precision(np.float64):
        u64 = UncertaintyParams()
        u64.log_var.data = u.log_var.data.astype(np.float64)
        total, terms = total_loss(_batch(rng), u64)
    assert sum(t.weighted for t in terms) == pytest.approx(total.item(), abs=1e-6)


def test_absent_modality_contributes_nothing_and_gets_no_gradient():
    rng = np.random.default_rng(5)
    present = np.ones((4, 5), bool)
    present[:, R] = False
    present[1:, M] = False  # a single pair is not enough for M either
    u = UncertaintyParams()
    total, terms = total_loss(_batch(rng, present=present), u)
    names = {t.name for t in terms}
    assert not any(n.endswith("_R") or n.endswith("_M") for n in names)
    total.backward()
    assert np.all(u.log_var.grad[:, R] == 0) and np.all(u.log_var.grad[:, M] == 0)
    assert np.all(u.log_var.grad[:, P] != 0)


def test_uncertainty_gradient_closed_form():
    rng = np.random.default_rng(6)
    u = UncertaintyParams()
    total, terms = total_loss(_batch(rng), u)
    total.backward()
    raw = {t.name: t.raw for t in terms}
    # d/ds (0.5 e^-s L + 0.5 s) at s = 0 is 0.5 (1 - L)
    assert u.log_var.grad[0, P] == pytest.approx(0.5 * (1 - raw["icl_P"]), rel=1e-4)
    assert u.log_var.grad[1, T] == pytest.approx(0.5 * (1 - raw["ial_T"]), rel=1e-4)


def test_empty_batch_errors():
    empty = Batch(nx.Tensor(np.zeros((0, 4))), nx.Tensor(np.zeros((0, 4))), nx.Tensor(np.zeros((0, 5, 4))),
                  nx.Tensor(np.zeros((0, 5, 4))), np.zeros((0, 5), bool))
    with pytest.raises(ValueError, match="empty"):
        total_loss(empty, UncertaintyParams())


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(-30, 30))
def test_total_loss_finite_and_bounded_below(seed, s):
    rng = np.random.default_rng(seed)
    u = UncertaintyParams()
    u.log_var.data[:] = s
    total, _ = total_loss(_batch(rng), u)
    assert np.isfinite(total.item())
    # ICL and IAL are nonnegative, so each weighted term is at least 0.5 * s
    assert total.item() >= 10 * 0.5 * s - 1e-3


def test_end_to_end_gradient_over_every_parameter():
    with nx.precision(np.float64):
        model = tiny_model(11)
        rng = np.random.default_rng(12)
        f = toy_batch_fn(model, rng, pairs=3)
        for name, p in sorted(model.parameters().items()):
            assert nx.check_gradients(f, p, max_coords=2, seed=len(name)) < 1e-3, name


def test_loss_report_csv(tmp_path):
    rows = [(0, LossTerm("icl_joint", 1.5, 1.0, 1.5)), (0, LossTerm("icl_P", 2.0, 0.5, 1.0))]
    write_loss_report(tmp_path / "r.csv", rows)
    with open(tmp_path / "r.csv") as fh:
        got = list(csv.reader(fh))
    assert got[0] == ["epoch", "term", "raw", "weight", "weighted"]
    assert got[2] == ["0", "icl_P", "2.000000", "0.500000", "1.000000"]


def test_average_terms_skips_missing():
    hist = [[LossTerm("a", 1, 1, 1), LossTerm("b", 4, 1, 4)], [LossTerm("a", 3, 1, 3)]]
    out = {t.name: t.raw for t in average_terms(hist)}
    assert out == {"a": 2.0, "b": 4.0}
