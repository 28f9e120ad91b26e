import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

import oracles
from conftest import const
from dadu import tensor as T
from dadu.metrics import (SupervisionWeights, deep_supervision_loss, dice_coefficient, dice_loss,
                          evaluate_case, extract_contour, hausdorff_directed, hausdorff_symmetric,
                          read_metrics_csv, write_metrics_csv)
from dadu.tensor import ShapeError

masks = hnp.arrays(np.int64, (6, 7), elements=st.integers(0, 3))


def scalar(v):
    return const(np.full((1, 1, 1, 1), v))


# --- DSC -------------------------------------------------------------------


def test_dsc_identical_and_disjoint():
    x = np.array([[0, 1], [1, 2]])
    assert dice_coefficient(x, x, 1) == 1.0
    assert dice_coefficient(x, np.where(x == 1, 0, x), 1) == 0.0


def test_dsc_four_four_two():
    x = np.zeros((4, 4), int)
    y = np.zeros((4, 4), int)
    x[0, :4] = 1
    y[0, 2:4] = 1
    y[1, :2] = 1
    assert dice_coefficient(x, y, 1) == 0.5


def test_dsc_both_empty_is_one():
    z = np.zeros((3, 3), int)
    assert dice_coefficient(z, z, 2) == 1.0


def test_dsc_rejects_extent_mismatch():
    with pytest.raises(ShapeError):
        dice_coefficient(np.zeros((3, 3), int), np.zeros((3, 4), int), 1)


@given(masks, masks, st.integers(0, 3))
def test_dsc_matches_counting_oracle_and_is_symmetric(x, y, c):
    assert dice_coefficient(x, y, c) == oracles.dsc(x, y, c)
    assert dice_coefficient(x, y, c) == dice_coefficient(y, x, c)


@given(masks, st.integers(1, 3), st.integers(0, 41))
def test_dsc_monotone_degradation(x, c, k):
    y = x.copy()
    before = dice_coefficient(x, y, c)
    idx = np.flatnonzero(y.ravel() == c)[:k]
    y.ravel()[idx] = 0
    assert dice_coefficient(x, y, c) <= before


# --- dice loss -------------------------------------------------------------


def test_dice_loss_near_perfect():
    t = np.zeros((1, 2, 4, 4))
    t[0, 0, :2] = 1
    t[0, 1] = 1 - t[0, 0]
    p = np.where(t == 1, 0.999, 0.001)
    assert dice_loss(const(p), const(t)).item() < 0.01


def test_dice_loss_uniform_half():
    h = w = 8
    t = np.zeros((1, 2, h, w))
    t[0, 0, : h // 2] = 1
    t[0, 1] = 1 - t[0, 0]
    got = dice_loss(const(np.full(t.shape, 0.5)), const(t)).item()
    want = 1 - (2 * 0.25 * h * w + 1) / (0.5 * h * w + 0.5 * h * w + 1)
    assert got == pytest.approx(want, abs=1e-12)
    assert got == pytest.approx(0.5, abs=0.01)


def test_dice_loss_shape_mismatch():
    with pytest.raises(ShapeError):
        dice_loss(const(np.zeros((1, 2, 4, 4))), const(np.zeros((1, 3, 4, 4))))


@given(masks)
def test_one_minus_loss_tracks_dsc_at_hard_targets(m):
    for c in range(1, 4):
        t = (m == c).astype(float)[None, None]
        y = (np.roll(m, 1, axis=1) == c).astype(float)[None, None]
        soft = 1 - dice_loss(const(y), const(t)).item()
        nx, ny = t.sum(), y.sum()
        if nx + ny == 0:
            continue
        assert abs(soft - dice_coefficient(m, np.roll(m, 1, axis=1), c)) <= 2 * 1.0 / (nx + ny) + 1e-12


# --- deep supervision ------------------------------------------------------


def test_deep_supervision_uniform_weights_arithmetic():
    w = SupervisionWeights.uniform(3, 0.25)
    total = deep_supervision_loss(scalar(0.8), [scalar(0.8)] * 3, w).item()
    assert abs(total - 1.4) <= 1e-9


def test_deep_supervision_zero_eta_is_bitwise_main():
    main = scalar(0.8123456789)
    total = deep_supervision_loss(main, [scalar(0.3), scalar(0.9)], SupervisionWeights((0.0, 0.0)))
    assert total.data.tobytes() == main.data.tobytes()


@given(st.lists(st.floats(0, 2), min_size=4, max_size=4), st.lists(st.floats(0, 1), min_size=3, max_size=3))
def test_deep_supervision_matches_scalar_oracle_and_is_linear(losses, eta):
    main, aux = scalar(losses[0]), [scalar(v) for v in losses[1:]]
    got = deep_supervision_loss(main, aux, SupervisionWeights(eta)).item()
    assert got == pytest.approx(losses[0] + sum(e * v for e, v in zip(eta, losses[1:])), abs=1e-12)
    doubled = deep_supervision_loss(main, aux, SupervisionWeights([2 * e for e in eta])).item()
    assert doubled - losses[0] == pytest.approx(2 * (got - losses[0]), abs=1e-12)


def test_deep_supervision_errors():
    with pytest.raises(ValueError):
        deep_supervision_loss(scalar(1.0), [scalar(1.0)], SupervisionWeights((0.1, 0.2)))
    with pytest.raises(ValueError):
        SupervisionWeights((-0.1,))


# --- contours and Hausdorff ------------------------------------------------


def test_contour_examples():
    full = np.ones((4, 5), int)
    ring = {(i, j) for i in range(4) for j in range(5) if i in (0, 3) or j in (0, 4)}
    assert {tuple(p) for p in extract_contour(full, 1)} == ring
    one = np.zeros((5, 5), int)
    one[2, 3] = 2
    assert extract_contour(one, 2).tolist() == [[2, 3]]
    sq = np.zeros((8, 8), int)
    sq[2:5, 2:5] = 1
    pts = {tuple(p) for p in extract_contour(sq, 1)}
    assert len(pts) == 8 and (3, 3) not in pts


@given(masks, st.integers(0, 3))
def test_contour_matches_oracle(m, c):
    assert sorted(map(tuple, extract_contour(m, c).tolist())) == sorted(oracles.contour(m, c))


def test_hausdorff_examples():
    a = np.array([[0, 0]])
    assert hausdorff_directed(a, a) == 0.0
    assert hausdorff_directed(a, np.array([[3, 4]])) == 5.0
    assert hausdorff_directed(a, np.zeros((0, 2), int)) is None
    assert hausdorff_symmetric(np.zeros((0, 2), int), a).symmetric is None


def test_hausdorff_subset_case():
    a = np.array([[0, 0], [0, 1]])
    b = np.array([[0, 0], [0, 1], [0, 7]])
    r = hausdorff_symmetric(a, b)
    assert r.forward == 0.0 and r.reverse == 6.0 and r.symmetric == 6.0


point_sets = st.lists(st.tuples(st.integers(-20, 20), st.integers(-20, 20)), min_size=1, max_size=20)


@given(point_sets, point_sets)
def test_hausdorff_matches_double_loop_exactly(a, b):
    assert hausdorff_directed(np.array(a), np.array(b)) == oracles.hd_directed(a, b)
    r = hausdorff_symmetric(np.array(a), np.array(b))
    assert r.symmetric == oracles.hd_symmetric(a, b)
    assert r.symmetric == hausdorff_symmetric(np.array(b), np.array(a)).symmetric
    assert r.symmetric >= 0
    assert (r.symmetric == 0) == (set(a) == set(b))


def test_hausdorff_spacing():
    assert hausdorff_directed(np.array([[0, 0]]), np.array([[3, 4]]), spacing=0.5) == 2.5


# --- case evaluation and CSV -----------------------------------------------


def test_evaluate_perfect_case():
    m = np.zeros((8, 8), int)
    m[1:3, 1:3], m[4:6, 4:6], m[6:, :2] = 1, 2, 3
    r = evaluate_case(m, m)
    assert [c.dsc for c in r.classes] == [1.0, 1.0, 1.0]
    assert [c.hd.symmetric for c in r.classes] == [0.0, 0.0, 0.0]


def test_evaluate_missing_class():
    m = np.zeros((8, 8), int)
    m[1:3, 1:3], m[4:6, 4:6] = 1, 2
    pred = np.where(m == 2, 0, m)
    r = evaluate_case(pred, m)
    assert r.by_class(2).dsc == 0.0
    assert r.by_class(2).hd.symmetric is None
    assert r.by_class(1).dsc == 1.0


@given(masks, masks)
def test_evaluate_matches_composed_oracles(pred, truth):
    r = evaluate_case(pred, truth)
    for c in r.classes:
        assert c.dsc == oracles.dsc(truth, pred, c.class_id)
        a, b = oracles.contour(truth, c.class_id), oracles.contour(pred, c.class_id)
        if a and b:
            assert c.hd.symmetric == oracles.hd_symmetric(a, b)
            assert c.hd.forward == oracles.hd_directed(a, b)
        else:
            assert c.hd.symmetric is None


def test_metrics_csv_roundtrip(tmp_path):
    m = np.zeros((8, 8), int)
    m[1:3, 1:3], m[4:6, 4:6] = 1, 2
    pred = np.where(m == 2, 0, m)
    write_metrics_csv(tmp_path / "m.csv", [("a", evaluate_case(m, m)), ("b", evaluate_case(pred, m))])
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "case_id,class,dsc,hd_sym,hd_ab,hd_ba"
    rows = read_metrics_csv(tmp_path / "m.csv")
    assert len(rows) == 6
    b2 = [r for r in rows if r["case_id"] == "b" and r["class"] == 2][0]
    assert b2["dsc"] == 0.0 and b2["hd_sym"] is None
    assert "b,2,0.0,,," in lines
