import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from skimage.draw import ellipse

from odoc.core import LabelMasks
from odoc.errors import DegenerateLabels, EmptyDisc, IdMismatch, ShapeMismatch
from odoc.losses import dice_loss
from odoc.metrics import (
    EvalRecord,
    challenge_score,
    dice_coefficient,
    evaluate_dataset,
    normalize_scores,
    postprocess,
    rank_score,
    read_records,
    read_team_table,
    screening_auc,
    vertical_cdr,
    vertical_diameter,
    write_leaderboard,
    write_records,
)
from challenge_table import TEAMS, metric_table, write_csv
from oracles import count_dice, row_extent, trapezoid_auc

masks = st.integers(2, 12).flatmap(lambda n: arrays(np.bool_, (n, n)))


def _label(disc, cup=None):
    disc = np.asarray(disc, bool)
    cup = np.zeros_like(disc) if cup is None else np.asarray(cup, bool) & disc
    return LabelMasks(disc, cup)


@st.composite
def label_pairs(draw):
    h = draw(st.integers(3, 14))
    w = draw(st.integers(3, 14))
    disc = draw(arrays(np.bool_, (h, w)))
    cup = draw(arrays(np.bool_, (h, w))) & disc
    return LabelMasks(disc, cup)


# ---------------------------------------------------------------- postprocess


def test_postprocess_fills_annulus():
    n = 21
    rr, cc = np.mgrid[:n, :n]
    r2 = (rr - 10) ** 2 + (cc - 10) ** 2
    ring = (r2 <= 64) & (r2 >= 16)
    out = postprocess(_label(ring))
    np.testing.assert_array_equal(out.disc, r2 <= 64)


def test_postprocess_keeps_solid_and_empty():
    disc = np.zeros((30, 30), bool)
    disc[ellipse(15, 15, 9, 6)] = True
    assert postprocess(_label(disc)) == _label(disc)
    empty = _label(np.zeros((5, 5)))
    assert postprocess(empty) == empty


@settings(max_examples=150)
@given(label_pairs())
def test_postprocess_idempotent(m):
    once = postprocess(m)
    assert postprocess(once) == once
    assert not (once.cup & ~once.disc).any()


# ---------------------------------------------------------------- dice


def test_dice_conventions():
    a = np.zeros((4, 4), bool)
    assert dice_coefficient(a, a) == 1.0
    b = a.copy()
    b[1, 1] = True
    assert dice_coefficient(b, b) == 1.0
    c = a.copy()
    c[2, 2] = True
    assert dice_coefficient(b, c) == 0.0
    with pytest.raises(ShapeMismatch):
        dice_coefficient(a, np.zeros((3, 3)))


def test_dice_halo_two_thirds():
    gt = np.zeros((10, 10), bool)
    gt[2:4, 2:6] = True  # A = 8
    pred = gt.copy()
    pred[4:6, 2:6] = True  # halo of another 8
    assert dice_coefficient(pred, gt) == pytest.approx(2 / 3, abs=1e-15)


@pytest.mark.parametrize("seed", range(10))
def test_dice_matches_counting_oracle(seed):
    r = np.random.default_rng(seed)
    a = r.random((16, 16)) > r.random()
    b = r.random((16, 16)) > r.random()
    assert dice_coefficient(a, b) == count_dice(a, b)


@given(masks, st.data())
def test_dice_symmetric_and_matches_soft_loss(a, data):
    b = data.draw(arrays(np.bool_, a.shape))
    assert dice_coefficient(a, b) == dice_coefficient(b, a)
    if a.any() or b.any():
        assert dice_coefficient(a, b) == pytest.approx(1 - dice_loss(a.astype(float), b.astype(float), eps=0))


# ---------------------------------------------------------------- CDR


def test_vertical_diameter_extent():
    m = np.zeros((10, 10), bool)
    m[3, 4] = m[7, 1] = True
    assert vertical_diameter(m) == 5 == row_extent(m)
    assert vertical_diameter(np.zeros((3, 3))) == 0


def test_cdr_conventions():
    disc = np.zeros((9, 9), bool)
    disc[2:7, 2:7] = True
    assert vertical_cdr(_label(disc, disc)) == 1.0
    assert vertical_cdr(_label(disc)) == 0.0
    with pytest.raises(EmptyDisc):
        vertical_cdr(_label(np.zeros((4, 4))))


@pytest.mark.parametrize("a", [12, 20, 31])
def test_cdr_concentric_ellipses_half_axis(a):
    n = 3 * a
    disc = np.zeros((n, n), bool)
    cup = np.zeros((n, n), bool)
    c = n // 2
    disc[ellipse(c, c, a, a * 1.2, shape=disc.shape)] = True
    cup[ellipse(c, c, a / 2, a * 0.7, shape=cup.shape)] = True
    vd = row_extent(disc)
    assert abs(vertical_cdr(_label(disc, cup)) - 0.5) <= 2 / vd


@settings(max_examples=150)
@given(label_pairs(), st.integers(0, 6))
def test_cdr_flip_and_translation_invariant(m, shift):
    if not m.disc.any():
        return
    base = vertical_cdr(m)
    flipped = LabelMasks(m.disc[:, ::-1], m.cup[:, ::-1])
    assert vertical_cdr(flipped) == base
    pad = lambda x: np.pad(x, ((0, 0), (shift, 6 - shift)))  # noqa: E731
    assert vertical_cdr(LabelMasks(pad(m.disc), pad(m.cup))) == base


# ---------------------------------------------------------------- evaluate_dataset


def test_evaluate_identity_and_records(tmp_path):
    disc = np.zeros((12, 12), bool)
    disc[2:10, 3:9] = True
    cup = np.zeros_like(disc)
    cup[4:8, 4:8] = True
    gt = {"a": _label(disc, cup), "b": _label(disc, disc)}
    recs, means = evaluate_dataset(dict(gt), gt)
    assert means == (1.0, 1.0, 0.0)
    path = tmp_path / "r.csv"
    write_records(path, recs)
    assert read_records(path) == recs


def test_evaluate_derived_record_and_order():
    gt_d = np.zeros((10, 10), bool)
    gt_d[2:4, 2:6] = True
    pr_d = gt_d.copy()
    pr_d[4:6, 2:6] = True
    gt = {"x": _label(gt_d, gt_d)}
    pred = {"x": _label(pr_d, gt_d)}
    recs, (cup, disc, delta) = evaluate_dataset(pred, gt)
    r = recs[0]
    assert disc == pytest.approx(2 / 3) and cup == 1.0
    # VD: gt disc 2 rows, predicted disc 4 rows, cups 2 rows
    assert (r.CDR_g, r.CDR_p) == (1.0, 0.5)
    assert r.delta == abs(r.CDR_p - r.CDR_g) == delta


def test_evaluate_permutation_and_mismatch(rng):
    gts, preds = {}, {}
    for i in range(6):
        d = rng.random((8, 8)) > 0.3
        gts[f"i{i}"] = _label(d, d & (rng.random((8, 8)) > 0.5))
        p = rng.random((8, 8)) > 0.3
        preds[f"i{i}"] = _label(p, p & (rng.random((8, 8)) > 0.5))
    ids = list(gts)
    _, m1 = evaluate_dataset(preds, gts)
    _, m2 = evaluate_dataset({k: preds[k] for k in reversed(ids)}, {k: gts[k] for k in ids[::-1]})
    assert m1 == m2
    del preds["i3"]
    with pytest.raises(IdMismatch) as e:
        evaluate_dataset(preds, gts)
    assert e.value.offenders == ["i3"]


def test_empty_prediction_gives_zero_cdr():
    d = np.zeros((6, 6), bool)
    d[1:5, 1:5] = True
    recs, _ = evaluate_dataset({"a": _label(np.zeros((6, 6)))}, {"a": _label(d, d)})
    assert recs[0].CDR_p == 0.0 and recs[0].delta == 1.0


# ---------------------------------------------------------------- screening


def test_auc_perfect_separation():
    _, auc = screening_auc([0.2, 0.3, 0.7, 0.9], [0, 0, 1, 1])
    assert auc == 1.0


def test_auc_degenerate_and_constant():
    with pytest.raises(DegenerateLabels):
        screening_auc([0.1, 0.2], [1, 1])
    _, auc = screening_auc([0.4, 0.4, 0.4], [0, 1, 0])
    assert auc == 0.5


def test_auc_random_labels_near_half():
    r = np.random.default_rng(7)
    scores = r.permutation(1000) / 1000.0
    labels = r.random(1000) > 0.5
    _, auc = screening_auc(scores, labels)
    assert abs(auc - 0.5) <= 0.05


def test_normalize_scores():
    np.testing.assert_allclose(normalize_scores([2.0, 4.0, 3.0]), [0.0, 1.0, 0.5])


@st.composite
def scored(draw):
    n = draw(st.integers(2, 30))
    s = draw(arrays(np.int64, n, elements=st.integers(0, 40))) / 40.0
    y = draw(arrays(np.bool_, n))
    y[0], y[1] = True, False
    return s, y


@settings(max_examples=150)
@given(scored())
def test_auc_matches_rank_oracle_and_is_monotone_invariant(sy):
    s, y = sy
    _, auc = screening_auc(s, y)
    if s.max() > s.min():
        assert auc == pytest.approx(trapezoid_auc(s.tolist(), y.tolist()), abs=1e-12)
        # strictly increasing transforms leave the curve unchanged
        curve, auc2 = screening_auc(np.exp(3 * s) + 5, y)
        curve0, _ = screening_auc(s, y)
        assert auc2 == auc
        np.testing.assert_array_equal(curve.tpr, curve0.tpr)
        np.testing.assert_array_equal(curve.fpr, curve0.fpr)


# ---------------------------------------------------------------- challenge score


def test_rank_score_published_examples():
    assert rank_score(2, 1, 2) == 1.75
    assert rank_score(1, 7, 1) == 2.50


def test_challenge_table_reproduced(tmp_path):
    entries = challenge_score(metric_table())
    assert [e.team for e in entries] == list(TEAMS)
    for e in entries:
        assert e.S_f == TEAMS[e.team][3]
    out = tmp_path / "lb.csv"
    write_leaderboard(out, entries)
    assert out.read_text().splitlines()[1].startswith("1,CUHKMED,2,1,2,1.75")
    assert read_team_table(write_csv(tmp_path / "t.csv")) == metric_table()


def test_challenge_single_team_and_ties():
    [e] = challenge_score({"solo": (0.5, 0.5, 0.1)})
    assert (e.R_cup, e.R_disc, e.R_delta, e.S_f) == (1, 1, 1, 1.0)
    es = challenge_score({"a": (0.8, 0.9, 0.1), "b": (0.8, 0.9, 0.1), "c": (0.7, 0.9, 0.2)})
    by = {e.team: e for e in es}
    assert by["a"].R_cup == by["b"].R_cup == 1 and by["c"].R_cup == 3
    assert by["c"].R_disc == 1


def test_eval_record_delta_field():
    r = EvalRecord("x", 0.5, 0.9, 0.3, 0.45, abs(0.3 - 0.45))
    assert r.delta == abs(r.CDR_p - r.CDR_g)
